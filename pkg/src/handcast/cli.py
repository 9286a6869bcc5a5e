"""Command-line entry point tying the pipeline together.

Subcommands: build-gt, make-dataset, train, predict, eval, baseline, plot.
Configuration is layered (built-in defaults < --config YAML < --set flags);
the fully resolved config is written alongside every artifact and its hash is
stamped into outputs that carry metadata. Exit codes: 0 success, 1 bad usage
or configuration, 2 bad input data, 3 runtime failure.
"""

from __future__ import annotations

import functools
import sys
import traceback
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

import click
import numpy as np
import yaml

from .chatclient import (
    ChatClientConfig,
    HttpChatClient,
    TranscriptRecorder,
    TranscriptReplayer,
)
from .datasetgen import (
    RBHP_BASENAME,
    TRANSCRIPT_BASENAME,
    VHP_BASENAME,
    VOCAB_BASENAME,
    QASample,
    build_vocab,
    gen_rbhp,
    gen_vhp,
    load_gt_rows,
    load_qa_samples,
    stub_annotator,
    write_qa_samples,
)
from .errors import ConfigError, DataError, HandcastError, SchemaMismatch
from .evaluation import (
    BASELINES,
    WdeWeights,
    align_horizons,
    evaluate,
    self_consistency,
)
from .gt_pipeline import (
    ClipStore,
    FilterCriteria,
    PipelineConfig,
    build_gt_dataset,
    extract_hand_centers,
)
from .model import GenerateSettings, ModelConfig, generate
from .plotting import plot_forecast
from .records import (
    canonical_json,
    derive_seed,
    env_override,
    read_jsonl,
    stable_hash,
    write_jsonl,
)
from .synthworld import SynthSpec, generate_world
from .tokens import Vocabulary, tokenize_sample
from .trajectory import GTSample, HandTrajectory
from .training import (
    TrainData,
    TrainSettings,
    build_model,
    frames_to_tensor,
    load_checkpoint,
    model_from_checkpoint,
    train_loop,
)

# the contract reserves 2 for data errors; click's default usage exit is 2
click.exceptions.UsageError.exit_code = 1

PREDICTIONS_BASENAME = "predictions.jsonl"
REPORT_TEXT_BASENAME = "report.txt"
REPORT_JSON_BASENAME = "report.json"


# ---------------------------------------------------------------------------
# layered configuration


def _without_seed(d: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in d.items() if k != "seed"}


def default_config() -> dict[str, Any]:
    """Built-in defaults, mirrored from each module's config dataclass. The
    per-command --seed flows into every section, so sections carry no seed."""
    model = {
        f.name: f.default for f in fields(ModelConfig) if f.name != "vocab_size"
    }
    return {
        "seed": 0,
        "workers": 1,
        "synth": asdict(SynthSpec()),
        "pipeline": _without_seed(asdict(PipelineConfig())),
        "model": model,
        "train": _without_seed(asdict(TrainSettings())),
        "sampling": {"k": 1, **_without_seed(asdict(GenerateSettings()))},
        "client": {"mode": "stub", **asdict(ChatClientConfig())},
        "eval": {"weights": "linear"},
    }


def _merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _apply_assignments(cfg: dict[str, Any], assignments: tuple[str, ...]) -> None:
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"--set {key}: unparseable value {raw!r} ({e})") from e
        node: Any = cfg
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not a config section")
        node[leaf] = value


def resolve_config(
    config_path: str | None,
    seed: int | None,
    workers: int | None,
    assignments: tuple[str, ...] = (),
) -> dict[str, Any]:
    cfg = default_config()
    if config_path is not None:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config file {config_path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {config_path} is not valid YAML: {e}") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_path} must hold a mapping")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = _merge(cfg, loaded)
    _apply_assignments(cfg, assignments)
    if seed is not None:
        cfg["seed"] = int(seed)
    if workers is not None:
        cfg["workers"] = int(workers)
    return cfg


def config_hash(cfg: dict[str, Any]) -> str:
    return stable_hash(canonical_json(cfg))


def _section(cfg: dict[str, Any], name: str, cls, **extra) -> Any:
    """Instantiate a config dataclass from a section; unknown keys are fatal."""
    try:
        return cls(**{**cfg[name], **extra})
    except TypeError as e:
        raise ConfigError(f"config section '{name}': {e}") from e
    except (ValueError, ConfigError) as e:
        raise ConfigError(f"config section '{name}': {e}") from e


def _pipeline_config(cfg: dict[str, Any]) -> PipelineConfig:
    section = dict(cfg["pipeline"])
    criteria = section.pop("criteria", {})
    try:
        return PipelineConfig(
            criteria=FilterCriteria(**criteria), seed=cfg["seed"], **section
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config section 'pipeline': {e}") from e


def _write_snapshot(
    target: Path, command: str, cfg: dict[str, Any], file_output: bool = False
) -> None:
    """Resolved config next to the artifact: <dir>/config.<command>.json for
    directory outputs, <file>.config.json for file outputs."""
    if file_output:
        path = target.parent / f"{target.name}.config.json"
    else:
        path = target / f"config.{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": cfg, "config_hash": config_hash(cfg)}
    path.write_text(canonical_json(payload) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# exit-code mapping


def _cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
        except (DataError, OSError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)
        except HandcastError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(3)
        except Exception:
            traceback.print_exc()
            sys.exit(3)

    return wrapper


def _config_options(fn):
    for deco in (
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="YAML config file layered over built-in defaults."),
        click.option("--seed", type=int, default=None, help="Global seed for this command."),
        click.option("--workers", type=int, default=None, help="Parallel workers (default 1)."),
        click.option("--set", "assignments", multiple=True, metavar="KEY=VALUE",
                     help="Override one config value, e.g. --set train.steps=200."),
    ):
        fn = deco(fn)
    return fn


# ---------------------------------------------------------------------------
# shared assembly helpers


def _load_vocab(path: Path) -> Vocabulary:
    import json

    try:
        return Vocabulary.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise SchemaMismatch(f"{path}: not a vocabulary file ({e})") from e


def _frames_index(store: ClipStore) -> dict[str, int]:
    out: dict[str, int] = {}
    for row in read_jsonl(store.root / ClipStore.CLIPS):
        if row.get("frames_index") is None:
            raise SchemaMismatch(f"clip {row.get('clip_id')} has no frames_index")
        out[str(row["clip_id"])] = int(row["frames_index"])
    return out


def _check_frame_shape(model_cfg: ModelConfig, bank: np.ndarray) -> None:
    t, h, w, c = bank.shape[-4:]
    if (h, w, c) != (model_cfg.frame_height, model_cfg.frame_width, model_cfg.frame_channels):
        raise ConfigError(
            f"model expects {model_cfg.frame_height}x{model_cfg.frame_width}x"
            f"{model_cfg.frame_channels} frames but the store holds {h}x{w}x{c}"
        )
    if t != model_cfg.context_frames:
        raise ConfigError(
            f"model expects {model_cfg.context_frames} context frames, store holds {t}"
        )


def _make_client(cfg: dict[str, Any], record: Path | None, replay: str | None):
    if replay is not None:
        return TranscriptReplayer(Path(replay))
    section = dict(cfg["client"])
    mode = section.pop("mode", "stub")
    if mode == "stub":
        client: Any = stub_annotator()
    elif mode == "live":
        section["base_url"] = env_override("HANDCAST_ENDPOINT", section.get("base_url")) or ""
        if not section["base_url"]:
            raise ConfigError(
                "client.mode=live needs client.base_url (or HANDCAST_ENDPOINT); "
                "use client.mode=stub for offline runs"
            )
        try:
            client = HttpChatClient(ChatClientConfig(**section))
        except TypeError as e:
            raise ConfigError(f"config section 'client': {e}") from e
    else:
        raise ConfigError(f"client.mode must be 'stub' or 'live', got {mode!r}")
    if record is not None:
        client = TranscriptRecorder(client, record)
    return client


def _context_from_detections(clip, min_confidence: float) -> HandTrajectory:
    """Observed per-frame hand centers as a T-step trajectory (the baseline's
    view of the context; coordinates are each frame's own, not stabilized)."""
    centers = extract_hand_centers(clip.detections, min_confidence)
    track = HandTrajectory.empty(len(clip.context_frames))
    for i, frame in enumerate(clip.context_frames):
        for side, (xy, _conf) in centers.get(frame, {}).items():
            track.xy[i, side] = xy
            track.valid[i, side] = True
    return track


def _wde_weights(name: str, n_steps: int) -> WdeWeights:
    makers = {
        "linear": WdeWeights.linear,
        "uniform": WdeWeights.uniform,
        "final": WdeWeights.final_only,
    }
    if name not in makers:
        raise ConfigError(f"eval.weights must be one of {sorted(makers)}, got {name!r}")
    return makers[name](n_steps)


def _write_predictions(out: Path, meta: dict[str, Any], rows: list[dict[str, Any]]) -> None:
    rows = sorted(rows, key=lambda r: str(r["clip_id"]))
    write_jsonl(out, [{"kind": "meta", **meta}] + rows)


def _load_predictions(
    path: Path, k: int | None
) -> tuple[dict[str, Any], dict[str, HandTrajectory]]:
    """Read a predictions file; GT-format rows (plain trajectory per clip)
    are accepted too, so a GT file can be scored against itself."""
    meta: dict[str, Any] = {}
    preds: dict[str, HandTrajectory] = {}
    for row in read_jsonl(path):
        if row.get("kind") == "meta":
            meta = row
            continue
        clip_id = row.get("clip_id")
        if clip_id is None:
            raise SchemaMismatch(f"{path}: prediction row without clip_id")
        try:
            if "generations" in row:
                gens = [HandTrajectory.from_dict(g["trajectory"]) for g in row["generations"]]
                gens = align_horizons(gens[:k] if k else gens)
                preds[str(clip_id)] = self_consistency(gens)
            elif "trajectory" in row:
                preds[str(clip_id)] = HandTrajectory.from_dict(row["trajectory"])
            else:
                raise SchemaMismatch(
                    f"{path}: row for {clip_id} has neither 'generations' nor 'trajectory'"
                )
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaMismatch(f"{path}: malformed row for {clip_id}: {e}") from e
    return meta, preds


def _gt_pairs(path: Path) -> list[tuple[str, GTSample]]:
    rows = load_gt_rows(Path(path))
    if not rows:
        return []
    return sorted(((g.clip_id, g) for g in rows), key=lambda p: p[0])


# ---------------------------------------------------------------------------
# commands


@click.group()
def main() -> None:
    """Egocentric hand-trajectory forecasting pipeline."""


@main.command("build-gt")
@click.option("--clips", "clips_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@_config_options
@_cli_errors
def cmd_build_gt(clips_dir, out_dir, config_path, seed, workers, assignments):
    """Reconstruct ground-truth trajectories from a clip store."""
    cfg = resolve_config(config_path, seed, workers, assignments)
    out = Path(out_dir)
    counts = build_gt_dataset(
        clips_dir,
        out,
        _pipeline_config(cfg),
        workers=cfg["workers"],
        config_hash=config_hash(cfg),
    )
    _write_snapshot(out, "build-gt", cfg)
    if counts["accepted"] == 0:
        click.echo("warning: no clips were accepted", err=True)
    click.echo(
        f"accepted {counts['accepted']} rejected {counts['rejected']} -> {out / 'gt.jsonl'}"
    )


@main.command("make-dataset")
@click.option("--task", type=click.Choice(["synth", "vhp", "rbhp"]), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--gt", "gt_path", type=click.Path(exists=True, dir_okay=False),
              help="GT dataset file (required for vhp/rbhp).")
@click.option("--n-clips", type=int, default=16, show_default=True,
              help="Number of clips for --task synth.")
@click.option("--record", type=click.Path(), default=None,
              help="Record annotator replies to this transcript file.")
@click.option("--replay", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Replay annotator replies from a transcript instead of calling one.")
@_config_options
@_cli_errors
def cmd_make_dataset(task, out_dir, gt_path, n_clips, record, replay,
                     config_path, seed, workers, assignments):
    """Generate the synthetic world or a QA dataset from a GT file."""
    cfg = resolve_config(config_path, seed, workers, assignments)
    out = Path(out_dir)
    if task == "synth":
        spec = _section(cfg, "synth", SynthSpec)
        counts = generate_world(spec, seed=cfg["seed"], n_clips=n_clips, out_dir=out)
        _write_snapshot(out, "make-dataset", cfg)
        click.echo(f"wrote {counts['clips']} clips -> {out}")
        return

    if gt_path is None:
        raise ConfigError(f"--task {task} needs --gt")
    gts = load_gt_rows(Path(gt_path))
    if not gts:
        click.echo("warning: GT file is empty; writing an empty dataset", err=True)
    if task == "vhp":
        samples = gen_vhp(gts, seed=cfg["seed"])
        qa_path = out / VHP_BASENAME
    else:
        record_path = None
        if replay is None:
            # the transcript is an output of this run, so start it fresh
            record_path = Path(record) if record else out / TRANSCRIPT_BASENAME
            record_path.parent.mkdir(parents=True, exist_ok=True)
            record_path.unlink(missing_ok=True)
        client = _make_client(cfg, record_path, replay)
        samples = gen_rbhp(gts, client, seed=cfg["seed"])
        qa_path = out / RBHP_BASENAME
    h = config_hash(cfg)
    for s in samples:
        s.provenance["config_hash"] = h
    write_qa_samples(qa_path, samples)
    _rebuild_vocab(out)
    _write_snapshot(out, "make-dataset", cfg)
    click.echo(f"wrote {len(samples)} {task} samples -> {qa_path}")


def _rebuild_vocab(out: Path) -> None:
    """Vocabulary over every QA file present in the output directory."""
    qa_sets: list[list[QASample]] = []
    for name in (VHP_BASENAME, RBHP_BASENAME):
        if (out / name).exists():
            qa_sets.append(load_qa_samples(out / name))
    vocab = build_vocab(qa_sets)
    (out / VOCAB_BASENAME).write_text(
        canonical_json(vocab.to_dict()) + "\n", encoding="utf-8"
    )


@main.command("train")
@click.option("--qa", "qa_paths", type=click.Path(exists=True, dir_okay=False),
              multiple=True, required=True, help="QA dataset file(s).")
@click.option("--vocab", "vocab_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--clips", "clips_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Clip store providing context frames.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Checkpoint to continue from.")
@_config_options
@_cli_errors
def cmd_train(qa_paths, vocab_path, clips_dir, out_dir, resume,
              config_path, seed, workers, assignments):
    """Train the forecast model on QA datasets."""
    cfg = resolve_config(config_path, seed, workers, assignments)
    out = Path(out_dir)
    vocab = _load_vocab(Path(vocab_path))

    resume_payload = None
    if resume is not None:
        resume_payload = load_checkpoint(Path(resume))
        if resume_payload["vocab"] != vocab.to_dict():
            raise ConfigError("--vocab disagrees with the checkpoint's vocabulary")
        model = model_from_checkpoint(resume_payload)
        model_cfg = model.cfg
        # the schedule was fixed when the run started; keep its settings
        settings = TrainSettings(**resume_payload["settings"])
    else:
        model_cfg = _section(cfg, "model", ModelConfig, vocab_size=len(vocab))
        model = build_model(model_cfg, vocab, seed=cfg["seed"])
        settings = _section(cfg, "train", TrainSettings, seed=cfg["seed"])

    store = ClipStore(clips_dir)
    bank = store.load_frames()
    _check_frame_shape(model_cfg, bank)
    index = _frames_index(store)

    samples: list[QASample] = []
    for path in qa_paths:
        samples.extend(load_qa_samples(Path(path)))
    sequences, frame_index = [], []
    for s in samples:
        if s.clip_id not in index:
            raise DataError(f"QA sample {s.clip_id} has no clip in {clips_dir}")
        sequences.append(tokenize_sample(s.question, s.answer, s.trajectory, vocab))
        frame_index.append(index[s.clip_id])
    data = TrainData(sequences, frames_to_tensor(bank), frame_index)

    result = train_loop(model, data, settings, out_dir=out, resume=resume_payload)
    _write_snapshot(out, "train", cfg)
    click.echo(
        f"trained {len(sequences)} sequences to step {result.final_step}"
        f" -> {result.checkpoint_path}"
    )


@main.command("predict")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--qa", "qa_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--clips", "clips_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_config_options
@_cli_errors
def cmd_predict(checkpoint, qa_path, clips_dir, out_path, config_path, seed, workers, assignments):
    """Generate trajectories for every sample in a QA file."""
    cfg = resolve_config(config_path, seed, workers, assignments)
    sampling = dict(cfg["sampling"])
    k = int(sampling.pop("k", 1))
    if k < 1:
        raise ConfigError(f"sampling.k must be >= 1, got {k}")
    try:
        GenerateSettings(**sampling, seed=0)  # validate the section up front
    except TypeError as e:
        raise ConfigError(f"config section 'sampling': {e}") from e

    payload = load_checkpoint(Path(checkpoint))
    model = model_from_checkpoint(payload)
    store = ClipStore(clips_dir)
    bank = store.load_frames()
    _check_frame_shape(model.cfg, bank)
    index = _frames_index(store)
    samples = load_qa_samples(Path(qa_path))

    rows = []
    for s in samples:
        if s.clip_id not in index:
            raise DataError(f"QA sample {s.clip_id} has no clip in {clips_dir}")
        frames = frames_to_tensor(bank[index[s.clip_id]])
        generations = []
        for j in range(k):
            settings = GenerateSettings(
                **sampling, seed=derive_seed(cfg["seed"], s.clip_id, str(j))
            )
            result = generate(model, frames, s.question, settings)
            generations.append(
                {
                    "text": result.text,
                    "trajectory": result.trajectory.to_dict(),
                    "overrun": result.overrun,
                }
            )
        rows.append(
            {"clip_id": s.clip_id, "task": s.task, "question": s.question,
             "generations": generations}
        )

    horizons = {s.trajectory.n_steps for s in samples}
    meta = {
        "seed": cfg["seed"],
        "k": k,
        "temperature": sampling["temperature"],
        "deterministic_hand": sampling["deterministic_hand"],
        "checkpoint_step": payload["step"],
        "config_hash": config_hash(cfg),
        "coords": "normalized",
    }
    if len(horizons) == 1:
        meta["horizon"] = horizons.pop()
    out = Path(out_path)
    _write_predictions(out, meta, rows)
    _write_snapshot(out, "predict", cfg, file_output=True)
    click.echo(f"wrote {len(rows)} predictions (k={k}) -> {out}")


@main.command("baseline")
@click.option("--method", type=click.Choice(sorted(BASELINES)), required=True)
@click.option("--clips", "clips_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--gt", "gt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_config_options
@_cli_errors
def cmd_baseline(method, clips_dir, gt_path, out_path, config_path, seed, workers, assignments):
    """Extrapolate context detections into a predictions file."""
    cfg = resolve_config(config_path, seed, workers, assignments)
    min_confidence = cfg["pipeline"]["criteria"]["min_confidence"]
    gts = {g.clip_id: g for g in load_gt_rows(Path(gt_path))}
    predictor = BASELINES[method]

    rows = []
    for clip in ClipStore(clips_dir).iter_clips():
        gt = gts.get(clip.clip_id)
        if gt is None:
            continue
        context = _context_from_detections(clip, min_confidence)
        pred = predictor(context, gt.trajectory.n_steps)
        rows.append({"clip_id": clip.clip_id, "trajectory": pred.to_dict()})

    if not rows:
        click.echo("warning: no clip matched the GT file", err=True)
    meta = {
        "baseline": method,
        "seed": cfg["seed"],
        "k": 1,
        "temperature": 0.0,
        "config_hash": config_hash(cfg),
        "coords": "normalized",
    }
    out = Path(out_path)
    _write_predictions(out, meta, rows)
    _write_snapshot(out, "baseline", cfg, file_output=True)
    click.echo(f"wrote {len(rows)} {method} predictions -> {out}")


@main.command("eval")
@click.option("--gt", "gt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--predictions", "pred_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--baseline", "baseline_name", type=click.Choice(sorted(BASELINES)),
              help="Score a baseline directly instead of a predictions file.")
@click.option("--clips", "clips_dir", type=click.Path(exists=True, file_okay=False),
              help="Clip store (required with --baseline).")
@click.option("--k", type=int, default=None,
              help="Aggregate only the first K generations per sample.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--plots", is_flag=True, help="Emit trajectory overlay images.")
@click.option("--plot-limit", type=int, default=8, show_default=True)
@_config_options
@_cli_errors
def cmd_eval(gt_path, pred_path, baseline_name, clips_dir, k, out_dir, plots, plot_limit,
             config_path, seed, workers, assignments):
    """Score predictions (or a baseline) against a GT dataset."""
    cfg = resolve_config(config_path, seed, workers, assignments)
    if (pred_path is None) == (baseline_name is None):
        raise ConfigError("pass exactly one of --predictions or --baseline")
    pairs = _gt_pairs(Path(gt_path))
    if not pairs:
        raise DataError(f"{gt_path}: no ground-truth samples to evaluate")

    if baseline_name is not None:
        if clips_dir is None:
            raise ConfigError("--baseline needs --clips for the context detections")
        min_confidence = cfg["pipeline"]["criteria"]["min_confidence"]
        predictor = BASELINES[baseline_name]
        gts_by_id = dict(pairs)
        preds = {
            clip.clip_id: predictor(
                _context_from_detections(clip, min_confidence),
                gts_by_id[clip.clip_id].trajectory.n_steps,
            )
            for clip in ClipStore(clips_dir).iter_clips()
            if clip.clip_id in gts_by_id
        }
        name = f"baseline:{baseline_name}"
    else:
        meta, preds = _load_predictions(Path(pred_path), k)
        name = Path(pred_path).name
        horizons = {gt.trajectory.n_steps for _, gt in pairs}
        if meta.get("horizon") is not None and horizons != {meta["horizon"]}:
            raise ConfigError(
                f"predictions were generated for horizon {meta['horizon']} but the "
                f"GT file holds horizons {sorted(horizons)}"
            )
        if meta.get("coords", "normalized") != "normalized":
            raise ConfigError(f"predictions use unsupported coords {meta['coords']!r}")

    n_steps = pairs[0][1].trajectory.n_steps
    weights = _wde_weights(cfg["eval"]["weights"], n_steps)
    report = evaluate(
        [(cid, gt.trajectory) for cid, gt in pairs],
        preds,
        name=name,
        weights=weights,
        seed=cfg["seed"],
        config_hash=config_hash(cfg),
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_TEXT_BASENAME).write_text(report.to_text() + "\n", encoding="utf-8")
    (out / REPORT_JSON_BASENAME).write_text(
        canonical_json(report.to_dict()) + "\n", encoding="utf-8"
    )
    if plots:
        if clips_dir is None:
            raise ConfigError("--plots needs --clips for the background frames")
        _emit_overlays(out / "plots", pairs[:plot_limit], preds, ClipStore(clips_dir))
    _write_snapshot(out, "eval", cfg)
    click.echo(report.to_text())


def _emit_overlays(
    plot_dir: Path,
    pairs: list[tuple[str, GTSample]],
    preds: dict[str, HandTrajectory],
    store: ClipStore,
) -> None:
    bank = store.load_frames()
    index = _frames_index(store)
    for clip_id, gt in pairs:
        if clip_id not in index:
            continue
        frame = bank[index[clip_id]][-1]
        title = gt.narration or clip_id
        plot_forecast(
            frame, gt.trajectory, preds.get(clip_id), plot_dir / f"{clip_id}.png", title
        )


@main.command("plot")
@click.option("--gt", "gt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--clips", "clips_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--predictions", "pred_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--limit", type=int, default=8, show_default=True)
@_config_options
@_cli_errors
def cmd_plot(gt_path, clips_dir, pred_path, out_dir, limit,
             config_path, seed, workers, assignments):
    """Render trajectory overlays for the first clips of a GT dataset."""
    cfg = resolve_config(config_path, seed, workers, assignments)
    pairs = _gt_pairs(Path(gt_path))
    preds: dict[str, HandTrajectory] = {}
    if pred_path is not None:
        _, preds = _load_predictions(Path(pred_path), None)
    out = Path(out_dir)
    _emit_overlays(out, pairs[:limit], preds, ClipStore(clips_dir))
    _write_snapshot(out, "plot", cfg)
    click.echo(f"wrote {min(len(pairs), limit)} overlays -> {out}")


if __name__ == "__main__":
    main()
