"""End-to-end CLI tests: every subcommand, the exit-code contract, layered
configuration, and rerun byte-identity."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from handcast.cli import main
from handcast.datasetgen import load_qa_samples
from handcast.gt_pipeline import ClipStore
from handcast.records import read_jsonl

TINY = (
    "--set train.steps=4 --set train.warmup_steps=1 --set train.log_every=2 "
    "--set train.batch_size=2 --set model.d_model=32 --set model.n_layers=1"
).split()


def run(*args: str, code: int = 0) -> "Result":
    result = CliRunner().invoke(main, [str(a) for a in args])
    assert result.exit_code == code, f"exit {result.exit_code}: {result.output}"
    return result


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory) -> dict[str, Path]:
    """One full pipeline run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    world, gt, qa, trainrun = root / "world", root / "gt", root / "qa", root / "run"
    run("make-dataset", "--task", "synth", "--out", world, "--n-clips", 4, "--seed", 9)
    run("build-gt", "--clips", world, "--out", gt, "--seed", 9)
    run("make-dataset", "--task", "vhp", "--gt", gt / "gt.jsonl", "--out", qa, "--seed", 9)
    run("make-dataset", "--task", "rbhp", "--gt", gt / "gt.jsonl", "--out", qa, "--seed", 9)
    run("train", "--qa", qa / "qa_vhp.jsonl", "--vocab", qa / "vocab.json",
        "--clips", world, "--out", trainrun, "--seed", 9, *TINY)
    pred = root / "pred.jsonl"
    run("predict", "--checkpoint", trainrun / "checkpoint.pt", "--qa", qa / "qa_vhp.jsonl",
        "--clips", world, "--out", pred, "--seed", 9)
    return {"root": root, "world": world, "gt": gt, "qa": qa, "run": trainrun, "pred": pred}


# ---------------------------------------------------------------------------
# build-gt


def test_build_gt_outputs_sorted_and_stamped(pipeline):
    rows = list(read_jsonl(pipeline["gt"] / "gt.jsonl"))
    assert len(rows) == 4
    ids = [r["clip_id"] for r in rows]
    assert ids == sorted(ids)
    snapshot = json.loads((pipeline["gt"] / "config.build-gt.json").read_text())
    assert all(r["provenance"]["config_hash"] == snapshot["config_hash"] for r in rows)
    assert snapshot["command"] == "build-gt"
    assert snapshot["config"]["seed"] == 9


def test_build_gt_empty_store_warns_and_succeeds(tmp_path):
    import numpy as np

    store = tmp_path / "empty"
    store.mkdir()
    for name in (ClipStore.CLIPS, ClipStore.DETECTIONS, ClipStore.MATCHES, ClipStore.MASKS):
        (store / name).write_text("")
    np.save(store / ClipStore.FRAMES, np.zeros((0, 1, 4, 4, 3), dtype=np.uint8))
    result = run("build-gt", "--clips", store, "--out", tmp_path / "gt")
    assert "warning" in result.stderr
    assert (tmp_path / "gt" / "gt.jsonl").read_text() == ""


def test_build_gt_malformed_row_names_line(pipeline, tmp_path):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(pipeline["world"], broken)
    clips = broken / ClipStore.CLIPS
    lines = clips.read_text().splitlines()
    lines[1] = "{not json"
    clips.write_text("\n".join(lines) + "\n")
    result = CliRunner().invoke(main, ["build-gt", "--clips", str(broken), "--out", str(tmp_path / "gt")])
    assert result.exit_code == 2
    assert f"{ClipStore.CLIPS}:2" in result.stderr


# ---------------------------------------------------------------------------
# make-dataset


def test_make_dataset_requires_gt_for_qa_tasks(tmp_path):
    result = CliRunner().invoke(main, ["make-dataset", "--task", "vhp", "--out", str(tmp_path)])
    assert result.exit_code == 1
    assert "--gt" in result.stderr


def test_make_dataset_live_without_endpoint_is_config_error(pipeline, tmp_path):
    result = CliRunner().invoke(
        main,
        ["make-dataset", "--task", "rbhp", "--gt", str(pipeline["gt"] / "gt.jsonl"),
         "--out", str(tmp_path), "--set", "client.mode=live", "--set", "client.base_url="],
    )
    assert result.exit_code == 1
    assert "base_url" in result.stderr


def test_make_dataset_replay_reproduces_stub_run(pipeline, tmp_path):
    replayed = tmp_path / "qa"
    run("make-dataset", "--task", "rbhp", "--gt", pipeline["gt"] / "gt.jsonl",
        "--out", replayed, "--seed", 9,
        "--replay", pipeline["qa"] / "transcript.jsonl")
    assert (replayed / "qa_rbhp.jsonl").read_bytes() == (
        pipeline["qa"] / "qa_rbhp.jsonl"
    ).read_bytes()


def test_make_dataset_empty_gt_warns(tmp_path):
    empty = tmp_path / "gt.jsonl"
    empty.write_text("")
    result = run("make-dataset", "--task", "vhp", "--gt", empty, "--out", tmp_path / "qa")
    assert "empty" in result.stderr
    assert (tmp_path / "qa" / "qa_vhp.jsonl").read_text() == ""


# ---------------------------------------------------------------------------
# train / predict


def test_train_artifacts(pipeline):
    assert (pipeline["run"] / "checkpoint.pt").exists()
    steps = [row["step"] for row in read_jsonl(pipeline["run"] / "metrics.jsonl")]
    assert steps == [2, 4]
    assert (pipeline["run"] / "config.train.json").exists()


def test_train_resume_rejects_different_vocab(pipeline, tmp_path):
    from handcast.tokens import Vocabulary

    grown = Vocabulary.from_dict(
        json.loads((pipeline["qa"] / "vocab.json").read_text())
    )
    mutated = Vocabulary.build(grown.decode(range(len(grown))) + ["xylophone"])
    other = tmp_path / "vocab.json"
    other.write_text(json.dumps(mutated.to_dict()))
    result = CliRunner().invoke(
        main,
        ["train", "--qa", str(pipeline["qa"] / "qa_vhp.jsonl"), "--vocab", str(other),
         "--clips", str(pipeline["world"]), "--out", str(tmp_path / "r"),
         "--resume", str(pipeline["run"] / "checkpoint.pt")],
    )
    assert result.exit_code == 1
    assert "vocab" in result.stderr.lower()


def test_train_resume_continues_from_checkpoint(pipeline, tmp_path):
    """Resuming a finished run is a no-op that leaves the step count alone."""
    import shutil

    rundir = tmp_path / "r"
    rundir.mkdir()
    shutil.copy(pipeline["run"] / "checkpoint.pt", rundir / "checkpoint.pt")
    result = run("train", "--qa", pipeline["qa"] / "qa_vhp.jsonl",
                 "--vocab", pipeline["qa"] / "vocab.json",
                 "--clips", pipeline["world"], "--out", rundir,
                 "--resume", rundir / "checkpoint.pt")
    assert "step 4" in result.output


def test_predict_file_shape(pipeline):
    rows = list(read_jsonl(pipeline["pred"]))
    meta, body = rows[0], rows[1:]
    assert meta["kind"] == "meta"
    assert meta["k"] == 1 and meta["temperature"] == 0.0 and meta["horizon"] == 4
    assert meta["checkpoint_step"] == 4
    assert len(body) == 4
    assert [r["clip_id"] for r in body] == sorted(r["clip_id"] for r in body)
    assert all(len(r["generations"]) == 1 for r in body)
    assert (Path(str(pipeline["pred"]) + ".config.json")).exists()


def test_predict_k_emits_k_generations(pipeline, tmp_path):
    out = tmp_path / "p.jsonl"
    run("predict", "--checkpoint", pipeline["run"] / "checkpoint.pt",
        "--qa", pipeline["qa"] / "qa_vhp.jsonl", "--clips", pipeline["world"],
        "--out", out, "--seed", 9,
        "--set", "sampling.k=3", "--set", "sampling.temperature=0.8",
        "--set", "sampling.deterministic_hand=false")
    body = [r for r in read_jsonl(out) if r.get("kind") != "meta"]
    assert all(len(r["generations"]) == 3 for r in body)
    texts = {g["text"] for r in body for g in r["generations"]}
    assert len(texts) >= 2, "temperature sampling produced no diversity"


def test_predict_missing_checkpoint_fails(pipeline):
    result = CliRunner().invoke(
        main,
        ["predict", "--checkpoint", "/nonexistent.pt", "--qa", str(pipeline["qa"] / "qa_vhp.jsonl"),
         "--clips", str(pipeline["world"]), "--out", "/tmp/x.jsonl"],
    )
    assert result.exit_code == 1


# ---------------------------------------------------------------------------
# eval / baseline


def test_eval_gt_as_predictions_scores_zero(pipeline, tmp_path):
    result = run("eval", "--gt", pipeline["gt"] / "gt.jsonl",
                 "--predictions", pipeline["gt"] / "gt.jsonl", "--out", tmp_path)
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["ade"] == 0.0 and report["fde"] == 0.0 and report["wde"] == 0.0
    assert "ADE       0.0000" in result.output


def test_eval_requires_exactly_one_source(pipeline, tmp_path):
    for extra in ([], ["--predictions", str(pipeline["pred"]), "--baseline", "kalman"]):
        result = CliRunner().invoke(
            main, ["eval", "--gt", str(pipeline["gt"] / "gt.jsonl"),
                   "--out", str(tmp_path), *extra],
        )
        assert result.exit_code == 1


def test_eval_baseline_flag_matches_baseline_command(pipeline, tmp_path):
    ballpark = tmp_path / "kalman.jsonl"
    run("baseline", "--method", "kalman", "--clips", pipeline["world"],
        "--gt", pipeline["gt"] / "gt.jsonl", "--out", ballpark)
    run("eval", "--gt", pipeline["gt"] / "gt.jsonl", "--predictions", ballpark,
        "--out", tmp_path / "a")
    run("eval", "--gt", pipeline["gt"] / "gt.jsonl", "--baseline", "kalman",
        "--clips", pipeline["world"], "--out", tmp_path / "b")
    ra = json.loads((tmp_path / "a" / "report.json").read_text())
    rb = json.loads((tmp_path / "b" / "report.json").read_text())
    assert ra["ade"] == rb["ade"] and ra["fde"] == rb["fde"] and ra["wde"] == rb["wde"]


def test_eval_k_limits_generations(pipeline, tmp_path):
    gt_rows = list(read_jsonl(pipeline["gt"] / "gt.jsonl"))
    rows = []
    for r in gt_rows:
        exact = r["trajectory"]
        junk = {
            "n_steps": exact["n_steps"],
            "left": [[0.99, 0.99] if p else None for p in exact["left"]],
            "right": [[0.99, 0.99] if p else None for p in exact["right"]],
        }
        rows.append({"clip_id": r["clip_id"],
                     "generations": [{"trajectory": exact}, {"trajectory": junk}]})
    pred = tmp_path / "two.jsonl"
    with open(pred, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    run("eval", "--gt", pipeline["gt"] / "gt.jsonl", "--predictions", pred,
        "--k", 1, "--out", tmp_path / "k1")
    run("eval", "--gt", pipeline["gt"] / "gt.jsonl", "--predictions", pred,
        "--out", tmp_path / "kall")
    k1 = json.loads((tmp_path / "k1" / "report.json").read_text())
    kall = json.loads((tmp_path / "kall" / "report.json").read_text())
    assert k1["ade"] == 0.0
    assert kall["ade"] > 0.01


def test_eval_refuses_horizon_mismatch(pipeline, tmp_path):
    pred = tmp_path / "h.jsonl"
    pred.write_text('{"kind": "meta", "horizon": 3}\n')
    result = CliRunner().invoke(
        main, ["eval", "--gt", str(pipeline["gt"] / "gt.jsonl"),
               "--predictions", str(pred), "--out", str(tmp_path / "o")],
    )
    assert result.exit_code == 1
    assert "horizon" in result.stderr


def test_eval_malformed_predictions_is_data_error(pipeline, tmp_path):
    pred = tmp_path / "bad.jsonl"
    pred.write_text('{"clip_id": "clip00000", "surprise": 1}\n')
    result = CliRunner().invoke(
        main, ["eval", "--gt", str(pipeline["gt"] / "gt.jsonl"),
               "--predictions", str(pred), "--out", str(tmp_path / "o")],
    )
    assert result.exit_code == 2


def test_eval_weights_option(pipeline, tmp_path):
    run("eval", "--gt", pipeline["gt"] / "gt.jsonl", "--predictions", pipeline["pred"],
        "--out", tmp_path, "--set", "eval.weights=uniform")
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["wde_weights"] == [0.25, 0.25, 0.25, 0.25]
    assert report["wde"] == pytest.approx(report["ade"], abs=1e-12)


# ---------------------------------------------------------------------------
# plot


def test_plot_writes_deterministic_pngs(pipeline, tmp_path):
    for name in ("x", "y"):
        run("plot", "--gt", pipeline["gt"] / "gt.jsonl", "--clips", pipeline["world"],
            "--predictions", pipeline["pred"], "--out", tmp_path / name, "--limit", 2)
    pngs = sorted((tmp_path / "x").glob("*.png"))
    assert len(pngs) == 2
    for png in pngs:
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert png.read_bytes() == (tmp_path / "y" / png.name).read_bytes()


# ---------------------------------------------------------------------------
# configuration layering


def test_config_file_and_set_flags_layer(tmp_path):
    config = tmp_path / "cfg.yaml"
    config.write_text("synth:\n  n_distractors: 1\n")
    run("make-dataset", "--task", "synth", "--out", tmp_path / "w", "--n-clips", 1,
        "--config", config, "--set", "synth.glyph_size=3")
    snapshot = json.loads((tmp_path / "w" / "config.make-dataset.json").read_text())
    assert snapshot["config"]["synth"]["n_distractors"] == 1
    assert snapshot["config"]["synth"]["glyph_size"] == 3


def test_unknown_config_section_rejected(tmp_path):
    config = tmp_path / "cfg.yaml"
    config.write_text("bogus:\n  x: 1\n")
    result = CliRunner().invoke(
        main, ["make-dataset", "--task", "synth", "--out", str(tmp_path / "w"),
               "--config", str(config)],
    )
    assert result.exit_code == 1
    assert "bogus" in result.stderr


def test_invalid_set_value_rejected(pipeline, tmp_path):
    result = CliRunner().invoke(
        main, ["train", "--qa", str(pipeline["qa"] / "qa_vhp.jsonl"),
               "--vocab", str(pipeline["qa"] / "vocab.json"),
               "--clips", str(pipeline["world"]), "--out", str(tmp_path),
               "--set", "train.steps=soon"],
    )
    assert result.exit_code == 1


def test_rerun_byte_identity(tmp_path):
    digests = []
    for name in ("a", "b"):
        root = tmp_path / name
        run("make-dataset", "--task", "synth", "--out", root / "w", "--n-clips", 2, "--seed", 3)
        run("build-gt", "--clips", root / "w", "--out", root / "g", "--seed", 3)
        run("make-dataset", "--task", "vhp", "--gt", root / "g" / "gt.jsonl",
            "--out", root / "q", "--seed", 3)
        digests.append(
            tuple(
                (root / rel).read_bytes()
                for rel in ("w/clips.jsonl", "w/frames.npy", "g/gt.jsonl", "q/qa_vhp.jsonl",
                            "q/vocab.json")
            )
        )
    assert digests[0] == digests[1]
