"""Line-delimited record I/O, canonical JSON, seeds, and config resolution.

Every artifact this package writes must be byte-identical across same-seed
runs, so all JSON goes through one canonical encoder (sorted keys, fixed
separators, ASCII) and all derived randomness flows from ``derive_seed``.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

import yaml

from .errors import ConfigError, SchemaMismatch


def canonical_json(obj: Any) -> str:
    """Deterministic single-line JSON encoding."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def stable_hash(obj: Any) -> str:
    """Hex digest of the canonical JSON form (first 16 hex chars of sha256)."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def derive_seed(root_seed: int, *labels: Any) -> int:
    """Stable 63-bit seed derived from a root seed and a label path.

    Independent of iteration order and worker count: the same
    (root_seed, labels) always yields the same seed.
    """
    key = "|".join([str(int(root_seed))] + [str(l) for l in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def write_jsonl(path: str | Path, rows: Iterable[dict[str, Any]]) -> int:
    """Write rows as canonical JSON lines. Returns the row count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(canonical_json(row))
            f.write("\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    """Yield one dict per non-empty line; malformed lines raise SchemaMismatch."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaMismatch(f"{path}:{lineno}: invalid JSON ({e})") from e
            if not isinstance(row, dict):
                raise SchemaMismatch(f"{path}:{lineno}: expected an object per line")
            yield row


def load_yaml_config(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping at top level")
    return data


def resolve_config(
    defaults: dict[str, Any],
    config_path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
    section: str | None = None,
) -> dict[str, Any]:
    """Layer configuration: defaults <- yaml file [section] <- explicit overrides.

    Unknown keys in the file or overrides raise ConfigError so typos fail loudly.
    Override values of None mean "not set on the command line" and are skipped.
    """
    merged = dict(defaults)
    if config_path is not None:
        file_cfg = load_yaml_config(config_path)
        if section is not None:
            file_cfg = file_cfg.get(section, {})
            if not isinstance(file_cfg, dict):
                raise ConfigError(f"config section '{section}' must be a mapping")
        for key, value in file_cfg.items():
            if key not in merged:
                raise ConfigError(f"unknown config key '{key}'"
                                  + (f" in section '{section}'" if section else ""))
            merged[key] = value
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in merged:
            raise ConfigError(f"unknown config override '{key}'")
        merged[key] = value
    return merged


def write_config_snapshot(out_dir: str | Path, cfg: dict[str, Any], name: str = "config.json") -> str:
    """Persist the resolved config next to the artifacts; returns its hash."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(cfg, sort_keys=True, indent=2, ensure_ascii=True))
        f.write("\n")
    return stable_hash(cfg)


def env_override(name: str, default: str | None = None) -> str | None:
    """Environment override hook (endpoint/credentials only)."""
    return os.environ.get(name, default)


def run_parallel(
    fn: Callable[[Any], Any],
    items: list[Any],
    workers: int,
) -> list[Any]:
    """Map fn over items, optionally with a process pool.

    Results come back in input order regardless of worker count, so callers
    stay deterministic. ``fn`` must be picklable when workers > 1.
    """
    if workers <= 1:
        return [fn(item) for item in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (workers * 4) or 1)))
