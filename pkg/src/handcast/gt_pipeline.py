"""Ground-truth construction: detections -> smoothed future hand trajectories.

Per clip: mask-filter the matches of every consecutive sampled frame pair,
estimate pair homographies with RANSAC, project each future hand center into
the last observation frame, interpolate interior gaps with a cubic Hermite
spline (Catmull-Rom tangents), and filter the result against quality criteria.

Coordinates: detections arrive as normalized bboxes; matches/masks are pixel
rasters. Projection converts normalized centers to pixels, applies the chained
homographies, and converts back, so everything downstream of this module is
resolution-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from .errors import DataError, InsufficientInliers, MissingHomography, ShapeMismatch
from .geometry import (
    Homography,
    MatchSet,
    RansacConfig,
    RansacResult,
    chain_homographies,
    decode_mask_rle,
    default_inlier_threshold,
    encode_mask_rle,
    estimate_homography_ransac,
    filter_matches_by_mask,
    project_point,
)
from .records import canonical_json, derive_seed, read_jsonl, stable_hash, write_jsonl
from .trajectory import LEFT, RIGHT, SIDES, GTSample, HandTrajectory

SIDE_INDEX = {name: i for i, name in enumerate(SIDES)}


# ---------------------------------------------------------------------------
# domain types


@dataclass
class HandDetection:
    """One detected hand box in one frame; bbox normalized to [0, 1]."""

    frame: int
    side: int
    bbox: tuple[float, float, float, float]
    confidence: float

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.bbox
        if not (x1 < x2 and y1 < y2):
            raise ShapeMismatch(f"bbox must satisfy x1<x2, y1<y2, got {self.bbox}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ShapeMismatch(f"confidence must be in [0,1], got {self.confidence}")

    @property
    def center(self) -> np.ndarray:
        x1, y1, x2, y2 = self.bbox
        return np.array([(x1 + x2) / 2.0, (y1 + y2) / 2.0])


@dataclass
class FilterCriteria:
    """Quality gates applied to a reconstructed trajectory."""

    min_confidence: float = 0.5
    min_matches_per_pair: int = 10
    min_completeness: float = 0.5
    boundary_margin: float = 0.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.min_confidence <= 1.0):
            raise ValueError(f"min_confidence must be in [0,1], got {self.min_confidence}")
        if self.min_matches_per_pair < 0:
            raise ValueError("min_matches_per_pair must be >= 0")
        if not (0.0 <= self.min_completeness <= 1.0):
            raise ValueError(f"min_completeness must be in [0,1], got {self.min_completeness}")
        if self.boundary_margin < 0:
            raise ValueError("boundary_margin must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "min_confidence": self.min_confidence,
            "min_matches_per_pair": self.min_matches_per_pair,
            "min_completeness": self.min_completeness,
            "boundary_margin": self.boundary_margin,
        }


@dataclass
class ClipRecord:
    """A sampled clip: frame indices, detections, matches, masks, narration."""

    clip_id: str
    width: int
    height: int
    context_frames: list[int]
    future_frames: list[int]
    detections: dict[int, list[HandDetection]] = field(default_factory=dict)
    matches: dict[tuple[int, int], MatchSet] = field(default_factory=dict)
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    narration: str | None = None
    frames_ref: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        frames = list(self.context_frames) + list(self.future_frames)
        if len(self.context_frames) < 1 or len(self.future_frames) < 1:
            raise ShapeMismatch("clip needs >= 1 context frame and >= 1 future frame")
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ShapeMismatch(f"frame indices must be strictly increasing: {frames}")

    @property
    def last_obs(self) -> int:
        return self.context_frames[-1]

    @property
    def sampled_frames(self) -> list[int]:
        return list(self.context_frames) + list(self.future_frames)

    def consecutive_pairs(self) -> list[tuple[int, int]]:
        f = self.sampled_frames
        return list(zip(f[:-1], f[1:]))

    def future_pairs(self) -> list[tuple[int, int]]:
        """Consecutive pairs on the path last_obs -> ... -> last future frame."""
        f = [self.last_obs] + list(self.future_frames)
        return list(zip(f[:-1], f[1:]))


@dataclass
class Reject:
    """A clip rejected by the pipeline, with the stage and first failed criterion."""

    clip_id: str
    stage: str          # "homography" | "projection" | "filter"
    reason: str         # "confidence" | "feature_matching" | "completeness" | "boundary"
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "clip_id": self.clip_id,
            "stage": self.stage,
            "reason": self.reason,
            "detail": self.detail,
        }


# ---------------------------------------------------------------------------
# stage 1: centers


def extract_hand_centers(
    detections: dict[int, list[HandDetection]], min_confidence: float
) -> dict[int, dict[int, tuple[np.ndarray, float]]]:
    """Per frame and side, the center of the highest-confidence detection.

    A (frame, side) entry is absent when there is no detection at all or the
    best one falls below ``min_confidence``; absence is data, not an error.
    """
    out: dict[int, dict[int, tuple[np.ndarray, float]]] = {}
    for frame, dets in detections.items():
        per_side: dict[int, tuple[np.ndarray, float]] = {}
        for side in (LEFT, RIGHT):
            candidates = [d for d in dets if d.side == side]
            if not candidates:
                continue
            best = max(candidates, key=lambda d: d.confidence)
            if best.confidence < min_confidence:
                continue
            per_side[side] = (best.center, best.confidence)
        if per_side:
            out[frame] = per_side
    return out


# ---------------------------------------------------------------------------
# stage 2: projection


def project_future_hands(
    centers: dict[int, dict[int, tuple[np.ndarray, float]]],
    pair_homographies: dict[tuple[int, int], Homography],
    last_obs_index: int,
    future_frames: list[int],
    frame_size: tuple[int, int],
) -> HandTrajectory:
    """Map future hand centers into last-observation-frame coordinates.

    ``pair_homographies`` maps each consecutive sampled pair (earlier, later)
    to the homography taking earlier-frame pixels to later-frame pixels; the
    projection composes inverses back along the chain. Missing centers stay
    gaps; a missing homography on a needed path raises MissingHomography.
    """
    w, h = float(frame_size[0]), float(frame_size[1])
    n = len(future_frames)
    traj = HandTrajectory.empty(n)
    path = [last_obs_index] + list(future_frames)
    inverses: list[Homography] = []
    for t, frame in enumerate(future_frames):
        pair = (path[t], path[t + 1])
        if pair not in pair_homographies:
            raise MissingHomography(f"no homography for pair {pair}")
        inverses.append(pair_homographies[pair].inverse())
        per_side = centers.get(frame, {})
        if not per_side:
            continue
        to_last = chain_homographies(inverses)
        for side, (center, _conf) in per_side.items():
            px = project_point(to_last, (center[0] * w, center[1] * h))
            traj.xy[t, side, :] = (px[0] / w, px[1] / h)
            traj.valid[t, side] = True
    return traj


# ---------------------------------------------------------------------------
# stage 3: smoothing


def catmull_rom_tangents(t: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Finite-difference tangents: central at interior knots, one-sided at ends."""
    t = np.asarray(t, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    m = np.empty_like(v)
    m[0] = (v[1] - v[0]) / (t[1] - t[0])
    m[-1] = (v[-1] - v[-2]) / (t[-1] - t[-2])
    if len(t) > 2:
        m[1:-1] = (v[2:] - v[:-2]) / ((t[2:] - t[:-2]))
    return m


def hermite_interpolate(t_knots: np.ndarray, v_knots: np.ndarray, t_query: np.ndarray) -> np.ndarray:
    """Cubic Hermite spline through (t_knots, v_knots) with Catmull-Rom tangents.

    Queries must lie within [t_knots[0], t_knots[-1]]; this is interpolation
    only, never extrapolation.
    """
    t_knots = np.asarray(t_knots, dtype=np.float64)
    v_knots = np.asarray(v_knots, dtype=np.float64)
    t_query = np.atleast_1d(np.asarray(t_query, dtype=np.float64))
    if len(t_knots) < 2:
        raise ShapeMismatch("need >= 2 knots to interpolate")
    if np.any(t_query < t_knots[0]) or np.any(t_query > t_knots[-1]):
        raise ShapeMismatch("query outside the knot span (no extrapolation)")
    tangents = catmull_rom_tangents(t_knots, v_knots)
    seg = np.clip(np.searchsorted(t_knots, t_query, side="right") - 1, 0, len(t_knots) - 2)
    t0, t1 = t_knots[seg], t_knots[seg + 1]
    dt = t1 - t0
    s = (t_query - t0) / dt
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return (
        h00 * v_knots[seg]
        + h10 * dt * tangents[seg]
        + h01 * v_knots[seg + 1]
        + h11 * dt * tangents[seg + 1]
    )


def smooth_and_fill(raw: HandTrajectory) -> HandTrajectory:
    """Fill interior gaps per side with the Hermite spline; keep knots exact.

    Sides with fewer than 2 valid points come back fully invalid (nothing to
    interpolate); leading/trailing gaps are never extrapolated.
    """
    out = HandTrajectory.empty(raw.n_steps)
    steps = np.arange(raw.n_steps, dtype=np.float64)
    for side in (LEFT, RIGHT):
        knots = np.where(raw.valid[:, side])[0]
        if len(knots) < 2:
            continue
        out.xy[knots, side, :] = raw.xy[knots, side, :]
        out.valid[knots, side] = True
        gaps = np.array(
            [t for t in range(knots[0] + 1, knots[-1]) if not raw.valid[t, side]],
            dtype=int,
        )
        if len(gaps) == 0:
            continue
        for coord in (0, 1):
            out.xy[gaps, side, coord] = hermite_interpolate(
                steps[knots], raw.xy[knots, side, coord], steps[gaps]
            )
        out.valid[gaps, side] = True
    return out


# ---------------------------------------------------------------------------
# stage 4: filtering


def filter_trajectory(
    traj: HandTrajectory,
    clip: ClipRecord,
    criteria: FilterCriteria,
    provenance: dict[str, Any] | None = None,
) -> Reject | None:
    """Accept (None) or reject a trajectory; the reason names the first failed
    criterion in the order: confidence, feature_matching, completeness, boundary.

    ``provenance`` (used detection confidences, per-pair inlier counts) comes
    from the pipeline; without it, confidences are re-derived from the clip's
    detections underlying each valid step, and the inlier-count criterion is
    skipped for lack of data.
    """
    # (a) confidence of every used detection
    confidences: list[float] = []
    if provenance is not None and "used_confidences" in provenance:
        confidences = [float(c) for c in provenance["used_confidences"].values()]
    else:
        for t, frame in enumerate(clip.future_frames[: traj.n_steps]):
            for side in (LEFT, RIGHT):
                if not traj.valid[t, side]:
                    continue
                dets = [d for d in clip.detections.get(frame, []) if d.side == side]
                if dets:
                    confidences.append(max(d.confidence for d in dets))
    low = [c for c in confidences if c < criteria.min_confidence]
    if low:
        return Reject(
            clip.clip_id,
            "filter",
            "confidence",
            f"used detection confidence {min(low):.3f} < {criteria.min_confidence}",
        )

    # (b) inlier matches per homography pair
    if provenance is not None and "pair_inlier_counts" in provenance:
        for pair_key, count in sorted(provenance["pair_inlier_counts"].items()):
            if int(count) < criteria.min_matches_per_pair:
                return Reject(
                    clip.clip_id,
                    "filter",
                    "feature_matching",
                    f"pair {pair_key} has {int(count)} inliers "
                    f"< {criteria.min_matches_per_pair}",
                )

    # (c) completeness: at least one side must reach min_completeness
    fractions = traj.valid.mean(axis=0) if traj.n_steps else np.zeros(2)
    if all(f < criteria.min_completeness for f in fractions):
        return Reject(
            clip.clip_id,
            "filter",
            "completeness",
            f"valid fractions {fractions.tolist()} both < {criteria.min_completeness}",
        )

    # (d) every valid point inside the margin box
    lo, hi = criteria.boundary_margin, 1.0 - criteria.boundary_margin
    pts = traj.xy[traj.valid]
    if pts.size and (np.any(pts < lo) or np.any(pts > hi)):
        worst = pts[np.argmax(np.maximum(lo - pts, pts - hi).max(axis=1))]
        return Reject(
            clip.clip_id,
            "filter",
            "boundary",
            f"valid point {worst.tolist()} outside [{lo}, {hi}]^2",
        )
    return None


# ---------------------------------------------------------------------------
# composition


@dataclass
class PipelineConfig:
    """Everything build_gt_sample needs besides the clip itself."""

    criteria: FilterCriteria = field(default_factory=FilterCriteria)
    ransac_iters: int = 2000
    ransac_base_threshold: float = 3.0   # px at the 456x256 reference diagonal
    ransac_min_inliers: int = 4
    seed: int = 0

    def ransac_for(self, clip: ClipRecord, pair: tuple[int, int]) -> RansacConfig:
        return RansacConfig(
            max_iters=self.ransac_iters,
            inlier_threshold=default_inlier_threshold(
                clip.width, clip.height, base_px=self.ransac_base_threshold
            ),
            min_inliers=self.ransac_min_inliers,
            seed=derive_seed(self.seed, clip.clip_id, "ransac", pair[0], pair[1]),
        )


def estimate_pair_homography(
    clip: ClipRecord, pair: tuple[int, int], cfg: PipelineConfig
) -> RansacResult:
    """Mask-filter one pair's matches and run RANSAC."""
    fa, fb = pair
    if pair not in clip.matches:
        raise InsufficientInliers(f"no matches recorded for pair {pair}")
    matches = clip.matches[pair]
    mask_a = clip.masks.get(fa)
    mask_b = clip.masks.get(fb)
    if mask_a is not None and mask_b is not None:
        matches = filter_matches_by_mask(matches, mask_a, mask_b)
    return estimate_homography_ransac(matches, cfg.ransac_for(clip, pair))


def build_gt_sample(clip: ClipRecord, cfg: PipelineConfig) -> GTSample | Reject:
    """Run the full pipeline on one clip. Pure in (clip, cfg) including seeds."""
    criteria = cfg.criteria

    homographies: dict[tuple[int, int], Homography] = {}
    inlier_counts: dict[str, int] = {}
    for pair in clip.future_pairs():
        try:
            result = estimate_pair_homography(clip, pair, cfg)
        except InsufficientInliers as e:
            return Reject(clip.clip_id, "homography", "feature_matching", f"pair {pair}: {e}")
        homographies[pair] = result.homography
        inlier_counts[f"{pair[0]}-{pair[1]}"] = result.n_inliers

    future_dets = {f: clip.detections.get(f, []) for f in clip.future_frames}
    centers = extract_hand_centers(future_dets, criteria.min_confidence)
    used_confidences = {
        f"{frame}-{SIDES[side]}": float(conf)
        for frame, per_side in centers.items()
        for side, (_c, conf) in per_side.items()
    }

    try:
        raw = project_future_hands(
            centers, homographies, clip.last_obs, clip.future_frames,
            (clip.width, clip.height),
        )
    except DataError as e:
        return Reject(clip.clip_id, "projection", "feature_matching", str(e))

    smoothed = smooth_and_fill(raw)

    provenance = {
        "pair_inlier_counts": inlier_counts,
        "used_confidences": used_confidences,
        "chain_direction": "pair homography maps earlier sampled frame to later; "
                           "projection composes inverses back to the last observation frame",
        "homography_pairs": [list(p) for p in clip.future_pairs()],
        "criteria": criteria.to_dict(),
        "criteria_hash": stable_hash(criteria.to_dict()),
        "seed": cfg.seed,
    }
    rejected = filter_trajectory(smoothed, clip, criteria, provenance)
    if rejected is not None:
        return rejected

    return GTSample(
        clip_id=clip.clip_id,
        context_frames=list(clip.context_frames),
        future_frames=list(clip.future_frames),
        trajectory=smoothed,
        narration=clip.narration,
        clip_ref={
            "width": clip.width,
            "height": clip.height,
            **clip.frames_ref,
        },
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# dataset files


class ClipStore:
    """Reader/writer for a clip dataset directory.

    Members (all sorted by clip id): clips.jsonl, detections.jsonl,
    matches.jsonl, masks.jsonl, and frames.npy (uint8, one row of context
    frames per clip, indexed by the clip's ``frames_index``). See FORMATS.md.
    """

    CLIPS = "clips.jsonl"
    DETECTIONS = "detections.jsonl"
    MATCHES = "matches.jsonl"
    MASKS = "masks.jsonl"
    FRAMES = "frames.npy"

    def __init__(self, root: str | Path):
        self.root = Path(root)

    # -- reading

    def iter_clips(self) -> Iterator[ClipRecord]:
        """Assemble ClipRecords by merge-iterating the sorted member files."""
        det_groups = _group_by_clip(read_jsonl(self.root / self.DETECTIONS))
        match_groups = _group_by_clip(read_jsonl(self.root / self.MATCHES))
        mask_groups = _group_by_clip(read_jsonl(self.root / self.MASKS))
        for row in read_jsonl(self.root / self.CLIPS):
            cid = str(row["clip_id"])
            detections: dict[int, list[HandDetection]] = {}
            for d in det_groups.take(cid):
                det = HandDetection(
                    frame=int(d["frame"]),
                    side=SIDE_INDEX[d["side"]],
                    bbox=tuple(float(v) for v in d["bbox"]),
                    confidence=float(d["confidence"]),
                )
                detections.setdefault(det.frame, []).append(det)
            matches = {
                (int(m["frame_a"]), int(m["frame_b"])): MatchSet.from_rows(m["rows"])
                for m in match_groups.take(cid)
            }
            masks = {
                int(m["frame"]): decode_mask_rle(m["rle"]) for m in mask_groups.take(cid)
            }
            yield ClipRecord(
                clip_id=cid,
                width=int(row["width"]),
                height=int(row["height"]),
                context_frames=[int(f) for f in row["context_frames"]],
                future_frames=[int(f) for f in row["future_frames"]],
                detections=detections,
                matches=matches,
                masks=masks,
                narration=row.get("narration"),
                frames_ref={
                    "frames_file": row.get("frames_file", self.FRAMES),
                    "frames_index": row.get("frames_index"),
                },
            )

    def load_frames(self) -> np.ndarray:
        """The (n_clips, T, H, W, 3) uint8 context-frame array."""
        return np.load(self.root / self.FRAMES)

    # -- writing (used by the synthetic world generator)

    def write(
        self,
        clips: list[dict[str, Any]],
        detections: list[dict[str, Any]],
        matches: list[dict[str, Any]],
        masks: list[dict[str, Any]],
        frames: np.ndarray,
    ) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        key = lambda r: str(r["clip_id"])
        write_jsonl(self.root / self.CLIPS, sorted(clips, key=key))
        write_jsonl(
            self.root / self.DETECTIONS,
            sorted(detections, key=lambda r: (str(r["clip_id"]), int(r["frame"]), str(r["side"]))),
        )
        write_jsonl(
            self.root / self.MATCHES,
            sorted(matches, key=lambda r: (str(r["clip_id"]), int(r["frame_a"]))),
        )
        write_jsonl(
            self.root / self.MASKS,
            sorted(masks, key=lambda r: (str(r["clip_id"]), int(r["frame"]))),
        )
        np.save(self.root / self.FRAMES, np.ascontiguousarray(frames, dtype=np.uint8))


class _group_by_clip:
    """Single-pass grouped access to a clip-sorted row stream."""

    def __init__(self, rows: Iterable[dict[str, Any]]):
        self._it = iter(rows)
        self._pending: dict[str, Any] | None = None

    def take(self, clip_id: str) -> list[dict[str, Any]]:
        out: list[dict[str, Any]] = []
        while True:
            if self._pending is None:
                row = next(self._it, None)
                if row is None:
                    return out
                self._pending = row
            rid = str(self._pending["clip_id"])
            if rid < clip_id:   # rows for clips the caller skipped
                self._pending = None
                continue
            if rid != clip_id:
                return out
            out.append(self._pending)
            self._pending = None


def _build_one(args: tuple[ClipRecord, PipelineConfig]) -> dict[str, Any]:
    """Worker entry point: (assembled clip, cfg) -> result dict."""
    clip, cfg = args
    result = build_gt_sample(clip, cfg)
    if isinstance(result, Reject):
        return {"kind": "reject", "row": result.to_dict()}
    return {"kind": "sample", "row": result.to_dict()}


def build_gt_dataset(
    clips_dir: str | Path,
    out_dir: str | Path,
    cfg: PipelineConfig,
    workers: int = 1,
    config_hash: str | None = None,
) -> dict[str, int]:
    """Run the pipeline over a clip dataset directory.

    Writes gt.jsonl (accepted samples) and rejections.jsonl, both sorted by
    clip id, so output bytes are independent of worker count. A config hash,
    when given, is stamped into every accepted sample's provenance.
    """
    from .records import run_parallel

    store = ClipStore(clips_dir)
    clips = list(store.iter_clips())
    results = run_parallel(_build_one, [(c, cfg) for c in clips], workers)

    samples = [r["row"] for r in results if r["kind"] == "sample"]
    rejects = [r["row"] for r in results if r["kind"] == "reject"]
    if config_hash is not None:
        for row in samples:
            row.setdefault("provenance", {})["config_hash"] = config_hash
    samples.sort(key=lambda r: str(r["clip_id"]))
    rejects.sort(key=lambda r: str(r["clip_id"]))

    out_dir = Path(out_dir)
    write_jsonl(out_dir / "gt.jsonl", samples)
    write_jsonl(out_dir / "rejections.jsonl", rejects)
    return {"accepted": len(samples), "rejected": len(rejects)}


def load_gt_samples(path: str | Path) -> list[GTSample]:
    """Read a GT dataset file (gt.jsonl) into memory."""
    return [GTSample.from_dict(row) for row in read_jsonl(path)]
