"""Scripted egocentric world: a desk-scale stand-in for real kitchen video.

Each clip is a planar scene observed by a camera doing an integer-pixel
random walk (so inter-frame homographies are exact translations). A few
colored object glyphs sit on the plane; the right hand hovers during the
context window and then reaches its scripted target along an ease-in-out
curve with lateral bow, while the left hand hovers throughout. The reach
burst makes constant-velocity extrapolation a weak predictor, which is the
regime the learned model is supposed to win.

Everything downstream is derivable exactly: ground-truth trajectories in
last-observation-frame coordinates, hand detections (optionally noised),
point matches from known correspondences (plus hand-attached false matches
that only the hand masks can excuse), and rendered uint8 frames. The whole
generator is a pure function of (seed, spec).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError
from .gt_pipeline import ClipStore
from .geometry import encode_mask_rle
from .records import canonical_json, derive_seed, write_jsonl
from .tokens import affordance_table
from .trajectory import GTSample, HandTrajectory, LEFT, RIGHT, SIDES

GT_TRUE_BASENAME = "gt_true.jsonl"


@dataclass
class SynthSpec:
    frame_width: int = 32
    frame_height: int = 32
    context_frames: int = 10          # T
    horizon: int = 4                  # N
    world_width: int = 96
    world_height: int = 96
    camera_step: int = 1              # max integer pixels moved per frame
    camera_range: int = 4             # clamp on total offset from center
    n_distractors: int = 2
    glyph_size: int = 5
    hand_size: int = 4
    scene_match_points: int = 24
    hand_match_points: int = 3
    outlier_matches: int = 0
    detection_noise: float = 0.0      # std in pixels added to detected centers
    confidence_range: tuple[float, float] = (0.75, 0.98)
    hover_radius: float = 1.2         # px wiggle while hovering
    reach_curvature: float = 3.0      # max lateral bow of the reach, px
    margin: int = 3                   # keep hands this far inside every crop

    def __post_init__(self) -> None:
        if self.frame_width + 2 * self.camera_range > self.world_width:
            raise ConfigError("world too narrow for the camera range")
        if self.frame_height + 2 * self.camera_range > self.world_height:
            raise ConfigError("world too short for the camera range")
        if self.camera_step < 0 or self.camera_range < 0:
            raise ConfigError("camera motion bounds must be non-negative")
        if self.context_frames < 2 or self.horizon < 1:
            raise ConfigError("need >= 2 context frames and >= 1 future frame")
        if self.n_distractors + 1 > len(affordance_table()):
            raise ConfigError("more objects requested than the affordance table holds")

    def to_dict(self) -> dict[str, Any]:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["confidence_range"] = list(self.confidence_range)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthSpec":
        d = dict(d)
        if "confidence_range" in d:
            d["confidence_range"] = tuple(d["confidence_range"])
        return cls(**d)

    @property
    def n_frames(self) -> int:
        return self.context_frames + self.horizon

    @property
    def base_origin(self) -> tuple[int, int]:
        return (
            (self.world_width - self.frame_width) // 2,
            (self.world_height - self.frame_height) // 2,
        )


@dataclass
class ScriptedClip:
    """Fully expanded world state for one clip, before serialization."""

    clip_id: str
    spec: SynthSpec
    target: str
    narration: str
    hint: str
    origins: list[tuple[int, int]]                  # camera crop origin per frame
    objects: dict[str, tuple[float, float]]         # world coords
    hands: np.ndarray                               # (n_frames, 2, 2) world coords
    gt: GTSample


def ease_in_out(u: np.ndarray) -> np.ndarray:
    """Smoothstep: zero velocity at both ends, burst in the middle."""
    return 3.0 * u**2 - 2.0 * u**3


def _camera_walk(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    bx, by = spec.base_origin
    ox, oy = 0, 0
    origins = []
    for t in range(spec.n_frames):
        if t > 0 and spec.camera_step > 0:
            ox = int(np.clip(ox + rng.integers(-spec.camera_step, spec.camera_step + 1),
                             -spec.camera_range, spec.camera_range))
            oy = int(np.clip(oy + rng.integers(-spec.camera_step, spec.camera_step + 1),
                             -spec.camera_range, spec.camera_range))
        origins.append((bx + ox, by + oy))
    return origins


def _stable_region(spec: SynthSpec) -> tuple[float, float, float, float]:
    """World rectangle visible (with margin) from every possible crop."""
    bx, by = spec.base_origin
    m = spec.margin
    x0 = bx + spec.camera_range + m
    y0 = by + spec.camera_range + m
    x1 = bx + spec.frame_width - spec.camera_range - m
    y1 = by + spec.frame_height - spec.camera_range - m
    return (x0, y0, x1, y1)


def _place_objects(
    spec: SynthSpec, rng: np.random.Generator
) -> dict[str, tuple[float, float]]:
    table = affordance_table()
    names = sorted(table)
    picks = [names[int(i)] for i in rng.choice(len(names), spec.n_distractors + 1, replace=False)]
    x0, y0, x1, y1 = _stable_region(spec)
    placed: dict[str, tuple[float, float]] = {}
    min_gap = spec.glyph_size + 2.0
    for name in picks:
        for _ in range(200):
            p = (float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))
            if all(np.hypot(p[0] - q[0], p[1] - q[1]) >= min_gap for q in placed.values()):
                placed[name] = p
                break
        else:
            raise ConfigError("could not place objects without overlap; shrink glyphs")
    return placed


def _script_hands(
    spec: SynthSpec,
    rng: np.random.Generator,
    target_pos: tuple[float, float],
) -> np.ndarray:
    """World-coordinate hand centers, (n_frames, side, xy).

    Right hand hovers at an anchor through the context window, then reaches
    the target with an ease-in-out profile plus a lateral sine bow. Left hand
    hovers near the lower-left of the stable region the whole time.
    """
    t_ctx, n = spec.context_frames, spec.horizon
    x0, y0, x1, y1 = _stable_region(spec)
    hands = np.zeros((spec.n_frames, 2, 2))

    left_anchor = np.array(
        [rng.uniform(x0, x0 + 0.25 * (x1 - x0)), rng.uniform(y1 - 0.25 * (y1 - y0), y1)]
    )
    right_anchor = np.array(
        [rng.uniform(x0 + 0.5 * (x1 - x0), x1), rng.uniform(y0, y1)]
    )
    target = np.asarray(target_pos)

    wiggle = rng.uniform(-spec.hover_radius, spec.hover_radius, size=(spec.n_frames, 2, 2))
    for t in range(spec.n_frames):
        hands[t, LEFT] = left_anchor + wiggle[t, LEFT]
    for t in range(t_ctx):
        hands[t, RIGHT] = right_anchor + wiggle[t, RIGHT]

    start = hands[t_ctx - 1, RIGHT].copy()
    span = target - start
    dist = float(np.hypot(*span))
    perp = np.array([-span[1], span[0]]) / dist if dist > 1e-9 else np.zeros(2)
    bow = float(rng.uniform(-spec.reach_curvature, spec.reach_curvature))
    for j in range(n):
        u = (j + 1) / n
        pos = start + ease_in_out(np.array(u)) * span + np.sin(np.pi * u) * bow * perp
        hands[t_ctx + j, RIGHT] = pos

    hands[..., 0] = np.clip(hands[..., 0], x0, x1)
    hands[..., 1] = np.clip(hands[..., 1], y0, y1)
    return hands


def script_clip(spec: SynthSpec, seed: int, index: int) -> ScriptedClip:
    """Expand one clip's world state deterministically from (seed, index)."""
    rng = np.random.default_rng(derive_seed(seed, "clip", str(index)))
    clip_id = f"clip{index:05d}"
    origins = _camera_walk(spec, rng)
    objects = _place_objects(spec, rng)
    target = sorted(objects)[int(rng.integers(len(objects)))]
    entry = affordance_table()[target]
    narration = f"{entry['verb']} the {target}"
    hands = _script_hands(spec, rng, objects[target])

    last = spec.context_frames - 1
    ox, oy = origins[last]
    w, h = float(spec.frame_width), float(spec.frame_height)
    traj = HandTrajectory.empty(spec.horizon)
    for j in range(spec.horizon):
        t = spec.context_frames + j
        for side in range(2):
            traj.xy[j, side, 0] = (hands[t, side, 0] - ox) / w
            traj.xy[j, side, 1] = (hands[t, side, 1] - oy) / h
            traj.valid[j, side] = True

    gt = GTSample(
        clip_id=clip_id,
        context_frames=list(range(spec.context_frames)),
        future_frames=list(range(spec.context_frames, spec.n_frames)),
        trajectory=traj,
        narration=narration,
        clip_ref={"frames_file": ClipStore.FRAMES, "frames_index": index,
                  "width": spec.frame_width, "height": spec.frame_height},
        provenance={"kind": "scripted", "target": target, "verb": entry["verb"]},
    )
    return ScriptedClip(
        clip_id=clip_id,
        spec=spec,
        target=target,
        narration=narration,
        hint=entry["hint"],
        origins=origins,
        objects=objects,
        hands=hands,
        gt=gt,
    )


# ---------------------------------------------------------------------------
# rendering


def _paint_square(img: np.ndarray, cx: float, cy: float, half: int, color) -> None:
    h, w = img.shape[:2]
    x, y = int(round(cx)), int(round(cy))
    x0, x1 = max(x - half, 0), min(x + half + 1, w)
    y0, y1 = max(y - half, 0), min(y + half + 1, h)
    if x0 < x1 and y0 < y1:
        img[y0:y1, x0:x1] = color


HAND_COLORS = {LEFT: (198, 158, 128), RIGHT: (232, 188, 152)}


def render_frame(clip: ScriptedClip, t: int) -> np.ndarray:
    """One (H, W, 3) uint8 frame: textured plane, glyphs, both hands."""
    spec = clip.spec
    ox, oy = clip.origins[t]
    ys = np.arange(oy, oy + spec.frame_height)[:, None]
    xs = np.arange(ox, ox + spec.frame_width)[None, :]
    texture = ((xs * 13 + ys * 7) % 31).astype(np.uint8)  # static world texture
    img = np.zeros((spec.frame_height, spec.frame_width, 3), dtype=np.uint8)
    img[...] = (40 + texture)[..., None]

    table = affordance_table()
    for name in sorted(clip.objects):
        wx, wy = clip.objects[name]
        _paint_square(img, wx - ox, wy - oy, spec.glyph_size // 2, table[name]["color"])
    for side in (LEFT, RIGHT):
        wx, wy = clip.hands[t, side]
        _paint_square(img, wx - ox, wy - oy, spec.hand_size // 2, HAND_COLORS[side])
    return img


def render_context_frames(clip: ScriptedClip) -> np.ndarray:
    return np.stack([render_frame(clip, t) for t in range(clip.spec.context_frames)])


# ---------------------------------------------------------------------------
# derived annotations


def _hand_bbox_norm(spec: SynthSpec, fx: float, fy: float) -> list[float]:
    half = spec.hand_size / 2.0
    w, h = float(spec.frame_width), float(spec.frame_height)
    return [
        max((fx - half) / w, 0.0),
        max((fy - half) / h, 0.0),
        min((fx + half) / w, 1.0),
        min((fy + half) / h, 1.0),
    ]


def detection_rows(clip: ScriptedClip, rng: np.random.Generator) -> list[dict[str, Any]]:
    """Exact (optionally noised) hand detections for every sampled frame."""
    spec = clip.spec
    rows = []
    for t in range(spec.n_frames):
        ox, oy = clip.origins[t]
        for side in (LEFT, RIGHT):
            fx = clip.hands[t, side, 0] - ox
            fy = clip.hands[t, side, 1] - oy
            if spec.detection_noise > 0:
                fx += rng.normal(0.0, spec.detection_noise)
                fy += rng.normal(0.0, spec.detection_noise)
            rows.append(
                {
                    "clip_id": clip.clip_id,
                    "frame": t,
                    "side": SIDES[side],
                    "bbox": _hand_bbox_norm(spec, fx, fy),
                    "confidence": float(rng.uniform(*spec.confidence_range)),
                }
            )
    return rows


def match_rows(clip: ScriptedClip, rng: np.random.Generator) -> list[dict[str, Any]]:
    """Point matches for each consecutive frame pair.

    Scene points follow the true camera translation exactly. Hand-attached
    points ride the moving right hand instead (false matches a mask must
    remove), and optional outliers are uniform junk.
    """
    spec = clip.spec
    rows = []
    for a in range(spec.n_frames - 1):
        b = a + 1
        (oax, oay), (obx, oby) = clip.origins[a], clip.origins[b]
        dx, dy = oax - obx, oay - oby
        pts = []
        # visible-in-both region, in frame-a coordinates
        x0 = max(0, -dx) + 1.0
        x1 = min(spec.frame_width, spec.frame_width - dx) - 1.0
        y0 = max(0, -dy) + 1.0
        y1 = min(spec.frame_height, spec.frame_height - dy) - 1.0
        for _ in range(spec.scene_match_points):
            px = float(rng.uniform(x0, x1))
            py = float(rng.uniform(y0, y1))
            pts.append([px, py, px + dx, py + dy, float(rng.uniform(0.8, 1.0))])
        for k in range(spec.hand_match_points):
            off = rng.uniform(-spec.hand_size / 2, spec.hand_size / 2, size=2)
            ax = clip.hands[a, RIGHT, 0] - oax + off[0]
            ay = clip.hands[a, RIGHT, 1] - oay + off[1]
            bx = clip.hands[b, RIGHT, 0] - obx + off[0]
            by = clip.hands[b, RIGHT, 1] - oby + off[1]
            pts.append([float(ax), float(ay), float(bx), float(by), float(rng.uniform(0.8, 1.0))])
        for _ in range(spec.outlier_matches):
            pts.append(
                [
                    float(rng.uniform(0, spec.frame_width)),
                    float(rng.uniform(0, spec.frame_height)),
                    float(rng.uniform(0, spec.frame_width)),
                    float(rng.uniform(0, spec.frame_height)),
                    float(rng.uniform(0.8, 1.0)),
                ]
            )
        rows.append({"clip_id": clip.clip_id, "frame_a": a, "frame_b": b, "rows": pts})
    return rows


def mask_rows(clip: ScriptedClip) -> list[dict[str, Any]]:
    """Boolean hand masks (both hands' glyph boxes) for every sampled frame."""
    spec = clip.spec
    rows = []
    pad = spec.hand_size / 2.0 + 1.0
    for t in range(spec.n_frames):
        ox, oy = clip.origins[t]
        mask = np.zeros((spec.frame_height, spec.frame_width), dtype=bool)
        for side in (LEFT, RIGHT):
            fx = clip.hands[t, side, 0] - ox
            fy = clip.hands[t, side, 1] - oy
            xa = max(int(np.floor(fx - pad)), 0)
            xb = min(int(np.ceil(fx + pad)) + 1, spec.frame_width)
            ya = max(int(np.floor(fy - pad)), 0)
            yb = min(int(np.ceil(fy + pad)) + 1, spec.frame_height)
            mask[ya:yb, xa:xb] = True
        rows.append({"clip_id": clip.clip_id, "frame": t, "rle": encode_mask_rle(mask)})
    return rows


def clip_row(clip: ScriptedClip, index: int) -> dict[str, Any]:
    spec = clip.spec
    return {
        "clip_id": clip.clip_id,
        "width": spec.frame_width,
        "height": spec.frame_height,
        "context_frames": list(range(spec.context_frames)),
        "future_frames": list(range(spec.context_frames, spec.n_frames)),
        "narration": clip.narration,
        "frames_file": ClipStore.FRAMES,
        "frames_index": index,
        "target": clip.target,
        "hint": clip.hint,
    }


def context_track(clip: ScriptedClip) -> HandTrajectory:
    """Context-window hand positions in last-observation-frame coordinates
    (what a causal observer could reconstruct; used by the baselines)."""
    spec = clip.spec
    last = spec.context_frames - 1
    ox, oy = clip.origins[last]
    w, h = float(spec.frame_width), float(spec.frame_height)
    track = HandTrajectory.empty(spec.context_frames)
    for t in range(spec.context_frames):
        for side in range(2):
            track.xy[t, side, 0] = (clip.hands[t, side, 0] - ox) / w
            track.xy[t, side, 1] = (clip.hands[t, side, 1] - oy) / h
            track.valid[t, side] = True
    return track


# ---------------------------------------------------------------------------
# dataset emission


def generate_world(spec: SynthSpec, seed: int, n_clips: int, out_dir: str | Path) -> dict[str, int]:
    """Write a full synthetic clip dataset plus exact ground truth.

    Produces the ClipStore members (clips/detections/matches/masks/frames)
    and gt_true.jsonl with the scripted trajectories. Pure in (spec, seed,
    n_clips): rerunning overwrites byte-identical files.
    """
    out_dir = Path(out_dir)
    clips, dets, matches, masks, frames, gt_rows = [], [], [], [], [], []
    for i in range(n_clips):
        clip = script_clip(spec, seed, i)
        ann_rng = np.random.default_rng(derive_seed(seed, "annotate", str(i)))
        clips.append(clip_row(clip, i))
        dets.extend(detection_rows(clip, ann_rng))
        matches.extend(match_rows(clip, ann_rng))
        masks.extend(mask_rows(clip))
        frames.append(render_context_frames(clip))
        gt_rows.append(clip.gt.to_dict())

    store = ClipStore(out_dir)
    store.write(clips, dets, matches, masks, np.stack(frames))
    write_jsonl(out_dir / GT_TRUE_BASENAME, sorted(gt_rows, key=lambda r: r["clip_id"]))
    return {"clips": n_clips, "frames_per_clip": spec.context_frames}


def spec_snapshot(spec: SynthSpec, seed: int, n_clips: int) -> str:
    return canonical_json({"spec": spec.to_dict(), "seed": seed, "n_clips": n_clips})
