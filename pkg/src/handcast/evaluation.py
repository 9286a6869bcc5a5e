"""Trajectory metrics (ADE / FDE / WDE), reference baselines, self-consistency
aggregation, and the benchmark report.

All coordinates are normalized to [0, 1] x [0, 1] in the last-observation
frame, so the unit-square diagonal sqrt(2) is the maximum possible error and
doubles as the penalty for slots the predictor failed to produce. Metrics
average over ground-truth-valid (step, side) slots only: a model is never
rewarded for predicting where ground truth has no answer, and never escapes
penalty by abstaining where it does.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import (
    DataError,
    EmptyGenerationSet,
    HorizonMismatch,
    NoValidFinalStep,
    ShapeMismatch,
)
from .trajectory import HandTrajectory, SIDES

MISS_PENALTY = math.sqrt(2.0)


def _check_horizons(pred: HandTrajectory, gt: HandTrajectory) -> None:
    if pred.n_steps != gt.n_steps:
        raise HorizonMismatch(f"pred has {pred.n_steps} steps, gt has {gt.n_steps}")


def _slot_errors(pred: HandTrajectory, gt: HandTrajectory) -> np.ndarray:
    """(n, 2) distances at gt-valid slots; miss penalty where pred is invalid;
    NaN where gt itself is invalid (those slots never count)."""
    err = np.full((gt.n_steps, 2), np.nan)
    dist = np.linalg.norm(pred.xy - gt.xy, axis=2)
    both = gt.valid & pred.valid
    err[both] = dist[both]
    err[gt.valid & ~pred.valid] = MISS_PENALTY
    return err


def ade(pred: HandTrajectory, gt: HandTrajectory) -> float:
    """Average displacement error: mean distance over gt-valid (step, side)
    slots; slots the prediction misses cost sqrt(2)."""
    _check_horizons(pred, gt)
    if not gt.valid.any():
        raise DataError("ground truth has no valid slots")
    err = _slot_errors(pred, gt)
    return float(np.nanmean(err))


def fde(pred: HandTrajectory, gt: HandTrajectory) -> float:
    """Final displacement error: mean over gt-valid sides of the last step."""
    _check_horizons(pred, gt)
    last = gt.n_steps - 1
    if not gt.valid[last].any():
        raise NoValidFinalStep("ground truth final step has no valid side")
    err = _slot_errors(pred, gt)[last]
    return float(np.nanmean(err))


@dataclass
class WdeWeights:
    """Per-step weights for WDE, normalized to sum to 1; the default ramps
    linearly with lead time (w_t proportional to t+1)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeMismatch("weights must be one-dimensional")
        if (self.values < 0).any():
            raise DataError("weights must be non-negative")
        total = self.values.sum()
        if total <= 0:
            raise DataError("weights must have positive sum")
        if total != 1.0:
            self.values = self.values / total

    @classmethod
    def linear(cls, n_steps: int) -> "WdeWeights":
        t = np.arange(1, n_steps + 1, dtype=np.float64)
        return cls(t / t.sum())

    @classmethod
    def uniform(cls, n_steps: int) -> "WdeWeights":
        return cls(np.full(n_steps, 1.0 / n_steps))

    @classmethod
    def final_only(cls, n_steps: int) -> "WdeWeights":
        values = np.zeros(n_steps)
        values[-1] = 1.0
        return cls(values)


def wde(pred: HandTrajectory, gt: HandTrajectory, weights: WdeWeights | None = None) -> float:
    """Weighted displacement error: sum_t w_t * (mean side error at t).

    Steps where ground truth has no valid side contribute zero (their weight
    is spent, not redistributed), so comparisons across predictors stay on an
    identical scale.
    """
    _check_horizons(pred, gt)
    weights = weights or WdeWeights.linear(gt.n_steps)
    if len(weights.values) != gt.n_steps:
        raise ShapeMismatch(
            f"{len(weights.values)} weights for {gt.n_steps} steps"
        )
    err = _slot_errors(pred, gt)
    total = 0.0
    for t in range(gt.n_steps):
        if gt.valid[t].any():
            total += weights.values[t] * float(np.nanmean(err[t]))
    return float(total)


# ---------------------------------------------------------------------------
# baselines


def constant_position_baseline(context: HandTrajectory, horizon: int) -> HandTrajectory:
    """Repeat each side's last observed position; unseen sides stay invalid."""
    out = HandTrajectory.empty(horizon)
    for side in range(2):
        seen = np.flatnonzero(context.valid[:, side])
        if len(seen) == 0:
            continue
        out.xy[:, side, :] = context.xy[seen[-1], side]
        out.valid[:, side] = True
    return out


def constant_velocity_baseline(context: HandTrajectory, horizon: int) -> HandTrajectory:
    """Extrapolate the last observed displacement per side, clamped to [0, 1];
    one observation degrades to constant position, zero stays invalid."""
    out = HandTrajectory.empty(horizon)
    for side in range(2):
        seen = np.flatnonzero(context.valid[:, side])
        if len(seen) == 0:
            continue
        last = context.xy[seen[-1], side]
        if len(seen) == 1:
            vel = np.zeros(2)
        else:
            a, b = seen[-2], seen[-1]
            vel = (context.xy[b, side] - context.xy[a, side]) / (b - a)
        for t in range(horizon):
            out.xy[t, side] = np.clip(last + vel * (t + 1), 0.0, 1.0)
        out.valid[:, side] = True
    return out


@dataclass
class KalmanConfig:
    process_noise: float = 1e-3
    observation_noise: float = 1e-2
    initial_variance: float = 1e12


def kalman_baseline(
    context: HandTrajectory, horizon: int, cfg: KalmanConfig | None = None
) -> HandTrajectory:
    """Constant-velocity Kalman filter per side, then pure prediction.

    State [x, y, vx, vy] with unit timestep; sides with fewer than two
    observations stay invalid (velocity unobservable). Predictions clamp to
    the unit square.
    """
    cfg = cfg or KalmanConfig()
    out = HandTrajectory.empty(horizon)
    f = np.eye(4)
    f[0, 2] = f[1, 3] = 1.0
    q = cfg.process_noise * np.eye(4)
    r = cfg.observation_noise * np.eye(2)
    h = np.zeros((2, 4))
    h[0, 0] = h[1, 1] = 1.0

    for side in range(2):
        seen = np.flatnonzero(context.valid[:, side])
        if len(seen) < 2:
            continue
        first = seen[0]
        x = np.zeros(4)
        x[:2] = context.xy[first, side]
        p = cfg.initial_variance * np.eye(4)
        p[0, 0] = p[1, 1] = cfg.observation_noise  # position pinned by first obs
        for t in range(first + 1, context.n_steps):
            x = f @ x
            p = f @ p @ f.T + q
            if context.valid[t, side]:
                z = context.xy[t, side]
                innov = z - h @ x
                s = h @ p @ h.T + r
                k = p @ h.T @ np.linalg.inv(s)
                x = x + k @ innov
                p = (np.eye(4) - k @ h) @ p
        for t in range(horizon):
            x = f @ x
            p = f @ p @ f.T + q
            out.xy[t, side] = np.clip(x[:2], 0.0, 1.0)
            out.valid[t, side] = True
    return out


BASELINES: dict[str, Callable[[HandTrajectory, int], HandTrajectory]] = {
    "constant-position": constant_position_baseline,
    "constant-velocity": constant_velocity_baseline,
    "kalman": kalman_baseline,
}


# ---------------------------------------------------------------------------
# self-consistency


def align_horizons(generations: Sequence[HandTrajectory]) -> list[HandTrajectory]:
    """Coerce sampled generations to a shared horizon before aggregation.

    Free-running decoders can emit different step counts per sample; the
    consensus horizon is the most common one (ties favor the longer), with
    longer generations truncated and shorter ones padded invalid.
    """
    if len(generations) == 0:
        raise EmptyGenerationSet("no generations to align")
    counts = Counter(g.n_steps for g in generations)
    best = max(counts.items(), key=lambda kv: (kv[1], kv[0]))[0]
    return [_coerce_horizon(g, best) for g in generations]


def self_consistency(generations: Sequence[HandTrajectory]) -> HandTrajectory:
    """Aggregate K sampled trajectories into one.

    Per (step, side): validity by majority vote (ties count as valid), and
    the coordinate is the mean over the generations that marked the slot
    valid. All generations must share a horizon.
    """
    if len(generations) == 0:
        raise EmptyGenerationSet("no generations to aggregate")
    n = generations[0].n_steps
    for g in generations[1:]:
        if g.n_steps != n:
            raise HorizonMismatch("generations disagree on horizon")
    out = HandTrajectory.empty(n)
    k = len(generations)
    for t in range(n):
        for side in range(2):
            votes = [g.valid[t, side] for g in generations]
            n_valid = sum(votes)
            if 2 * n_valid < k:
                continue
            if n_valid == 0:  # k == 0 handled above; all-invalid tie impossible
                continue
            pts = np.stack([g.xy[t, side] for g in generations if g.valid[t, side]])
            out.xy[t, side] = pts.mean(axis=0)
            out.valid[t, side] = True
    return out


# ---------------------------------------------------------------------------
# benchmark report


@dataclass
class SampleScore:
    clip_id: str
    ade: float
    fde: float
    wde: float
    missing: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "clip_id": self.clip_id,
            "ade": self.ade,
            "fde": self.fde,
            "wde": self.wde,
            "missing": self.missing,
        }


@dataclass
class EvalReport:
    name: str
    n_samples: int
    n_missing: int
    ade: float
    fde: float
    wde: float
    wde_weights: list[float] = field(default_factory=list)
    seed: int | None = None
    config_hash: str | None = None
    per_sample: list[SampleScore] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "n_samples": self.n_samples,
            "n_missing": self.n_missing,
            "ade": self.ade,
            "fde": self.fde,
            "wde": self.wde,
            "wde_weights": list(self.wde_weights),
            "seed": self.seed,
            "config_hash": self.config_hash,
            "per_sample": [s.to_dict() for s in self.per_sample],
        }

    def to_text(self) -> str:
        lines = [
            f"evaluation: {self.name}",
            f"  samples   {self.n_samples} ({self.n_missing} missing predictions)",
            f"  ADE       {self.ade:.4f}",
            f"  FDE       {self.fde:.4f}",
            f"  WDE       {self.wde:.4f}  (weights {', '.join(f'{w:.3f}' for w in self.wde_weights)})",
        ]
        return "\n".join(lines)


def _coerce_horizon(pred: HandTrajectory, n: int) -> HandTrajectory:
    """Truncate a long prediction; pad a short one with invalid steps (each
    padded slot then earns the miss penalty against valid ground truth)."""
    if pred.n_steps == n:
        return pred
    out = HandTrajectory.empty(n)
    m = min(pred.n_steps, n)
    out.xy[:m] = pred.xy[:m]
    out.valid[:m] = pred.valid[:m]
    return out


def evaluate(
    gts: Sequence[tuple[str, HandTrajectory]],
    predictions: dict[str, HandTrajectory],
    name: str = "model",
    weights: WdeWeights | None = None,
    seed: int | None = None,
    config_hash: str | None = None,
) -> EvalReport:
    """Score predictions keyed by clip_id against ground truth.

    A missing or horizon-mismatched prediction is never skipped: missing ones
    score the sqrt(2) penalty at every gt-valid slot, long ones truncate, and
    short ones penalize the uncovered steps. Scores sort by clip_id before
    aggregation, so input order never changes a single output bit.
    """
    if len(gts) == 0:
        raise DataError("nothing to evaluate")
    scores: list[SampleScore] = []
    for clip_id, gt in gts:
        pred = predictions.get(clip_id)
        missing = pred is None
        pred = _coerce_horizon(pred if pred is not None else HandTrajectory.empty(gt.n_steps), gt.n_steps)
        w = weights or WdeWeights.linear(gt.n_steps)
        scores.append(
            SampleScore(
                clip_id=clip_id,
                ade=ade(pred, gt),
                fde=fde(pred, gt),
                wde=wde(pred, gt, w),
                missing=missing,
            )
        )
    scores.sort(key=lambda s: s.clip_id)
    report_weights = weights.values if weights is not None else WdeWeights.linear(gts[0][1].n_steps).values
    return EvalReport(
        name=name,
        n_samples=len(scores),
        n_missing=sum(s.missing for s in scores),
        ade=float(np.mean([s.ade for s in scores])),
        fde=float(np.mean([s.fde for s in scores])),
        wde=float(np.mean([s.wde for s in scores])),
        wde_weights=[float(x) for x in report_weights],
        seed=seed,
        config_hash=config_hash,
        per_sample=scores,
    )
