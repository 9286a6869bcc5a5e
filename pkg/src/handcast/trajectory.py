"""Hand trajectory containers and their JSON codecs.

A trajectory holds ``n_steps`` future positions for two hands (left, right) in
normalized image coordinates of a single reference frame, plus a per-step,
per-side validity mask. Invalid entries carry no meaningful coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from .errors import ShapeMismatch

LEFT = 0
RIGHT = 1
SIDES = ("left", "right")


@dataclass
class HandTrajectory:
    """Future hand positions in normalized coordinates of one reference frame.

    Attributes:
        xy: float array of shape (n_steps, 2, 2); axis 1 is side (left, right),
            axis 2 is (x, y). Entries at invalid positions are zeroed.
        valid: bool array of shape (n_steps, 2).
    """

    xy: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.xy = np.asarray(self.xy, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.xy.ndim != 3 or self.xy.shape[1:] != (2, 2):
            raise ShapeMismatch(f"trajectory xy must be (n, 2, 2), got {self.xy.shape}")
        if self.valid.shape != self.xy.shape[:2]:
            raise ShapeMismatch(
                f"validity mask {self.valid.shape} does not match xy {self.xy.shape}"
            )
        if not np.all(np.isfinite(self.xy[self.valid])):
            raise ShapeMismatch("valid trajectory coordinates must be finite")
        # Zero out whatever hides behind invalid entries so equality and
        # serialization are well-defined.
        self.xy = np.where(self.valid[:, :, None], self.xy, 0.0)

    @property
    def n_steps(self) -> int:
        return int(self.xy.shape[0])

    @classmethod
    def empty(cls, n_steps: int) -> "HandTrajectory":
        """All-invalid trajectory of the given horizon."""
        return cls(np.zeros((n_steps, 2, 2)), np.zeros((n_steps, 2), dtype=bool))

    @classmethod
    def single_side(cls, points: np.ndarray, side: int, valid: np.ndarray | None = None) -> "HandTrajectory":
        """Trajectory with one active side; the other side is invalid."""
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        traj = cls.empty(n)
        v = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        traj.xy[:, side, :] = np.where(v[:, None], points, 0.0)
        traj.valid[:, side] = v
        return traj

    def step_vector(self, t: int) -> np.ndarray:
        """(x_l, y_l, x_r, y_r, v_l, v_r) float32 vector for hand-step encoding."""
        out = np.zeros(6, dtype=np.float32)
        if self.valid[t, LEFT]:
            out[0:2] = self.xy[t, LEFT]
            out[4] = 1.0
        if self.valid[t, RIGHT]:
            out[2:4] = self.xy[t, RIGHT]
            out[5] = 1.0
        return out

    def to_dict(self) -> dict[str, Any]:
        """JSON-friendly form: per side, a list of [x, y] or null per step."""
        out: dict[str, Any] = {"n_steps": self.n_steps}
        for s, name in enumerate(SIDES):
            out[name] = [
                [float(self.xy[t, s, 0]), float(self.xy[t, s, 1])] if self.valid[t, s] else None
                for t in range(self.n_steps)
            ]
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HandTrajectory":
        n = int(d["n_steps"])
        traj = cls.empty(n)
        for s, name in enumerate(SIDES):
            steps = d.get(name)
            if steps is None:
                continue
            if len(steps) != n:
                raise ShapeMismatch(f"{name} has {len(steps)} steps, expected {n}")
            for t, p in enumerate(steps):
                if p is not None:
                    traj.xy[t, s, :] = (float(p[0]), float(p[1]))
                    traj.valid[t, s] = True
        return traj

    def allclose(self, other: "HandTrajectory", atol: float = 1e-9) -> bool:
        return (
            self.n_steps == other.n_steps
            and bool(np.array_equal(self.valid, other.valid))
            and bool(np.allclose(self.xy, other.xy, atol=atol, rtol=0.0))
        )


@dataclass
class GTSample:
    """One ground-truth record: a clip's future hand trajectory plus context.

    ``clip_ref`` carries what downstream consumers need to load pixels
    (frames file, row index, frame size); ``provenance`` records how the
    trajectory was produced (inlier counts, detection confidences, chain
    direction, seeds).
    """

    clip_id: str
    context_frames: list[int]
    future_frames: list[int]
    trajectory: HandTrajectory
    narration: str | None = None
    clip_ref: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "clip_id": self.clip_id,
            "context_frames": list(map(int, self.context_frames)),
            "future_frames": list(map(int, self.future_frames)),
            "trajectory": self.trajectory.to_dict(),
            "narration": self.narration,
            "clip_ref": self.clip_ref,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GTSample":
        return cls(
            clip_id=str(d["clip_id"]),
            context_frames=[int(f) for f in d["context_frames"]],
            future_frames=[int(f) for f in d["future_frames"]],
            trajectory=HandTrajectory.from_dict(d["trajectory"]),
            narration=d.get("narration"),
            clip_ref=d.get("clip_ref", {}),
            provenance=d.get("provenance", {}),
        )


def iter_valid_pairs(traj: HandTrajectory) -> Iterator[tuple[int, int]]:
    """Yield (step, side) for every valid entry, in step-major order."""
    for t in range(traj.n_steps):
        for s in range(2):
            if traj.valid[t, s]:
                yield t, s
