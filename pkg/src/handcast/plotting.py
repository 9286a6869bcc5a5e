"""Trajectory overlay figures: the last observed frame with forecast trails
drawn on top, left hand in blue and right hand in red."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .trajectory import HandTrajectory

SIDE_COLORS = ("#1f77b4", "#d62728")   # left blue, right red
SIDE_NAMES = ("left", "right")
_PNG_METADATA = {"Software": "handcast"}  # pin the tEXt chunk for byte-stable reruns


def _draw_trail(
    ax: plt.Axes,
    traj: HandTrajectory,
    width: int,
    height: int,
    linestyle: str,
    marker: str,
    label_suffix: str,
) -> None:
    for side in (0, 1):
        steps = np.flatnonzero(traj.valid[:, side])
        if steps.size == 0:
            continue
        x = traj.xy[steps, side, 0] * width
        y = traj.xy[steps, side, 1] * height
        ax.plot(
            x,
            y,
            linestyle=linestyle,
            marker=marker,
            color=SIDE_COLORS[side],
            linewidth=1.5,
            markersize=5,
            alpha=0.9,
            label=f"{SIDE_NAMES[side]} {label_suffix}",
        )
        # arrowless direction cue: a larger marker on the final step
        ax.plot(x[-1], y[-1], marker=marker, color=SIDE_COLORS[side], markersize=9)


def plot_forecast(
    frame: np.ndarray,
    gt: HandTrajectory | None,
    pred: HandTrajectory | None,
    out_path: str | Path,
    title: str | None = None,
) -> Path:
    """Render one overlay figure to ``out_path`` (PNG) and return the path.

    ``frame`` is the last observed image as (H, W, 3) uint8; trajectories are
    in normalized coordinates of that frame. Ground truth is drawn dashed with
    circles, the prediction solid with crosses. Output bytes depend only on
    the inputs.
    """
    height, width = frame.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4), dpi=120)
    try:
        ax.imshow(frame, interpolation="nearest")
        if gt is not None:
            _draw_trail(ax, gt, width, height, "--", "o", "gt")
        if pred is not None:
            _draw_trail(ax, pred, width, height, "-", "x", "pred")
        ax.set_xlim(-0.5, width - 0.5)
        ax.set_ylim(height - 0.5, -0.5)
        ax.set_xticks(())
        ax.set_yticks(())
        if title:
            ax.set_title(title, fontsize=8)
        if gt is not None or pred is not None:
            ax.legend(fontsize=6, loc="upper right")
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path, metadata=_PNG_METADATA)
    finally:
        plt.close(fig)
    return out_path
