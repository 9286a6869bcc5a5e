"""Deterministic training loop with versioned checkpoints.

All randomness flows from two derived seeds: a numpy generator that orders
batches and a torch generator that draws reparameterization noise. Both
states (plus the unconsumed slice of the batch buffer) live in the
checkpoint, so a run interrupted at step k and resumed reproduces the
uninterrupted run bit for bit. Metrics rows carry no wall-clock fields;
timing goes to stderr so repeated runs produce byte-identical artifacts.
"""

from __future__ import annotations

import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import ConfigError, EmptyBatch, NonFiniteLoss, ShapeMismatch
from .model import HandForecastModel, ModelConfig, loss_total
from .records import canonical_json, derive_seed
from .tokens import TokenSequence, Vocabulary

CHECKPOINT_BASENAME = "checkpoint.pt"
METRICS_BASENAME = "metrics.jsonl"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainSettings:
    steps: int = 500
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup_steps: int = 50
    min_lr_frac: float = 0.1
    grad_clip: float = 1.0
    log_every: int = 25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.warmup_steps < 0 or self.lr < 0:
            raise ConfigError("warmup_steps and lr must be non-negative")


@dataclass
class TrainData:
    """Sequences plus a shared frame bank; sequence i uses row frame_index[i]."""

    sequences: list[TokenSequence]
    frame_bank: torch.Tensor | None  # (n_clips, T, C, H, W) float32 in [0, 1]
    frame_index: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.sequences:
            raise EmptyBatch("training data has no sequences")
        if self.frame_bank is not None and len(self.frame_index) != len(self.sequences):
            raise ConfigError("frame_index must align with sequences")


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """Stored uint8 frames (..., T, H, W, C) -> model input (..., T, C, H, W)
    float32 in [0, 1]."""
    if frames.ndim not in (4, 5) or frames.shape[-1] not in (1, 3):
        raise ShapeMismatch(f"expected (..., T, H, W, C) uint8 frames, got {frames.shape}")
    t = torch.from_numpy(np.ascontiguousarray(frames)).to(torch.float32) / 255.0
    return t.movedim(-1, -3).contiguous()


def lr_scale(step: int, settings: TrainSettings) -> float:
    """Linear warmup to 1, then cosine decay to min_lr_frac at the last step."""
    if settings.warmup_steps > 0 and step < settings.warmup_steps:
        return (step + 1) / settings.warmup_steps
    span = max(settings.steps - settings.warmup_steps, 1)
    progress = min((step - settings.warmup_steps) / span, 1.0)
    lo = settings.min_lr_frac
    return lo + (1.0 - lo) * 0.5 * (1.0 + np.cos(np.pi * progress))


def build_optimizer(model: HandForecastModel, settings: TrainSettings) -> torch.optim.AdamW:
    """AdamW with weight decay on matrices only (not biases, norms, embeddings)."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if name.endswith("bias") or "embedding" in name or "norm" in name or p.ndim < 2:
            no_decay.append(p)
        else:
            decay.append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": settings.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=settings.lr,
    )


class _BatchOrder:
    """Infinite stream of fixed-size index batches from reshuffled epochs."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.buffer: list[int] = []

    def next_batch(self) -> list[int]:
        while len(self.buffer) < self.batch_size:
            self.buffer.extend(int(i) for i in self.rng.permutation(self.n))
        batch, self.buffer = self.buffer[: self.batch_size], self.buffer[self.batch_size :]
        return batch


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: Path,
    model: HandForecastModel,
    optimizer: torch.optim.AdamW,
    settings: TrainSettings,
    step: int,
    noise_rng: torch.Generator,
    order: _BatchOrder,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "vocab": model.vocab.to_dict(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "settings": asdict(settings),
        "step": step,
        "noise_rng_state": noise_rng.get_state(),
        "order_rng_state": order.rng.bit_generator.state,
        "order_buffer": list(order.buffer),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path) -> dict[str, Any]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"checkpoint format {version!r} unsupported (want {CHECKPOINT_FORMAT_VERSION})"
        )
    return payload


def model_from_checkpoint(payload: dict[str, Any]) -> HandForecastModel:
    cfg = ModelConfig.from_dict(payload["model_config"])
    vocab = Vocabulary.from_dict(payload["vocab"])
    model = HandForecastModel(cfg, vocab)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model


def build_model(cfg: ModelConfig, vocab: Vocabulary, seed: int = 0) -> HandForecastModel:
    """Construct a model with seeded initialization."""
    torch.manual_seed(derive_seed(seed, "model-init"))
    return HandForecastModel(cfg, vocab)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    metrics: list[dict[str, Any]]
    final_step: int
    checkpoint_path: Path | None


def train_loop(
    model: HandForecastModel,
    data: TrainData,
    settings: TrainSettings,
    out_dir: Path | None = None,
    resume: dict[str, Any] | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run (or continue) training toward settings.steps total optimizer steps.

    ``stop_after`` halts early (simulating an interruption) after that many
    completed steps; the LR schedule always spans the full settings.steps, so
    a run stopped at k and resumed from its checkpoint reproduces the
    uninterrupted run bit for bit. ``resume`` takes a loaded checkpoint
    payload and restores the optimizer, both RNG streams, and the unconsumed
    batch buffer.
    """
    model.train()
    optimizer = build_optimizer(model, settings)
    noise_rng = torch.Generator()
    noise_rng.manual_seed(derive_seed(settings.seed, "cvae-noise"))
    order = _BatchOrder(
        len(data.sequences),
        min(settings.batch_size, len(data.sequences)),
        np.random.default_rng(derive_seed(settings.seed, "batch-order")),
    )
    start_step = 0
    if resume is not None:
        optimizer.load_state_dict(resume["optimizer_state"])
        noise_rng.set_state(resume["noise_rng_state"])
        order.rng.bit_generator.state = resume["order_rng_state"]
        order.buffer = list(resume["order_buffer"])
        start_step = int(resume["step"])

    metrics: list[dict[str, Any]] = []
    t0 = time.monotonic()
    completed = start_step
    for step in range(start_step, settings.steps):
        batch = order.next_batch()
        seqs = [data.sequences[i] for i in batch]
        frames = None
        if data.frame_bank is not None:
            rows = torch.tensor([data.frame_index[i] for i in batch], dtype=torch.long)
            frames = data.frame_bank[rows]

        scale = lr_scale(step, settings)
        for group in optimizer.param_groups:
            group["lr"] = settings.lr * scale

        optimizer.zero_grad(set_to_none=True)
        parts = loss_total(model, seqs, frames, noise=noise_rng)
        if not torch.isfinite(parts.total):
            raise NonFiniteLoss(
                f"non-finite loss at step {step + 1}: {parts.scalars()}"
            )
        parts.total.backward()
        grad_norm = float(
            torch.nn.utils.clip_grad_norm_(model.parameters(), settings.grad_clip)
        )
        optimizer.step()

        completed = step + 1
        if completed % settings.log_every == 0 or completed == settings.steps:
            row = {"step": completed, "lr": settings.lr * scale, "grad_norm": grad_norm}
            row.update(parts.scalars())
            metrics.append(row)
        if stop_after is not None and completed >= stop_after:
            break

    elapsed = time.monotonic() - t0
    print(
        f"train: steps {start_step + 1}..{completed} in {elapsed:.1f}s",
        file=sys.stderr,
    )

    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out_dir / CHECKPOINT_BASENAME
        save_checkpoint(
            checkpoint_path, model, optimizer, settings, completed, noise_rng, order
        )
        metrics_path = out_dir / METRICS_BASENAME
        mode = "a" if resume is not None and metrics_path.exists() else "w"
        with open(metrics_path, mode, encoding="utf-8") as f:
            for row in metrics:
                f.write(canonical_json(row) + "\n")
    model.eval()
    return TrainResult(metrics=metrics, final_step=completed, checkpoint_path=checkpoint_path)
