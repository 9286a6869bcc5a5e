"""The sequence model: patch encoder, slow-fast pooling, projector, causal
transformer, CVAE trajectory decoder, loss, and iterative-decoding generation.

Visual path: T low-res frames -> per-patch affine embedding (T x M x d) ->
slow-fast pooling (T + s*(g/k)^2 tokens) -> tokenwise projector. Language
path: word embeddings with <HAND> positions overridden by the hand-step
embedder. The mixed sequence runs through a pre-norm causal transformer whose
block-stack output H is returned *without* a final norm (a zero-layer model
returns its input embeddings); the final norm lives inside the logits head.

At each <HAND> slot the CVAE posterior reads (H_prev, h_gt) during training
and the decoder maps (H_prev, z) to 4 sigmoid-squashed coordinates plus 2
validity logits. The validity logits carry no loss term; their head is
initialized to a positive bias so untrained models emit valid steps, and
generation marks a side valid iff its logit exceeds 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, EmptyBatch, LengthExceeded, ShapeMismatch
from .tokens import HandStep, HandStepEmbedder, TokenSequence, Vocabulary, parse_generated, prompt_ids
from .trajectory import HandTrajectory


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    """Model hyperparameters; validated on construction."""

    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_frames: int = 10          # T
    tokens_per_frame: int = 16        # M = g^2
    slow_frames: int = 4              # s
    pool_kernel: int = 2              # k
    horizon: int = 4                  # N
    latent_dim: int = 8               # z
    lambda_txt: float = 1.0
    lambda_hand: float = 1.0
    frame_height: int = 32
    frame_width: int = 32
    frame_channels: int = 3
    projector_layers: int = 2
    mlp_ratio: int = 4
    max_seq_len: int = 96

    def __post_init__(self) -> None:
        g = math.isqrt(self.tokens_per_frame)
        if g * g != self.tokens_per_frame:
            raise ConfigError(f"tokens_per_frame must be square, got {self.tokens_per_frame}")
        if self.slow_frames > self.context_frames or self.slow_frames < 1:
            raise ConfigError(
                f"slow_frames must be in [1, {self.context_frames}], got {self.slow_frames}"
            )
        if g % self.pool_kernel != 0:
            raise ConfigError(f"pool_kernel {self.pool_kernel} must divide grid side {g}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.n_heads}")
        if self.frame_height % g or self.frame_width % g:
            raise ConfigError(
                f"grid side {g} must divide frame size "
                f"{self.frame_height}x{self.frame_width}"
            )
        if self.projector_layers not in (1, 2):
            raise ConfigError(f"projector_layers must be 1 or 2, got {self.projector_layers}")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.tokens_per_frame)

    @property
    def n_visual_tokens(self) -> int:
        side = self.grid_side // self.pool_kernel
        return self.context_frames + self.slow_frames * side * side

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# visual path


class FrameEncoder(nn.Module):
    """Non-overlapping patch flattening with a learned affine map per patch
    position, so spatial identity survives later pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.grid_side
        self.patch_h = cfg.frame_height // g
        self.patch_w = cfg.frame_width // g
        patch_dim = cfg.frame_channels * self.patch_h * self.patch_w
        scale = 1.0 / math.sqrt(patch_dim)
        self.weight = nn.Parameter(
            torch.randn(cfg.tokens_per_frame, patch_dim, cfg.d_model) * scale
        )
        self.bias = nn.Parameter(torch.zeros(cfg.tokens_per_frame, cfg.d_model))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, C, H, W) float frames -> (B, T, M, d) visual tokens."""
        cfg = self.cfg
        expected = (cfg.context_frames, cfg.frame_channels, cfg.frame_height, cfg.frame_width)
        if frames.ndim != 5 or tuple(frames.shape[1:]) != expected:
            raise ShapeMismatch(
                f"frames must be (B, {expected[0]}, {expected[1]}, {expected[2]}, "
                f"{expected[3]}), got {tuple(frames.shape)}"
            )
        b, t, c, h, w = frames.shape
        g = cfg.grid_side
        # (B,T,C,gy,ph,gx,pw) -> (B,T,gy,gx,C,ph,pw) -> (B,T,M,patch_dim)
        patches = (
            frames.reshape(b, t, c, g, self.patch_h, g, self.patch_w)
            .permute(0, 1, 3, 5, 2, 4, 6)
            .reshape(b, t, g * g, -1)
        )
        return torch.einsum("btmp,mpd->btmd", patches, self.weight) + self.bias


def slow_frame_indices(n_frames: int, n_slow: int) -> list[int]:
    """Uniformly spaced frame picks, first and last inclusive (rounded linspace)."""
    if n_slow > n_frames or n_slow < 1:
        raise ConfigError(f"cannot pick {n_slow} slow frames from {n_frames}")
    return [int(round(x)) for x in np.linspace(0, n_frames - 1, n_slow)]


def slowfast_pool(tokens: torch.Tensor, n_slow: int, kernel: int) -> torch.Tensor:
    """Compress (B, T, M, d) into (B, T + s*(g/k)^2, d).

    Fast path: per-frame mean over the M patch tokens (T tokens). Slow path:
    for each of s uniformly spaced frames, k x k average pooling on the g x g
    grid, blocks flattened row-major; output order is [fast 0..T-1, slow
    blocks in frame order].
    """
    if tokens.ndim != 4:
        raise ShapeMismatch(f"visual tokens must be (B, T, M, d), got {tuple(tokens.shape)}")
    b, t, m, d = tokens.shape
    g = math.isqrt(m)
    if g * g != m:
        raise ConfigError(f"tokens per frame must be square, got {m}")
    if g % kernel != 0:
        raise ConfigError(f"pool kernel {kernel} must divide grid side {g}")
    fast = tokens.mean(dim=2)
    idx = slow_frame_indices(t, n_slow)
    side = g // kernel
    slow = (
        tokens[:, idx]
        .reshape(b, n_slow, g, g, d)
        .reshape(b, n_slow, side, kernel, side, kernel, d)
        .mean(dim=(3, 5))
        .reshape(b, n_slow * side * side, d)
    )
    return torch.cat([fast, slow], dim=1)


class VisionLanguageProjector(nn.Module):
    """Tokenwise map from visual embedding space into language space."""

    def __init__(self, d_model: int, n_layers: int = 2, hidden: int | None = None):
        super().__init__()
        if n_layers == 1:
            self.net = nn.Linear(d_model, d_model)
        else:
            hidden = hidden or d_model
            self.net = nn.Sequential(
                nn.Linear(d_model, hidden), nn.GELU(), nn.Linear(hidden, d_model)
            )
        self.d_model = d_model

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.d_model:
            raise ShapeMismatch(
                f"projector expects last dim {self.d_model}, got {tokens.shape[-1]}"
            )
        return self.net(tokens)


# ---------------------------------------------------------------------------
# transformer


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, l, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=2)
        shape = (b, l, self.n_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(l, l, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, l, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(ln(x)); x + mlp(ln(x))."""

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, mlp_ratio * d_model),
            nn.GELU(),
            nn.Linear(mlp_ratio * d_model, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


# ---------------------------------------------------------------------------
# CVAE heads


class CvaePosterior(nn.Module):
    """(H_prev, h_gt) -> (mu, log_sigma); sigma = exp(log_sigma) > 0 always."""

    def __init__(self, d_model: int, latent_dim: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = nn.Sequential(
            nn.Linear(d_model + 6, d_model), nn.GELU(), nn.Linear(d_model, 2 * latent_dim)
        )

    def forward(self, h_prev: torch.Tensor, h_gt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(torch.cat([h_prev, h_gt], dim=-1))
        mu, log_sigma = out.split(self.latent_dim, dim=-1)
        return mu, log_sigma


class HandDecoder(nn.Module):
    """(H_prev, z) -> 4 coordinates in [0,1] plus 2 validity logits."""

    def __init__(self, d_model: int, latent_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model + latent_dim, d_model), nn.GELU(), nn.Linear(d_model, 6)
        )
        with torch.no_grad():
            # Positive validity bias: fresh models emit "valid" steps.
            self.net[-1].bias[4:6] = 2.0

    def forward(self, h_prev: torch.Tensor, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(torch.cat([h_prev, z], dim=-1))
        coords = torch.sigmoid(out[..., :4])
        validity_logits = out[..., 4:6]
        return coords, validity_logits


def kl_standard_normal(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over the latent dim: per-element
    closed form 0.5 * (mu^2 + sigma^2 - 1 - 2*log_sigma)."""
    sigma_sq = torch.exp(2.0 * log_sigma)
    return 0.5 * (mu**2 + sigma_sq - 1.0 - 2.0 * log_sigma).sum(dim=-1)


# ---------------------------------------------------------------------------
# the model


class HandForecastModel(nn.Module):
    """Language-conditioned hand-trajectory forecaster.

    See the module docstring for the dataflow. ``vocab`` travels with the
    model so checkpoints are self-contained.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        if cfg.vocab_size != len(vocab):
            raise ConfigError(f"config vocab_size {cfg.vocab_size} != vocabulary {len(vocab)}")
        self.cfg = cfg
        self.vocab = vocab
        self.frame_encoder = FrameEncoder(cfg)
        self.projector = VisionLanguageProjector(cfg.d_model, cfg.projector_layers)
        self.tok_embedding = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_embedding = nn.Parameter(torch.zeros(cfg.max_seq_len, cfg.d_model))
        nn.init.normal_(self.pos_embedding, std=0.02)
        nn.init.normal_(self.tok_embedding.weight, std=0.02)
        self.blocks = nn.ModuleList(
            [TransformerBlock(cfg.d_model, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_layers)]
        )
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.hand_embedder = HandStepEmbedder(cfg.d_model)
        self.posterior = CvaePosterior(cfg.d_model, cfg.latent_dim)
        self.hand_decoder = HandDecoder(cfg.d_model, cfg.latent_dim)

    # -- visual

    def encode_visual(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, C, H, W) frames -> (B, V, d) projected visual tokens."""
        tokens = self.frame_encoder(frames)
        pooled = slowfast_pool(tokens, self.cfg.slow_frames, self.cfg.pool_kernel)
        return self.projector(pooled)

    # -- sequence assembly

    def embed_sequence(
        self,
        ids: torch.Tensor,
        hand_values: torch.Tensor | None = None,
        hand_mask: torch.Tensor | None = None,
        visual: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Mix token, hand-step, and visual embeddings into one sequence.

        Args:
            ids: (B, L) token ids, padded with pad_id.
            hand_values: (B, L, 6) teacher-forcing step vectors (zeros elsewhere).
            hand_mask: (B, L) bool marking hand slots.
            visual: (B, V, d) projected visual tokens; when given, the single
                <image> position (same in every row) expands into V tokens.

        Returns:
            (embeddings (B, L', d) with positions added, index_map (L,) from
            token index to expanded index).
        """
        b, l = ids.shape
        emb = self.tok_embedding(ids)
        if hand_mask is not None and hand_mask.any():
            base = emb[hand_mask]
            emb = emb.clone()
            emb[hand_mask] = self.hand_embedder(hand_values[hand_mask].to(emb.dtype), base)

        index_map = torch.arange(l, dtype=torch.long)
        if visual is not None:
            image_positions = (ids == self.vocab.image_id).nonzero()
            if len(image_positions) != b:
                raise ShapeMismatch("every sequence needs exactly one <image> token")
            cols = image_positions[:, 1]
            if not bool((cols == cols[0]).all()):
                raise ShapeMismatch("<image> must sit at the same position in a batch")
            p = int(cols[0])
            v = visual.shape[1]
            emb = torch.cat([emb[:, :p], visual, emb[:, p + 1 :]], dim=1)
            index_map = torch.cat(
                [
                    torch.arange(p, dtype=torch.long),
                    torch.full((1,), p, dtype=torch.long),  # <image> -> first visual slot
                    torch.arange(p + 1, l, dtype=torch.long) + (v - 1),
                ]
            )
        lp = emb.shape[1]
        if lp > self.cfg.max_seq_len:
            raise LengthExceeded(f"sequence length {lp} > max {self.cfg.max_seq_len}")
        emb = emb + self.pos_embedding[:lp]
        return emb, index_map

    # -- transformer

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Block-stack output WITHOUT the final norm; zero layers = identity."""
        if embeddings.shape[1] > self.cfg.max_seq_len:
            raise LengthExceeded(
                f"sequence length {embeddings.shape[1]} > max {self.cfg.max_seq_len}"
            )
        h = embeddings
        for block in self.blocks:
            h = block(h)
        return h

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.lm_head(self.final_norm(hidden))


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossParts:
    total: torch.Tensor
    loss_txt: torch.Tensor
    loss_hand: torch.Tensor
    mse: float
    kl: float
    n_text_positions: int
    n_hand_slots: int

    def scalars(self) -> dict[str, float]:
        return {
            "loss": float(self.total.detach()),
            "loss_txt": float(self.loss_txt.detach()),
            "loss_hand": float(self.loss_hand.detach()),
            "mse": self.mse,
            "kl": self.kl,
        }


def _collate(
    sequences: Sequence[TokenSequence], pad_id: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pad to a common length -> (ids, loss_mask, hand_values, hand_mask)."""
    b = len(sequences)
    l = max(len(s.ids) for s in sequences)
    ids = torch.full((b, l), pad_id, dtype=torch.long)
    mask = torch.zeros((b, l), dtype=torch.long)
    hand_values = torch.zeros((b, l, 6))
    hand_mask = torch.zeros((b, l), dtype=torch.bool)
    for i, s in enumerate(sequences):
        n = len(s.ids)
        ids[i, :n] = torch.tensor(s.ids, dtype=torch.long)
        mask[i, :n] = torch.tensor(s.loss_mask, dtype=torch.long)
        for pos, vec in s.hand_slots.items():
            hand_values[i, pos] = torch.from_numpy(np.asarray(vec, dtype=np.float32))
            hand_mask[i, pos] = True
    return ids, mask, hand_values, hand_mask


def loss_total(
    model: HandForecastModel,
    sequences: Sequence[TokenSequence],
    frames: torch.Tensor | None,
    noise: torch.Tensor | torch.Generator | None = None,
) -> LossParts:
    """L = lambda_txt * CE(answer tokens) + lambda_hand * (sum_t MSE + KL).

    CE covers every answer-region position (text, <HAND>, and </s>); the MSE
    at each hand slot averages over the valid coordinates only, so invalid
    sides get exactly zero gradient; slots whose ground truth has no valid
    side contribute neither MSE nor KL. Per-sample step terms are summed, the
    batch is averaged. ``noise``: a tensor gives fixed reparameterization
    noise (gradcheck), a generator samples it, None uses z = mu.
    """
    from .tokens import MASK_IGNORE

    if len(sequences) == 0:
        raise EmptyBatch("loss_total called with an empty batch")
    cfg = model.cfg
    ids, mask, hand_values, hand_mask = _collate(sequences, model.vocab.pad_id)

    visual = model.encode_visual(frames) if frames is not None else None
    emb, index_map = model.embed_sequence(ids, hand_values, hand_mask, visual)
    hidden = model(emb)
    logits = model.logits(hidden)

    # Text loss: predict token at position p from expanded position of p-1.
    supervised = (mask != MASK_IGNORE) & (
        torch.arange(ids.shape[1]) > 0
    )  # position 0 has no predecessor
    rows, cols = supervised.nonzero(as_tuple=True)
    prev_expanded = index_map[cols] - 1
    ce = nn.functional.cross_entropy(logits[rows, prev_expanded], ids[rows, cols])
    n_text = int(len(rows))

    # Hand loss over all slots in the batch.
    srows, scols = hand_mask.nonzero(as_tuple=True)
    mse_sum = hidden.new_zeros(())
    kl_sum = hidden.new_zeros(())
    n_slots = int(len(srows))
    if n_slots:
        h_prev = hidden[srows, index_map[scols] - 1]
        gt = hand_values[srows, scols].to(hidden.dtype)
        mu, log_sigma = model.posterior(h_prev, gt)
        if isinstance(noise, torch.Tensor):
            eps = noise.to(hidden.dtype)
            if eps.shape != mu.shape:
                raise ShapeMismatch(f"noise shape {tuple(eps.shape)} != {tuple(mu.shape)}")
        elif isinstance(noise, torch.Generator):
            eps = torch.randn(mu.shape, generator=noise, dtype=hidden.dtype)
        else:
            eps = torch.zeros_like(mu)
        z = mu + torch.exp(log_sigma) * eps
        coords, _validity = model.hand_decoder(h_prev, z)

        coord_mask = torch.stack(
            [gt[:, 4], gt[:, 4], gt[:, 5], gt[:, 5]], dim=1
        )  # valid_l, valid_l, valid_r, valid_r
        n_valid = coord_mask.sum(dim=1)
        has_any = n_valid > 0
        sq = (coords - gt[:, :4]) ** 2 * coord_mask
        per_slot_mse = sq.sum(dim=1) / n_valid.clamp(min=1.0)
        per_slot_kl = kl_standard_normal(mu, log_sigma)
        mse_sum = (per_slot_mse * has_any).sum()
        kl_sum = (per_slot_kl * has_any).sum()

    b = len(sequences)
    loss_hand = (mse_sum + kl_sum) / b
    total = cfg.lambda_txt * ce + cfg.lambda_hand * loss_hand
    return LossParts(
        total=total,
        loss_txt=ce,
        loss_hand=loss_hand,
        mse=float(mse_sum.detach()) / b,
        kl=float(kl_sum.detach()) / b,
        n_text_positions=n_text,
        n_hand_slots=n_slots,
    )


def teacher_forced_predict(
    model: HandForecastModel,
    sequences: Sequence[TokenSequence],
    frames: torch.Tensor | None,
) -> list[HandTrajectory]:
    """Decode every hand slot with z = 0 under ground-truth conditioning.

    The returned trajectories mark a step valid iff the decoder's validity
    logit is positive; this is the deterministic "train ADE" view.
    """
    if len(sequences) == 0:
        raise EmptyBatch("teacher_forced_predict called with an empty batch")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        ids, _mask, hand_values, hand_mask = _collate(sequences, model.vocab.pad_id)
        visual = model.encode_visual(frames) if frames is not None else None
        emb, index_map = model.embed_sequence(ids, hand_values, hand_mask, visual)
        hidden = model(emb)
        out: list[HandTrajectory] = []
        for i, seq in enumerate(sequences):
            steps: list[HandStep] = []
            for pos in sorted(seq.hand_slots):
                h_prev = hidden[i, int(index_map[pos]) - 1]
                z = torch.zeros(model.cfg.latent_dim, dtype=hidden.dtype)
                coords, validity = model.hand_decoder(h_prev, z)
                vec = np.concatenate(
                    [coords.numpy(), (validity.numpy() > 0).astype(np.float32)]
                )
                steps.append(HandStep.from_vector(vec))
            from .tokens import trajectory_from_steps

            out.append(trajectory_from_steps(steps))
    if was_training:
        model.train()
    return out


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenerateSettings:
    temperature: float = 0.0
    seed: int = 0
    deterministic_hand: bool = True
    max_tokens: int = 48


@dataclass
class GenerationResult:
    text: str
    trajectory: HandTrajectory
    token_ids: list[int]
    steps: list[HandStep] = field(default_factory=list)
    overrun: bool = False


def generate(
    model: HandForecastModel,
    frames: torch.Tensor | None,
    question: str,
    settings: GenerateSettings,
) -> GenerationResult:
    """Autoregressive decoding with iterative hand decoding.

    When the sampled token is <HAND>, the current last hidden state feeds the
    hand decoder (z = 0 when deterministic, else z ~ N(0, I)); the decoded
    step is re-encoded through the hand embedder as the next input embedding,
    so later steps condition on earlier predicted positions. Temperature 0
    takes the argmax; the whole call is a pure function of (weights, inputs,
    settings). Hitting max_tokens sets ``overrun`` instead of raising.
    """
    vocab = model.vocab
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(settings.seed)
    with torch.no_grad():
        visual = (
            model.encode_visual(frames.unsqueeze(0)) if frames is not None else None
        )
        ids = list(prompt_ids(question, vocab))
        id_tensor = torch.tensor([ids], dtype=torch.long)
        hand_values = torch.zeros((1, len(ids), 6))
        hand_mask = torch.zeros((1, len(ids)), dtype=torch.bool)

        # structural tokens never belong in generated text: <image> would
        # violate the one-image invariant on re-encoding, <pad>/<s> corrupt it
        banned = torch.tensor([vocab.pad_id, vocab.bos_id, vocab.image_id])

        generated: list[int] = []
        steps: list[HandStep] = []
        overrun = True
        for _ in range(settings.max_tokens):
            emb, _ = model.embed_sequence(id_tensor, hand_values, hand_mask, visual)
            hidden = model(emb)
            last = hidden[0, -1]
            logit = model.logits(last.unsqueeze(0)).squeeze(0)
            logit[banned] = float("-inf")
            if settings.temperature <= 0.0:
                next_id = int(torch.argmax(logit))
            else:
                probs = torch.softmax(logit / settings.temperature, dim=-1)
                next_id = int(torch.multinomial(probs, 1, generator=gen))

            if next_id == vocab.eos_id:
                generated.append(next_id)
                overrun = False
                break

            step_vec = torch.zeros(6)
            is_hand = next_id == vocab.hand_id
            if is_hand:
                if settings.deterministic_hand:
                    z = torch.zeros(model.cfg.latent_dim, dtype=last.dtype)
                else:
                    z = torch.randn(model.cfg.latent_dim, generator=gen).to(last.dtype)
                coords, validity = model.hand_decoder(last, z)
                vec = np.concatenate(
                    [coords.numpy(), (validity.numpy() > 0).astype(np.float32)]
                )
                step = HandStep.from_vector(vec)
                steps.append(step)
                step_vec = torch.from_numpy(step.to_vector())

            generated.append(next_id)
            id_tensor = torch.cat(
                [id_tensor, torch.tensor([[next_id]], dtype=torch.long)], dim=1
            )
            hand_values = torch.cat([hand_values, step_vec.view(1, 1, 6)], dim=1)
            hand_mask = torch.cat(
                [hand_mask, torch.tensor([[is_hand]], dtype=torch.bool)], dim=1
            )

    if was_training:
        model.train()
    text, trajectory = parse_generated(generated, steps, vocab)
    return GenerationResult(
        text=text, trajectory=trajectory, token_ids=generated, steps=steps, overrun=overrun
    )
