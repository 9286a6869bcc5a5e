"""Vocabulary, conversation templating, and the hand-position <-> embedding map.

The language side is a closed template world, so a word-level tokenizer with
punctuation splitting gives exact text round-trips. One special <HAND> token
stands for one future timestep of BOTH hands; its per-step content (4 coords +
2 validity flags) travels next to the ids and is injected in embedding space,
never quantized to text.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DataError, HorizonMismatch, MalformedGeneration, UnknownToken
from .trajectory import LEFT, RIGHT, HandTrajectory

PAD, BOS, EOS, IMAGE, HAND, UNK = "<pad>", "<s>", "</s>", "<image>", "<HAND>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, IMAGE, HAND, UNK)
PUNCTUATION = {".", ",", "!", "?", ":"}

# loss-mask states
MASK_IGNORE = 0
MASK_TEXT = 1
MASK_HAND = 2

_TOKEN_RE = re.compile(
    r"<pad>|<s>|</s>|<image>|<HAND>|<unk>|[.,!?:]|[^\s.,!?:]+"
)


def split_text(text: str) -> list[str]:
    """Split into word/punctuation/marker tokens."""
    return _TOKEN_RE.findall(text)


def join_tokens(tokens: Sequence[str]) -> str:
    """Inverse of :func:`split_text` on canonical template text.

    Punctuation attaches to the previous token; consecutive <HAND> markers
    attach to each other; everything else is space-joined.
    """
    out: list[str] = []
    for tok in tokens:
        if not out:
            out.append(tok)
        elif tok in PUNCTUATION or (tok == HAND and out[-1].endswith(HAND)):
            out[-1] = out[-1] + tok
        else:
            out.append(tok)
    return " ".join(out)


@dataclass
class Vocabulary:
    """Word-level vocabulary with the fixed special tokens up front."""

    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if list(self.tokens[: len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise DataError("vocabulary must start with the special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        words = sorted(
            {t for text in texts for t in split_text(text)} - set(SPECIAL_TOKENS)
        )
        return cls(list(SPECIAL_TOKENS) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def image_id(self) -> int:
        return self.index[IMAGE]

    @property
    def hand_id(self) -> int:
        return self.index[HAND]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(t, unk) for t in split_text(text)]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if not (0 <= int(i) < len(self.tokens)):
                raise UnknownToken(f"token id {i} outside vocabulary of {len(self.tokens)}")
            out.append(self.tokens[int(i)])
        return out

    def detokenize(self, ids: Sequence[int]) -> str:
        return join_tokens(self.decode(ids))

    def to_dict(self) -> dict[str, Any]:
        return {"tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Vocabulary":
        return cls(list(d["tokens"]))


# ---------------------------------------------------------------------------
# hand steps


@dataclass
class HandStep:
    """One future timestep: both hand centers, either possibly absent."""

    left: tuple[float, float] | None = None
    right: tuple[float, float] | None = None

    def to_vector(self) -> np.ndarray:
        """(x_l, y_l, x_r, y_r, valid_l, valid_r); absent sides are zeros."""
        v = np.zeros(6, dtype=np.float32)
        if self.left is not None:
            v[0:2] = self.left
            v[4] = 1.0
        if self.right is not None:
            v[2:4] = self.right
            v[5] = 1.0
        return v

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "HandStep":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(
            left=(float(v[0]), float(v[1])) if v[4] > 0.5 else None,
            right=(float(v[2]), float(v[3])) if v[5] > 0.5 else None,
        )


def steps_from_trajectory(traj: HandTrajectory) -> list[HandStep]:
    steps = []
    for t in range(traj.n_steps):
        steps.append(
            HandStep(
                left=tuple(traj.xy[t, LEFT]) if traj.valid[t, LEFT] else None,
                right=tuple(traj.xy[t, RIGHT]) if traj.valid[t, RIGHT] else None,
            )
        )
    return steps


def trajectory_from_steps(steps: Sequence[HandStep]) -> HandTrajectory:
    traj = HandTrajectory.empty(len(steps))
    for t, s in enumerate(steps):
        if s.left is not None:
            traj.xy[t, LEFT] = s.left
            traj.valid[t, LEFT] = True
        if s.right is not None:
            traj.xy[t, RIGHT] = s.right
            traj.valid[t, RIGHT] = True
    return traj


class HandStepEmbedder(nn.Module):
    """Affine map from the 6-dim hand-step vector into embedding space.

    The output is *added* to the base <HAND> token embedding, so with zero
    weights every step degenerates to the plain token embedding, and with
    trained weights distinct steps become distinguishable tokens.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.affine = nn.Linear(6, d_model)

    def forward(self, step_vec: torch.Tensor, base_embedding: torch.Tensor) -> torch.Tensor:
        return base_embedding + self.affine(step_vec)


def encode_hand_step(
    h: HandStep, embedder: HandStepEmbedder, base_embedding: torch.Tensor
) -> torch.Tensor:
    """Embed one hand step next to the base <HAND> embedding."""
    vec = torch.from_numpy(h.to_vector()).to(base_embedding.dtype)
    return embedder(vec, base_embedding)


# ---------------------------------------------------------------------------
# templates


def _load_resource(name: str) -> str:
    return resources.files("handcast.templates").joinpath(name).read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def question_bank() -> tuple[list[str], list[str]]:
    """(action-free templates, action-conditioned templates)."""
    lines = [l for l in _load_resource("question_templates.txt").splitlines() if l.strip()]
    free = [l for l in lines if "{action}" not in l]
    conditioned = [l for l in lines if "{action}" in l]
    return free, conditioned


@lru_cache(maxsize=None)
def answer_bank() -> tuple[list[str], list[str]]:
    """(action-free templates, action-conditioned templates)."""
    lines = [l for l in _load_resource("answer_templates.txt").splitlines() if l.strip()]
    free = [l for l in lines if "{action}" not in l]
    conditioned = [l for l in lines if "{action}" in l]
    return free, conditioned


@lru_cache(maxsize=None)
def implicit_question_bank() -> list[str]:
    return [l for l in _load_resource("implicit_question_templates.txt").splitlines() if l.strip()]


def system_prompt(kind: str) -> str:
    """'describe' or 'implicit' system prompt resource."""
    names = {"describe": "describe_system_prompt.txt", "implicit": "implicit_system_prompt.txt"}
    if kind not in names:
        raise DataError(f"unknown system prompt kind '{kind}'")
    return _load_resource(names[kind])


@lru_cache(maxsize=None)
def affordance_table() -> dict[str, dict[str, Any]]:
    return json.loads(_load_resource("affordances.json"))


@dataclass
class RenderedTemplate:
    question: str
    answer_scaffold: str
    question_template: int
    answer_template: int


def render_template(
    kind: str,
    instruction: str | None,
    n_steps: int,
    rng: np.random.Generator,
) -> RenderedTemplate:
    """Sample a question and an answer scaffold with ``n_steps`` <HAND> tokens.

    kind 'vhp' uses the explicit question bank (action-free when instruction is
    None); kind 'rbhp' treats the instruction as an implicit description and
    uses the implicit question templates. Deterministic given the rng state.
    """
    if n_steps < 1:
        raise DataError(f"n_steps must be >= 1, got {n_steps}")
    if kind not in ("vhp", "rbhp"):
        raise DataError(f"unknown template kind '{kind}'")

    q_free, q_cond = question_bank()
    if kind == "rbhp":
        if instruction is None:
            raise DataError("rbhp templates need an implicit description")
        bank = implicit_question_bank()
        qi = int(rng.integers(len(bank)))
        question = bank[qi].format(hint=instruction)
        q_index = len(q_free) + len(q_cond) + qi
    elif instruction is None:
        qi = int(rng.integers(len(q_free)))
        question = q_free[qi]
        q_index = qi
    else:
        qi = int(rng.integers(len(q_cond)))
        question = q_cond[qi].format(action=instruction)
        q_index = len(q_free) + qi

    a_free, a_cond = answer_bank()
    hands = HAND * n_steps
    if instruction is None:
        ai = int(rng.integers(len(a_free)))
        answer = a_free[ai].format(hands=hands)
    else:
        ai = int(rng.integers(len(a_free) + len(a_cond)))
        if ai < len(a_free):
            answer = a_free[ai].format(hands=hands)
        else:
            answer = a_cond[ai - len(a_free)].format(action=instruction, hands=hands)

    return RenderedTemplate(question, answer, q_index, ai)


# ---------------------------------------------------------------------------
# sequences


@dataclass
class TokenSequence:
    """A training sequence: ids, per-position loss mask, and hand-slot values.

    ``hand_slots`` maps sequence index -> 6-dim step vector for teacher
    forcing; every key holds the <HAND> id. ``prompt_len`` is the number of
    leading positions (bos + USER turn + ASSISTANT marker) excluded from the
    loss.
    """

    ids: list[int]
    loss_mask: list[int]
    hand_slots: dict[int, np.ndarray]
    prompt_len: int

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.loss_mask):
            raise DataError("ids and loss_mask lengths differ")


def prompt_ids(question: str, vocab: Vocabulary) -> list[int]:
    """[<s>] USER : <image> {question} ASSISTANT : — the generation prefix."""
    text = f"USER: {IMAGE} {question} ASSISTANT:"
    return [vocab.bos_id] + vocab.encode(text)


def tokenize_sample(
    question: str,
    answer_scaffold: str,
    gt: HandTrajectory,
    vocab: Vocabulary,
) -> TokenSequence:
    """Build the full supervised sequence for one QA sample.

    The i-th <HAND> token in the answer carries gt step i. Raises
    HorizonMismatch when the scaffold's <HAND> count differs from gt.n_steps.
    """
    if HAND in split_text(question):
        raise DataError("question region must not contain <HAND>")
    n_hand = split_text(answer_scaffold).count(HAND)
    if n_hand != gt.n_steps:
        raise HorizonMismatch(
            f"answer scaffold has {n_hand} <HAND> tokens but gt horizon is {gt.n_steps}"
        )

    prefix = prompt_ids(question, vocab)
    answer = vocab.encode(answer_scaffold)
    ids = prefix + answer + [vocab.eos_id]
    loss_mask = [MASK_IGNORE] * len(prefix)
    hand_slots: dict[int, np.ndarray] = {}
    step = 0
    for j, tid in enumerate(answer):
        pos = len(prefix) + j
        if tid == vocab.hand_id:
            loss_mask.append(MASK_HAND)
            hand_slots[pos] = gt.step_vector(step)
            step += 1
        else:
            loss_mask.append(MASK_TEXT)
    loss_mask.append(MASK_TEXT)  # </s> is supervised: the model must stop
    return TokenSequence(ids, loss_mask, hand_slots, prompt_len=len(prefix))


_STRUCTURAL = (PAD, BOS, EOS, IMAGE)


def parse_generated(
    ids: Sequence[int],
    decoded_steps: Sequence[HandStep],
    vocab: Vocabulary,
) -> tuple[str, HandTrajectory]:
    """Turn generated answer ids + decoded steps into (text, trajectory).

    Structural tokens are stripped; <HAND> markers stay in the text (they are
    part of the answer surface form). The i-th <HAND> id pairs with
    decoded_steps[i]; a count mismatch raises MalformedGeneration.
    """
    tokens = vocab.decode(ids)
    n_hand = tokens.count(HAND)
    if n_hand != len(decoded_steps):
        raise MalformedGeneration(
            f"{n_hand} <HAND> ids but {len(decoded_steps)} decoded steps"
        )
    text = join_tokens([t for t in tokens if t not in _STRUCTURAL])
    return text, trajectory_from_steps(decoded_steps)
