"""QA dataset generation: explicit (narration-conditioned) and implicit
(reasoning) question-answer pairs over ground-truth trajectories.

Explicit pairs come straight from the template banks. Implicit pairs run a
two-step annotation: a scene description request, then an implicit-question
request whose output must match one of the shipped question templates and
must not leak the action it is hinting at. Both steps go through the chat
client interface, so a live endpoint, the rule-based stub, and a recorded
transcript are interchangeable; the stub derives its hints from the
affordance table, which is the desk-scale stand-in for a reasoning annotator.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .chatclient import ChatClient, StubChatClient, prompt_key
from .errors import DataError, ValidationFailed
from .records import canonical_json, derive_seed, read_jsonl, stable_hash, write_jsonl
from .tokens import (
    HAND,
    Vocabulary,
    affordance_table,
    implicit_question_bank,
    render_template,
    split_text,
    system_prompt,
)
from .trajectory import GTSample, HandTrajectory

VHP_BASENAME = "qa_vhp.jsonl"
RBHP_BASENAME = "qa_rbhp.jsonl"
VOCAB_BASENAME = "vocab.json"
TRANSCRIPT_BASENAME = "transcript.jsonl"


@dataclass
class QASample:
    """One training/eval pair: a question, an answer scaffold whose <HAND>
    markers align one-to-one with the trajectory steps, and provenance."""

    clip_id: str
    task: str                      # "vhp" | "rbhp"
    question: str
    answer: str
    trajectory: HandTrajectory
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.task not in ("vhp", "rbhp"):
            raise DataError(f"unknown task tag {self.task!r}")
        n_markers = split_text(self.answer).count(HAND)
        if n_markers != self.trajectory.n_steps:
            raise DataError(
                f"{n_markers} {HAND} markers for {self.trajectory.n_steps} steps"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "clip_id": self.clip_id,
            "task": self.task,
            "question": self.question,
            "answer": self.answer,
            "trajectory": self.trajectory.to_dict(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "QASample":
        return cls(
            clip_id=str(d["clip_id"]),
            task=str(d["task"]),
            question=str(d["question"]),
            answer=str(d["answer"]),
            trajectory=HandTrajectory.from_dict(d["trajectory"]),
            provenance=dict(d.get("provenance", {})),
        )


def write_qa_samples(path: Path, samples: Sequence[QASample]) -> None:
    write_jsonl(path, [s.to_dict() for s in sorted(samples, key=lambda s: s.clip_id)])


def load_qa_samples(path: Path) -> list[QASample]:
    return [QASample.from_dict(row) for row in read_jsonl(path)]


# ---------------------------------------------------------------------------
# explicit (VHP)


def gen_vhp(gt_samples: Iterable[GTSample], seed: int) -> list[QASample]:
    """One explicit QA pair per GT sample; action-free templates when the
    sample has no narration. Deterministic in (gt, seed)."""
    out = []
    for gt in gt_samples:
        rng = np.random.default_rng(derive_seed(seed, "vhp", gt.clip_id))
        rendered = render_template("vhp", gt.narration, gt.trajectory.n_steps, rng)
        out.append(
            QASample(
                clip_id=gt.clip_id,
                task="vhp",
                question=rendered.question,
                answer=rendered.answer_scaffold,
                trajectory=gt.trajectory,
                provenance={
                    "question_template": rendered.question_template,
                    "answer_template": rendered.answer_template,
                },
            )
        )
    return out


# ---------------------------------------------------------------------------
# implicit (RBHP): two annotation steps


def _describe_user(frame_ref: str, action: str) -> str:
    return f"image: {frame_ref}\naction: {action}"


def _implicit_user(description: str, action: str) -> str:
    return f"description: {description}\naction: {action}"


def describe_scene(frame_ref: str, action: str, client: ChatClient) -> str:
    """Annotation step 1: ask for a scene description of the given frame."""
    return client.complete(system_prompt("describe"), _describe_user(frame_ref, action))


def implicit_prefixes() -> list[str]:
    """The fixed lead-ins of the implicit question templates."""
    return [t.split("{hint}")[0] for t in implicit_question_bank()]


_WORD_RE = re.compile(r"[a-z']+")


def action_leaked(question: str, action: str) -> bool:
    """True when the question names the action: either the full phrase, or
    its verb and object noun both appear."""
    action_words = _WORD_RE.findall(action.lower())
    if not action_words:
        return False
    q = question.lower()
    if action.lower() in q:
        return True
    words = set(_WORD_RE.findall(q))
    verb, noun = action_words[0], action_words[-1]
    return verb in words and noun in words


def validate_implicit_question(question: str, action: str) -> None:
    if not any(question.startswith(p) for p in implicit_prefixes()):
        raise ValidationFailed(
            f"format: question does not start with a known template prefix: {question!r}"
        )
    if action_leaked(question, action):
        raise ValidationFailed(f"leaked action {action!r} in question: {question!r}")


def gen_implicit(description: str, action: str, client: ChatClient) -> str:
    """Annotation step 2: turn a description into a validated implicit
    question that hints at the action without naming it."""
    question = client.complete(
        system_prompt("implicit"), _implicit_user(description, action)
    ).strip()
    validate_implicit_question(question, action)
    return question


def gen_rbhp(
    gt_samples: Iterable[GTSample], client: ChatClient, seed: int
) -> list[QASample]:
    """Implicit QA pairs via the two-step annotation, one per GT sample.

    Samples without a narration cannot be hinted at and are skipped. The
    answer scaffold names the action (the reasoning target); only the
    question must stay leak-free.
    """
    out = []
    for gt in gt_samples:
        if not gt.narration:
            continue
        frame_ref = f"{gt.clip_id}:frame{gt.context_frames[-1]}"
        description = describe_scene(frame_ref, gt.narration, client)
        question = gen_implicit(description, gt.narration, client)
        rng = np.random.default_rng(derive_seed(seed, "rbhp", gt.clip_id))
        rendered = render_template("vhp", gt.narration, gt.trajectory.n_steps, rng)
        out.append(
            QASample(
                clip_id=gt.clip_id,
                task="rbhp",
                question=question,
                answer=rendered.answer_scaffold,
                trajectory=gt.trajectory,
                provenance={
                    "answer_template": rendered.answer_template,
                    "transcript_keys": [
                        prompt_key(system_prompt("describe"), _describe_user(frame_ref, gt.narration)),
                        prompt_key(system_prompt("implicit"), _implicit_user(description, gt.narration)),
                    ],
                },
            )
        )
    return out


# ---------------------------------------------------------------------------
# the rule-based annotator stub


def _noun_of(action: str) -> str:
    words = _WORD_RE.findall(action.lower())
    return words[-1] if words else ""


def stub_annotator() -> StubChatClient:
    """Offline annotator: describes the scene generically and maps the action
    noun through the affordance table to a leak-free hint. Template choice
    hashes the prompt, so it is diverse but a pure function of the input."""
    describe_sys = system_prompt("describe")
    implicit_sys = system_prompt("implicit")
    table = affordance_table()
    bank = implicit_question_bank()

    def handler(system: str, user: str) -> str:
        noun = _noun_of(user.splitlines()[-1].removeprefix("action: "))
        if system == describe_sys:
            return (
                f"A person sits at a table in a tidy kitchen. The main item "
                f"that stands out is a {noun} within easy reach."
            )
        if system == implicit_sys:
            entry = table.get(noun)
            if entry is None:
                return "I could not determine a hint."
            idx = int(stable_hash(user), 16) % len(bank)
            return bank[idx].format(hint=entry["hint"])
        raise DataError("stub annotator got an unknown system prompt")

    return StubChatClient(handler)


# ---------------------------------------------------------------------------
# vocabulary + orchestration


def build_vocab(qa_sets: Sequence[Sequence[QASample]]) -> Vocabulary:
    """Vocabulary over every question/answer in the dataset plus the template
    banks (so freshly rendered prompts at predict time stay in-vocabulary)."""
    from .tokens import answer_bank, question_bank

    texts: list[str] = []
    for samples in qa_sets:
        for s in samples:
            texts.append(s.question)
            texts.append(s.answer)
    q_free, q_cond = question_bank()
    a_free, a_cond = answer_bank()
    texts.extend(q_free + q_cond + a_free + a_cond)
    texts.extend(implicit_question_bank())
    for name, entry in sorted(affordance_table().items()):
        texts.append(f"{entry['verb']} the {name}")
        texts.append(entry["hint"])
    return Vocabulary.build(texts)


def load_gt_rows(path: Path) -> list[GTSample]:
    return [GTSample.from_dict(row) for row in read_jsonl(path)]


def make_dataset(
    gt_path: Path,
    out_dir: Path,
    client: ChatClient,
    seed: int,
) -> dict[str, int]:
    """Generate qa_vhp.jsonl, qa_rbhp.jsonl, and vocab.json from a GT file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gts = load_gt_rows(Path(gt_path))
    vhp = gen_vhp(gts, seed)
    rbhp = gen_rbhp(gts, client, seed)
    write_qa_samples(out_dir / VHP_BASENAME, vhp)
    write_qa_samples(out_dir / RBHP_BASENAME, rbhp)
    vocab = build_vocab([vhp, rbhp])
    (out_dir / VOCAB_BASENAME).write_text(
        canonical_json(vocab.to_dict()) + "\n", encoding="utf-8"
    )
    return {"vhp": len(vhp), "rbhp": len(rbhp), "vocab": len(vocab)}
