"""Domain types shared across the pipeline: course data, generation methods,
feedback records, and rubric verdicts.

All types here are immutable value objects, safe to share across worker
threads. Dataset-level rules (referential integrity, option cardinality) are
checked by :func:`validate_dataset`, which reports violations as data instead
of raising, so malformed input files can be diagnosed in one pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .retrieval import SlideChunk


class QuestionKind(str, Enum):
    MULTIPLE_CHOICE = "multiple_choice"
    OPEN_ENDED = "open_ended"


class Strategy(str, Enum):
    ZERO_SHOT = "zero_shot"
    RAG_COT = "rag_cot"


class Framework(str, Enum):
    NONE = "none"
    LEARNER = "learner"
    KNOWLEDGE = "knowledge"


class Round(int, Enum):
    FIRST = 1
    SECOND = 2


class Source(str, Enum):
    LLM = "llm"
    HUMAN = "human"


@dataclass(frozen=True)
class Method:
    """One generation configuration: a prompt strategy crossed with a feedback framework."""

    strategy: Strategy
    framework: Framework

    @property
    def key(self) -> str:
        return f"{self.strategy.value}_{self.framework.value}"

    @classmethod
    def from_key(cls, key: str) -> "Method":
        for method in enumerate_methods():
            if method.key == key:
                return method
        raise ValueError(f"unknown method key: {key!r}")


def enumerate_methods() -> list[Method]:
    """All six generation methods in canonical order.

    Zero-shot strategies come before RAG+CoT; within each strategy the
    framework order is none, learner, knowledge.
    """
    return [
        Method(strategy, framework)
        for strategy in (Strategy.ZERO_SHOT, Strategy.RAG_COT)
        for framework in (Framework.NONE, Framework.LEARNER, Framework.KNOWLEDGE)
    ]


METHOD_KEYS = tuple(m.key for m in enumerate_methods())


@dataclass(frozen=True)
class QuizItem:
    """A quiz question; multiple-choice items carry options and an answer key."""

    id: str
    kind: QuestionKind
    stem: str
    options: tuple[str, ...] = ()
    answer_key: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "stem": self.stem,
            "options": list(self.options),
            "answer_key": self.answer_key,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "QuizItem":
        return cls(
            id=str(row["id"]),
            kind=QuestionKind(row["kind"]),
            stem=row["stem"],
            options=tuple(row.get("options") or ()),
            answer_key=row.get("answer_key"),
        )


@dataclass(frozen=True)
class StudentResponse:
    """A student's answer to one quiz item.

    For multiple choice the text is the chosen option's full text, so prompt
    construction never needs to join back to the question's option list.
    """

    id: str
    question_id: str
    text: str

    def to_dict(self) -> dict:
        return {"id": self.id, "question_id": self.question_id, "text": self.text}

    @classmethod
    def from_dict(cls, row: dict) -> "StudentResponse":
        return cls(id=str(row["id"]), question_id=str(row["question_id"]), text=row["text"])


@dataclass(frozen=True)
class FeedbackRecord:
    """One generated feedback text, tagged with its round, method, and retrieval trail."""

    id: str
    response_id: str
    method: Method
    round: Round
    text: str
    retrieved_slides: tuple[str, ...] = ()
    parent_id: str | None = None

    def __post_init__(self) -> None:
        if self.method.strategy is Strategy.ZERO_SHOT and self.retrieved_slides:
            raise ValueError(f"{self.id}: zero-shot records must not carry retrieved slides")
        if self.round is Round.SECOND and self.parent_id is None:
            raise ValueError(f"{self.id}: second-round records require a parent_id")
        if self.round is Round.FIRST and self.parent_id is not None:
            raise ValueError(f"{self.id}: first-round records must not have a parent_id")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "response_id": self.response_id,
            "method": self.method.key,
            "round": self.round.value,
            "text": self.text,
            "retrieved_slides": list(self.retrieved_slides),
            "parent_id": self.parent_id,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "FeedbackRecord":
        return cls(
            id=row["id"],
            response_id=row["response_id"],
            method=Method.from_key(row["method"]),
            round=Round(row["round"]),
            text=row["text"],
            retrieved_slides=tuple(row.get("retrieved_slides") or ()),
            parent_id=row.get("parent_id"),
        )


FEATURE_FIELDS = ("f1_positive", "f2_usable", "f3_relationship", "f4_dialogue", "f5_independence")
COMPONENT_FIELDS = ("c1_critiques", "c2_strengths", "c3_actionable", "c4_agency")


@dataclass(frozen=True)
class Evaluation:
    """A rubric verdict for one feedback record.

    Components are booleans, feature levels are integers in {1, 2, 3}, and
    simplicity is the feedback's word count (computed locally, never asked of
    the model). ``retrieved_slides_accuracy`` is present exactly when the
    evaluated record carries retrieved slides.
    """

    feedback_id: str
    evaluation_accuracy: bool
    retrieved_slides_accuracy: bool | None
    c1_critiques: bool
    c2_strengths: bool
    c3_actionable: bool
    c4_agency: bool
    f1_positive: int
    f2_usable: int
    f3_relationship: int
    f4_dialogue: int
    f5_independence: int
    simplicity: int
    rationale: str
    source: Source

    def __post_init__(self) -> None:
        for name in FEATURE_FIELDS:
            level = getattr(self, name)
            if level not in (1, 2, 3):
                raise ValueError(f"{self.feedback_id}: {name} must be 1, 2, or 3 (got {level!r})")
        if self.simplicity < 0:
            raise ValueError(f"{self.feedback_id}: simplicity must be non-negative")

    def feature_level(self, name: str) -> int:
        if name not in FEATURE_FIELDS:
            raise KeyError(name)
        return getattr(self, name)

    def component(self, name: str) -> bool:
        if name not in COMPONENT_FIELDS:
            raise KeyError(name)
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {
            "feedback_id": self.feedback_id,
            "evaluation_accuracy": self.evaluation_accuracy,
            "retrieved_slides_accuracy": self.retrieved_slides_accuracy,
            "c1_critiques": self.c1_critiques,
            "c2_strengths": self.c2_strengths,
            "c3_actionable": self.c3_actionable,
            "c4_agency": self.c4_agency,
            "f1_positive": self.f1_positive,
            "f2_usable": self.f2_usable,
            "f3_relationship": self.f3_relationship,
            "f4_dialogue": self.f4_dialogue,
            "f5_independence": self.f5_independence,
            "simplicity": self.simplicity,
            "rationale": self.rationale,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "Evaluation":
        return cls(
            feedback_id=row["feedback_id"],
            evaluation_accuracy=bool(row["evaluation_accuracy"]),
            retrieved_slides_accuracy=(
                None if row.get("retrieved_slides_accuracy") is None
                else bool(row["retrieved_slides_accuracy"])
            ),
            c1_critiques=bool(row["c1_critiques"]),
            c2_strengths=bool(row["c2_strengths"]),
            c3_actionable=bool(row["c3_actionable"]),
            c4_agency=bool(row["c4_agency"]),
            f1_positive=int(row["f1_positive"]),
            f2_usable=int(row["f2_usable"]),
            f3_relationship=int(row["f3_relationship"]),
            f4_dialogue=int(row["f4_dialogue"]),
            f5_independence=int(row["f5_independence"]),
            simplicity=int(row["simplicity"]),
            rationale=row.get("rationale", ""),
            source=Source(row.get("source", "llm")),
        )


@dataclass(frozen=True)
class CourseDataset:
    """The loaded course content: questions, student responses, and slide chunks."""

    questions: tuple[QuizItem, ...]
    responses: tuple[StudentResponse, ...]
    slides: tuple[SlideChunk, ...] = ()

    def question_by_id(self) -> dict[str, QuizItem]:
        return {q.id: q for q in self.questions}


@dataclass(frozen=True)
class Violation:
    """One dataset validation failure, naming the offending record and rule."""

    record_id: str
    rule: str
    message: str


def validate_dataset(dataset: CourseDataset) -> list[Violation]:
    """Check every dataset invariant, returning one violation per broken rule.

    An empty report means the dataset is well formed. Violations are data,
    not exceptions: a single pass reports every problem at once.
    """
    violations: list[Violation] = []

    def check_unique(ids: Iterable[str], rule: str) -> None:
        seen: set[str] = set()
        for record_id in ids:
            if record_id in seen:
                violations.append(Violation(record_id, rule, f"duplicate id {record_id!r}"))
            seen.add(record_id)

    check_unique((q.id for q in dataset.questions), "unique-question-id")
    check_unique((r.id for r in dataset.responses), "unique-response-id")
    check_unique((s.id for s in dataset.slides), "unique-slide-id")

    for question in dataset.questions:
        if question.kind is QuestionKind.MULTIPLE_CHOICE:
            if len(question.options) < 2:
                violations.append(Violation(
                    question.id, "mc-option-count",
                    f"multiple-choice item has {len(question.options)} option(s), needs at least 2",
                ))
            if question.answer_key is None:
                violations.append(Violation(
                    question.id, "mc-answer-key", "multiple-choice item has no answer_key"))
            elif question.answer_key not in question.options:
                violations.append(Violation(
                    question.id, "mc-answer-key",
                    f"answer_key {question.answer_key!r} is not one of the options",
                ))
        else:
            if question.options:
                violations.append(Violation(
                    question.id, "open-ended-options", "open-ended item must have no options"))
            if question.answer_key is not None:
                violations.append(Violation(
                    question.id, "open-ended-answer-key", "open-ended item must have no answer_key"))

    known_questions = {q.id for q in dataset.questions}
    for response in dataset.responses:
        if response.question_id not in known_questions:
            violations.append(Violation(
                response.id, "referential-integrity",
                f"question_id {response.question_id!r} does not resolve",
            ))

    seen_positions: set[tuple[str, int]] = set()
    for chunk in dataset.slides:
        if not chunk.text.strip():
            violations.append(Violation(chunk.id, "slide-text-empty", "slide chunk text is empty"))
        position = (chunk.source_deck, chunk.ordinal)
        if position in seen_positions:
            violations.append(Violation(
                chunk.id, "slide-position-unique",
                f"duplicate (deck, ordinal) position {position!r}",
            ))
        seen_positions.add(position)

    return violations


def expected_fanout(dataset: CourseDataset) -> int:
    """First-round record count for a full run: six methods per response."""
    return len(enumerate_methods()) * len(dataset.responses)


def read_jsonl(path: Path) -> Iterator[dict]:
    with path.open(encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_number}: invalid JSON: {exc}") from exc


def write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def load_questions(path: Path) -> tuple[QuizItem, ...]:
    return tuple(QuizItem.from_dict(row) for row in read_jsonl(path))


def load_responses(path: Path) -> tuple[StudentResponse, ...]:
    return tuple(StudentResponse.from_dict(row) for row in read_jsonl(path))
