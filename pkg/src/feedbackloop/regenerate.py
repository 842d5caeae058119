"""Second-round feedback: decode a rubric verdict into concrete suggestions
and regenerate the feedback from them.

Suggestions come from a fixed template table, one per deficit, in a stable
order. A failed slide-accuracy verdict never produces a suggestion: the
retrieved slides are fixed by the similarity ranking, so the second round
cannot improve them and keeps the parent's slides verbatim. Each record goes
through exactly one evaluate-regenerate-reevaluate cycle; there is no third
round.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

from .evaluation import evaluate_feedback
from .gateway import ChatGateway
from .model import (COMPONENT_FIELDS, FEATURE_FIELDS, Evaluation, FeedbackRecord,
                    QuizItem, Round, StudentResponse)
from .prompts import PromptFactory, TemplateSet
from .retrieval import SlideChunk

logger = logging.getLogger(__name__)

SUGGESTION_TARGETS = ("evaluation_accuracy",) + COMPONENT_FIELDS + FEATURE_FIELDS + ("simplicity",)

# Rendered when a deficit-free record is still regenerated (always_regenerate);
# targets simplicity, the one dimension that is always worth holding.
FALLBACK_SUGGESTION = ("Polish the feedback for clarity and keep it within {budget} words "
                       "while preserving every component and feature.")


@dataclass(frozen=True)
class Suggestion:
    """One imperative instruction for the regenerator, tied to a rubric item."""

    target: str
    text: str

    def __post_init__(self) -> None:
        if self.target not in SUGGESTION_TARGETS:
            raise ValueError(f"invalid suggestion target {self.target!r}")

    def to_dict(self) -> dict:
        return {"target": self.target, "text": self.text}

    @classmethod
    def from_dict(cls, row: dict) -> "Suggestion":
        return cls(target=row["target"], text=row["text"])


def decode_suggestions(
    evaluation: Evaluation,
    simplicity_budget: int,
    templates: TemplateSet,
) -> list[Suggestion]:
    """One suggestion per deficit, in a fixed order, from the template table.

    Deficits: a wrong verdict, any absent component, any feature below the
    strongest level, and a word count over budget. A failed slide-accuracy
    verdict yields nothing by design.
    """
    table = templates.suggestion_templates
    suggestions: list[Suggestion] = []

    if not evaluation.evaluation_accuracy:
        suggestions.append(Suggestion("evaluation_accuracy", table["evaluation_accuracy"]))
    for name in COMPONENT_FIELDS:
        if not getattr(evaluation, name):
            suggestions.append(Suggestion(name, table[name]))
    for name in FEATURE_FIELDS:
        if getattr(evaluation, name) < 3:
            suggestions.append(Suggestion(name, table[name]))
    if evaluation.simplicity > simplicity_budget:
        suggestions.append(Suggestion(
            "simplicity", table["simplicity"].replace("{budget}", str(simplicity_budget))))
    return suggestions


def fallback_suggestion(simplicity_budget: int) -> Suggestion:
    return Suggestion("simplicity",
                      FALLBACK_SUGGESTION.replace("{budget}", str(simplicity_budget)))


def second_round_id(parent: FeedbackRecord) -> str:
    if parent.id.endswith(":r1"):
        return parent.id[:-3] + ":r2"
    return parent.id + ":r2"


def regenerate(
    question: QuizItem,
    response: StudentResponse,
    previous: FeedbackRecord,
    suggestions: list[Suggestion],
    gateway: ChatGateway,
    factory: PromptFactory,
) -> FeedbackRecord:
    """Produce the second-round record; retrieved slides are copied verbatim."""
    if not suggestions:
        raise ValueError(f"{previous.id}: regeneration requires at least one suggestion")
    if previous.round is not Round.FIRST:
        raise ValueError(f"{previous.id}: can only regenerate from a first-round record")

    bundle = factory.build_regeneration_prompt(
        question, response, previous, [s.text for s in suggestions])
    text = gateway.complete(bundle.request).content
    return FeedbackRecord(
        id=second_round_id(previous),
        response_id=previous.response_id,
        method=previous.method,
        round=Round.SECOND,
        text=text,
        retrieved_slides=previous.retrieved_slides,
        parent_id=previous.id,
    )


@dataclass(frozen=True)
class CycleResult:
    """Everything one evaluate-regenerate-reevaluate cycle produced."""

    evaluation1: Evaluation
    suggestions: tuple[Suggestion, ...]
    feedback2: FeedbackRecord | None
    evaluation2: Evaluation | None


def run_refinement_cycle(
    feedback: FeedbackRecord,
    question: QuizItem,
    response: StudentResponse,
    gateway: ChatGateway,
    factory: PromptFactory,
    simplicity_budget: int,
    always_regenerate: bool = False,
    chunks: Mapping[str, SlideChunk] | None = None,
) -> CycleResult:
    """Evaluate round 1; if anything is deficient, regenerate and re-evaluate.

    With ``always_regenerate`` a deficit-free record still gets a second round
    driven by the generic hold-the-line suggestion, so every first-round
    record appears in the round-2 statistics.
    """
    if feedback.round is not Round.FIRST:
        raise ValueError(f"{feedback.id}: cycles start from first-round records")

    evaluation1 = evaluate_feedback(feedback, question, response, gateway, factory, chunks)
    suggestions = decode_suggestions(evaluation1, simplicity_budget, factory.templates)
    if not suggestions:
        if not always_regenerate:
            return CycleResult(evaluation1, (), None, None)
        suggestions = [fallback_suggestion(simplicity_budget)]

    feedback2 = regenerate(question, response, feedback, suggestions, gateway, factory)
    evaluation2 = evaluate_feedback(feedback2, question, response, gateway, factory, chunks)
    return CycleResult(evaluation1, tuple(suggestions), feedback2, evaluation2)
