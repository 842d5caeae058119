"""The evaluation agent: prompt the model with the rubric, parse its JSON
verdict, and attach the locally computed word count.

The model's output is expected to be chain-of-thought prose with exactly one
JSON object somewhere inside it; parsing extracts the first object that
decodes, then validates presence, types, and ranges of every field. A parse
failure triggers one reformat retry before the record is marked failed, so a
single bad completion never silently drops data or aborts the run.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from typing import Mapping

from .gateway import ChatGateway, ChatRequest, Message
from .model import Evaluation, FeedbackRecord, QuizItem, Source, StudentResponse
from .prompts import PromptFactory
from .retrieval import SlideChunk

logger = logging.getLogger(__name__)


class EvaluationParseError(Exception):
    """Base class for verdict-parsing failures."""


class NoJsonObjectError(EvaluationParseError):
    """The model output contains no decodable JSON object."""


class MissingFieldError(EvaluationParseError):
    """The verdict object lacks a required key."""


class FieldValueError(EvaluationParseError):
    """A verdict value is out of range or of the wrong type."""


class EvaluationError(Exception):
    """Evaluation failed for one feedback record (recorded, pipeline continues)."""

    def __init__(self, feedback_id: str, message: str):
        super().__init__(f"{feedback_id}: {message}")
        self.feedback_id = feedback_id


def word_count(text: str) -> int:
    """Number of maximal non-whitespace runs, splitting on Unicode whitespace."""
    return len(text.split())


BOOLEAN_KEYS = ("evaluation_accuracy", "c1", "c2", "c3", "c4")
FEATURE_KEYS = ("f1", "f2", "f3", "f4", "f5")
_NOT_APPLICABLE = {"not applicable", "n/a", "na", "none", "null"}


@dataclass(frozen=True)
class ParsedVerdict:
    """The evaluator's verdict fields, before simplicity and ids are attached."""

    evaluation_accuracy: bool
    retrieved_slides_accuracy: bool | None
    c1: bool
    c2: bool
    c3: bool
    c4: bool
    f1: int
    f2: int
    f3: int
    f4: int
    f5: int
    rationale: str


def _first_json_object(raw: str) -> dict:
    decoder = json.JSONDecoder()
    position = raw.find("{")
    while position != -1:
        try:
            value, _ = decoder.raw_decode(raw, position)
        except json.JSONDecodeError:
            position = raw.find("{", position + 1)
            continue
        if isinstance(value, dict):
            return value
        position = raw.find("{", position + 1)
    raise NoJsonObjectError("no JSON object found in evaluator output")


def _as_bool(key: str, value: object) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in ("true", "yes"):
            return True
        if lowered in ("false", "no"):
            return False
    raise FieldValueError(f"{key}: expected a boolean, got {value!r}")


def _as_level(key: str, value: object) -> int:
    if isinstance(value, bool):
        raise FieldValueError(f"{key}: expected an integer level, got {value!r}")
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    if isinstance(value, str) and value.strip().isdigit():
        value = int(value.strip())
    if not isinstance(value, int):
        raise FieldValueError(f"{key}: expected an integer level, got {value!r}")
    if value not in (1, 2, 3):
        raise FieldValueError(f"{key}: level {value} is out of range 1-3")
    return value


def parse_evaluation(raw: str) -> ParsedVerdict:
    """Extract and validate the first JSON verdict object in the model output.

    Raises NoJsonObjectError, MissingFieldError, or FieldValueError so callers
    can tell malformed output apart from out-of-contract values.
    """
    obj = _first_json_object(raw)

    values: dict[str, object] = {}
    for key in BOOLEAN_KEYS + FEATURE_KEYS:
        if key not in obj:
            raise MissingFieldError(f"missing required field {key!r}")
    for key in BOOLEAN_KEYS:
        values[key] = _as_bool(key, obj[key])
    for key in FEATURE_KEYS:
        values[key] = _as_level(key, obj[key])

    slides_value = obj.get("retrieved_slides_accuracy")
    if slides_value is None:
        slides_accuracy = None
    elif isinstance(slides_value, str) and slides_value.strip().lower() in _NOT_APPLICABLE:
        slides_accuracy = None
    else:
        slides_accuracy = _as_bool("retrieved_slides_accuracy", slides_value)

    rationale = obj.get("rationale", "")
    if not isinstance(rationale, str):
        rationale = json.dumps(rationale, ensure_ascii=False)

    return ParsedVerdict(
        evaluation_accuracy=values["evaluation_accuracy"],  # type: ignore[arg-type]
        retrieved_slides_accuracy=slides_accuracy,
        c1=values["c1"], c2=values["c2"], c3=values["c3"], c4=values["c4"],  # type: ignore[arg-type]
        f1=values["f1"], f2=values["f2"], f3=values["f3"],  # type: ignore[arg-type]
        f4=values["f4"], f5=values["f5"],  # type: ignore[arg-type]
        rationale=rationale,
    )


REFORMAT_INSTRUCTION = "Output only the JSON object, with no other text."


def _reformat_retry_request(request: ChatRequest) -> ChatRequest:
    return ChatRequest(
        model=request.model,
        messages=request.messages + (Message("user", REFORMAT_INSTRUCTION),),
        temperature=request.temperature,
        max_output_tokens=request.max_output_tokens,
    )


def evaluate_feedback(
    feedback: FeedbackRecord,
    question: QuizItem,
    response: StudentResponse,
    gateway: ChatGateway,
    factory: PromptFactory,
    chunks: Mapping[str, SlideChunk] | None = None,
) -> Evaluation:
    """Run the evaluation agent on one feedback record.

    Simplicity is always computed locally from the feedback text; the model is
    never asked for it. The slide-accuracy verdict must be present exactly
    when the record carries retrieved slides.
    """
    bundle = factory.build_evaluation_prompt(feedback, question, response, chunks=chunks)
    raw = gateway.complete(bundle.request).content
    try:
        verdict = parse_evaluation(raw)
    except EvaluationParseError as first_error:
        logger.warning("%s: verdict parse failed (%s); retrying with reformat instruction",
                       feedback.id, first_error)
        retry_raw = gateway.complete(_reformat_retry_request(bundle.request)).content
        try:
            verdict = parse_evaluation(retry_raw)
        except EvaluationParseError as second_error:
            raise EvaluationError(
                feedback.id,
                f"verdict unparseable after reformat retry: {second_error}") from second_error

    has_slides = bool(feedback.retrieved_slides)
    if has_slides and verdict.retrieved_slides_accuracy is None:
        raise EvaluationError(
            feedback.id, "evaluator omitted retrieved_slides_accuracy for a retrieval record")
    if not has_slides and verdict.retrieved_slides_accuracy is not None:
        verdict = dataclasses.replace(verdict, retrieved_slides_accuracy=None)

    return Evaluation(
        feedback_id=feedback.id,
        evaluation_accuracy=verdict.evaluation_accuracy,
        retrieved_slides_accuracy=verdict.retrieved_slides_accuracy,
        c1_critiques=verdict.c1,
        c2_strengths=verdict.c2,
        c3_actionable=verdict.c3,
        c4_agency=verdict.c4,
        f1_positive=verdict.f1,
        f2_usable=verdict.f2,
        f3_relationship=verdict.f3,
        f4_dialogue=verdict.f4,
        f5_independence=verdict.f5,
        simplicity=word_count(feedback.text),
        rationale=verdict.rationale,
        source=Source.LLM,
    )
