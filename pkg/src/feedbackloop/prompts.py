"""Every prompt in the system, built from versioned template files.

Templates are data, not code: one file per generation method plus the
evaluator and regenerator templates, with ``{name}`` placeholders. The loader
rejects unknown placeholders up front, and all builders are pure, so a given
set of inputs always renders to byte-identical request content. Retrieved
slide text is the only part a builder will truncate to honor the prompt
token budget; questions and responses are never cut.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .gateway import ChatRequest, build_request
from .model import (FeedbackRecord, Framework, Method, QuestionKind, QuizItem,
                    Round, Strategy, StudentResponse)
from .retrieval import RetrievalResult, SlideChunk


class TemplateError(Exception):
    """Raised when a template file is missing, malformed, or uses unknown placeholders."""


class PromptContractError(ValueError):
    """Raised when a builder is called with inputs that violate its contract."""


_PLACEHOLDER_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")

_GENERATION_PLACEHOLDERS = {"question", "response", "slides", "framework", "length_hint"}
_ALLOWED_PLACEHOLDERS = {
    "generate_zero_shot_none": _GENERATION_PLACEHOLDERS,
    "generate_zero_shot_learner": _GENERATION_PLACEHOLDERS,
    "generate_zero_shot_knowledge": _GENERATION_PLACEHOLDERS,
    "generate_rag_cot_none": _GENERATION_PLACEHOLDERS,
    "generate_rag_cot_learner": _GENERATION_PLACEHOLDERS,
    "generate_rag_cot_knowledge": _GENERATION_PLACEHOLDERS,
    "evaluate": {"rubric", "question", "response", "slides", "feedback",
                 "slides_verdict", "slides_instruction"},
    "regenerate": {"question", "response", "feedback", "suggestions"},
    "framework_learner": set(),
    "framework_knowledge": set(),
    "rubric": set(),
}

_LEARNER_VOCABULARY = ("critiques", "strengths", "actionable", "agency",
                       "positive", "usable", "relationship", "dialogue", "independence")
_KNOWLEDGE_VOCABULARY = ("task", "process", "self-regulation", "self")

SCHEMA_SECTION_MARKER = "## Output format"


def placeholders_in(template: str) -> set[str]:
    return set(_PLACEHOLDER_RE.findall(template))


def render(template: str, values: Mapping[str, str]) -> str:
    """Substitute known placeholders; literal braces elsewhere pass through."""
    return _PLACEHOLDER_RE.sub(lambda match: str(values[match.group(1)]), template)


def default_template_dir() -> Path:
    return Path(str(resources.files("feedbackloop") / "templates"))


@dataclass(frozen=True)
class TemplateSet:
    """All prompt templates plus the suggestion decode table, loaded and checked."""

    texts: dict[str, str]
    suggestion_templates: dict[str, str]

    @classmethod
    def load(cls, directory: Path | None = None) -> "TemplateSet":
        directory = directory or default_template_dir()
        texts: dict[str, str] = {}
        for name, allowed in _ALLOWED_PLACEHOLDERS.items():
            path = directory / f"{name}.txt"
            if not path.exists():
                raise TemplateError(f"missing template file: {path}")
            body = path.read_text(encoding="utf-8")
            unknown = placeholders_in(body) - allowed
            if unknown:
                raise TemplateError(
                    f"{path.name}: unknown placeholder(s) {sorted(unknown)}; "
                    f"allowed: {sorted(allowed)}")
            texts[name] = body

        for vocabulary, name in ((_LEARNER_VOCABULARY, "framework_learner"),
                                 (_KNOWLEDGE_VOCABULARY, "framework_knowledge")):
            lowered = texts[name].lower()
            missing = [word for word in vocabulary if word not in lowered]
            if missing:
                raise TemplateError(f"{name}.txt must name {missing}")

        suggestions_path = directory / "suggestions.tsv"
        if not suggestions_path.exists():
            raise TemplateError(f"missing suggestion templates: {suggestions_path}")
        suggestion_templates: dict[str, str] = {}
        for line_number, line in enumerate(
                suggestions_path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            if "\t" not in line:
                raise TemplateError(f"suggestions.tsv:{line_number}: expected target<TAB>text")
            target, text = line.split("\t", 1)
            suggestion_templates[target.strip()] = text.strip()
        return cls(texts=texts, suggestion_templates=suggestion_templates)

    def framework_body(self, framework: Framework) -> str:
        return self.texts[f"framework_{framework.value}"]

    def rubric(self) -> str:
        return self.texts["rubric"]


@dataclass(frozen=True)
class PromptSettings:
    """Model-call parameters shared by all builders."""

    model: str = "gpt-4o"
    temperature_generate: float = 0.7
    temperature_evaluate: float = 0.0
    max_output_tokens: int = 1024
    prompt_token_budget: int = 3000
    length_hint: str | None = None


@dataclass(frozen=True)
class Provenance:
    role: str  # generate | evaluate | regenerate
    method_key: str | None
    record_ids: tuple[str, ...]


@dataclass(frozen=True)
class PromptBundle:
    request: ChatRequest
    provenance: Provenance
    truncated: bool = False


def render_question(question: QuizItem) -> str:
    lines = [question.stem]
    if question.kind is QuestionKind.MULTIPLE_CHOICE:
        lines.append("Options:")
        for index, option in enumerate(question.options):
            lines.append(f"{chr(ord('A') + index)}. {option}")
        lines.append(f"Correct answer: {question.answer_key}")
    else:
        lines.append("(open-ended question)")
    return "\n".join(lines)


def render_slides(chunk_ids: Sequence[str], chunks: Mapping[str, SlideChunk]) -> str:
    blocks = []
    for chunk_id in chunk_ids:
        chunk = chunks[chunk_id]
        blocks.append(f"[{chunk.source_deck}, part {chunk.ordinal + 1}]\n{chunk.text}")
    return "\n\n".join(blocks)


def approx_tokens(text: str) -> int:
    return len(text.split())


class PromptFactory:
    """Builds generation, evaluation, and regeneration prompts from templates."""

    def __init__(self, templates: TemplateSet | None = None,
                 settings: PromptSettings | None = None):
        self.templates = templates or TemplateSet.load()
        self.settings = settings or PromptSettings()

    # -- generation ---------------------------------------------------------

    def build_generation_prompt(
        self,
        method: Method,
        question: QuizItem,
        response: StudentResponse,
        retrieved: RetrievalResult | None = None,
        chunks: Mapping[str, SlideChunk] | None = None,
    ) -> PromptBundle:
        if method.strategy is Strategy.RAG_COT and retrieved is None:
            raise PromptContractError(f"method {method.key} requires retrieval results")
        if method.strategy is Strategy.ZERO_SHOT and retrieved is not None:
            raise PromptContractError(f"method {method.key} must not receive retrieval results")
        if retrieved is not None and chunks is None:
            raise PromptContractError("retrieved chunks need their chunk texts")

        template = self.templates.texts[f"generate_{method.key}"]
        values = {
            "question": render_question(question),
            "response": response.text,
            "framework": (self.templates.framework_body(method.framework)
                          if method.framework is not Framework.NONE else ""),
            "length_hint": self.settings.length_hint or "",
            "slides": "",
        }

        truncated = False
        if retrieved is not None:
            slides_text = render_slides(retrieved.chunk_ids(), chunks or {})
            base_tokens = approx_tokens(render(template, values))
            allowance = self.settings.prompt_token_budget - base_tokens
            slides_text, truncated = _truncate_to_allowance(slides_text, allowance)
            values["slides"] = slides_text

        content = render(template, values)
        request = build_request(
            model=self.settings.model,
            user_content=content,
            temperature=self.settings.temperature_generate,
            max_output_tokens=self.settings.max_output_tokens,
        )
        return PromptBundle(
            request=request,
            provenance=Provenance("generate", method.key, (question.id, response.id)),
            truncated=truncated,
        )

    # -- evaluation ---------------------------------------------------------

    def build_evaluation_prompt(
        self,
        feedback: FeedbackRecord,
        question: QuizItem,
        response: StudentResponse,
        rubric: str | None = None,
        chunks: Mapping[str, SlideChunk] | None = None,
    ) -> PromptBundle:
        if not feedback.text.strip():
            raise PromptContractError(f"{feedback.id}: cannot evaluate empty feedback text")

        has_slides = bool(feedback.retrieved_slides)
        if has_slides:
            slides = render_slides(feedback.retrieved_slides, chunks or {})
            slides_verdict = "true"
            slides_instruction = ("Set retrieved_slides_accuracy to true or false, judging "
                                  "the relevance of the slides shown above.")
        else:
            slides = "(no slides were shown; this feedback was written without retrieval)"
            slides_verdict = '"not applicable"'
            slides_instruction = ('Set retrieved_slides_accuracy to "not applicable" because '
                                  "no slides were shown.")

        content = render(self.templates.texts["evaluate"], {
            "rubric": rubric if rubric is not None else self.templates.rubric(),
            "question": render_question(question),
            "response": response.text,
            "slides": slides,
            "feedback": feedback.text,
            "slides_verdict": slides_verdict,
            "slides_instruction": slides_instruction,
        })
        request = build_request(
            model=self.settings.model,
            user_content=content,
            temperature=self.settings.temperature_evaluate,
            max_output_tokens=self.settings.max_output_tokens,
        )
        return PromptBundle(
            request=request,
            provenance=Provenance("evaluate", feedback.method.key, (feedback.id,)),
        )

    # -- regeneration -------------------------------------------------------

    def build_regeneration_prompt(
        self,
        question: QuizItem,
        response: StudentResponse,
        previous: FeedbackRecord,
        suggestions: Sequence[str],
    ) -> PromptBundle:
        if previous.round is not Round.FIRST:
            raise PromptContractError(
                f"{previous.id}: regeneration starts from a first-round record")
        if not suggestions:
            raise PromptContractError(
                f"{previous.id}: regeneration without suggestions is skipped upstream")

        numbered = "\n".join(f"{i}. {text}" for i, text in enumerate(suggestions, start=1))
        content = render(self.templates.texts["regenerate"], {
            "question": render_question(question),
            "response": response.text,
            "feedback": previous.text,
            "suggestions": numbered,
        })
        request = build_request(
            model=self.settings.model,
            user_content=content,
            temperature=self.settings.temperature_generate,
            max_output_tokens=self.settings.max_output_tokens,
        )
        return PromptBundle(
            request=request,
            provenance=Provenance("regenerate", previous.method.key, (previous.id,)),
        )


def _truncate_to_allowance(text: str, allowance: int) -> tuple[str, bool]:
    tokens = text.split()
    if len(tokens) <= allowance:
        return text, False
    if allowance <= 0:
        return "", True
    return " ".join(tokens[:allowance]), True
