"""The staged batch pipeline: ingest, generate, evaluate, regenerate,
re-evaluate, report.

Stage granularity is per record: every completed (stage, record) pair is
journaled before the run moves on, so an interrupted run resumes exactly the
work that is missing and an already-complete run is a no-op. Workers run
concurrently up to the configured gateway limit; all artifact files are
rewritten in canonical order at the end of each stage, which is what makes
replay-mode runs byte-identical end to end. Per-record failures are recorded
and skipped past; only their own lineage stops.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .agreement import load_human_codes
from .config import ConfigError, RunConfig
from .evaluation import evaluate_feedback, word_count
from .gateway import (Backend, ChatGateway, GatewayMode, HttpBackend, RetryPolicy,
                      with_retry)
from .journal import RunLedger
from .model import (CourseDataset, Evaluation, FeedbackRecord, Method, Round,
                    Source, StudentResponse, enumerate_methods, load_questions,
                    load_responses, validate_dataset)
from .prompts import PromptFactory, PromptSettings, TemplateSet
from .regenerate import (Suggestion, decode_suggestions, fallback_suggestion,
                         regenerate, second_round_id)
from .reporting import emit_stats
from .retrieval import (CorpusIndex, RetrievalResult, SlideChunk, build_index,
                        load_slides, retrieve_top_k)

logger = logging.getLogger(__name__)

STAGE_GENERATE = "generate"
STAGE_EVALUATE1 = "evaluate1"
STAGE_SUGGEST = "suggest"
STAGE_REGENERATE = "regenerate"
STAGE_EVALUATE2 = "evaluate2"
STAGE_STATS = "stats"


@dataclass
class RecordError:
    stage: str
    record_id: str
    error: str

    def to_dict(self) -> dict:
        return {"stage": self.stage, "record_id": self.record_id, "error": self.error}


@dataclass
class RunResult:
    run_dir: Path
    counts: dict[str, int] = field(default_factory=dict)
    errors: list[RecordError] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 1 if self.errors else 0


def _digest_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_gateway(config: RunConfig, backend: Backend | None = None) -> ChatGateway:
    if config.mode == "replay":
        assert config.cache_path is not None  # enforced by config.validate()
        return ChatGateway(GatewayMode.REPLAY, config.cache_path)
    cache_path = config.cache_path or (config.output_dir / "cache.jsonl")
    if backend is None:
        base_url, api_key = config.api_credentials()
        backend = HttpBackend(base_url, api_key)
    return ChatGateway(GatewayMode.LIVE, cache_path, backend=backend)


def load_dataset(config: RunConfig) -> CourseDataset:
    questions = load_questions(config.questions_path)
    responses = load_responses(config.responses_path)
    slides: tuple[SlideChunk, ...] = ()
    if config.slides_path is not None and config.slides_path.exists():
        slides = tuple(load_slides(config.slides_path, config.chunk_size, config.chunk_overlap))
    return CourseDataset(questions=questions, responses=responses, slides=slides)


class _StageWriter:
    """Appends completed records to a partial file, then finalizes in canonical order."""

    def __init__(self, artifact_path: Path):
        self.artifact_path = artifact_path
        self.partial_path = artifact_path.with_suffix(".partial.jsonl")
        self._lock = threading.Lock()

    def existing_rows(self) -> dict[str, dict]:
        rows: dict[str, dict] = {}
        for path in (self.artifact_path, self.partial_path):
            if not path.exists():
                continue
            with path.open(encoding="utf-8") as handle:
                for line in handle:
                    line = line.strip()
                    if line:
                        row = json.loads(line)
                        rows[self._row_id(row)] = row
        return rows

    @staticmethod
    def _row_id(row: dict) -> str:
        return row.get("id") or row.get("feedback_id")

    def append(self, row: dict) -> None:
        with self._lock:
            self.partial_path.parent.mkdir(parents=True, exist_ok=True)
            with self.partial_path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")

    def finalize(self, ordered_rows: Sequence[dict]) -> None:
        self.artifact_path.parent.mkdir(parents=True, exist_ok=True)
        with self.artifact_path.open("w", encoding="utf-8") as handle:
            for row in ordered_rows:
                handle.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
        if self.partial_path.exists():
            self.partial_path.unlink()


class Pipeline:
    def __init__(self, config: RunConfig, gateway: ChatGateway | None = None):
        config.validate()
        self.config = config
        self.run_dir = config.output_dir
        self.run_dir.mkdir(parents=True, exist_ok=True)

        self.dataset = load_dataset(config)
        violations = validate_dataset(self.dataset)
        if violations:
            details = "; ".join(f"{v.record_id}: {v.rule}" for v in violations[:10])
            raise ConfigError(f"dataset failed validation ({len(violations)} violations): {details}")

        self.methods = [m for m in enumerate_methods() if m.key in config.methods]
        self.questions = self.dataset.question_by_id()
        self.gateway = gateway or build_gateway(config)
        self.retry_policy = RetryPolicy(max_attempts=config.max_attempts)

        templates = TemplateSet.load(config.templates_dir)
        self.factory = PromptFactory(templates, PromptSettings(
            model=config.model,
            temperature_generate=config.temperature_generate,
            temperature_evaluate=config.temperature_evaluate,
            max_output_tokens=config.max_output_tokens,
            prompt_token_budget=config.prompt_token_budget,
            length_hint=config.length_hint,
        ))

        self.index: CorpusIndex | None = None
        self.chunks: dict[str, SlideChunk] = {}
        if any(m.strategy.value == "rag_cot" for m in self.methods):
            if not self.dataset.slides:
                raise ConfigError("RAG methods configured but no slide corpus was loaded")
            self.index = build_index(self.dataset.slides)
            self.chunks = dict(self.index.chunks)

        self.errors: list[RecordError] = []

    # -- plumbing ------------------------------------------------------------

    def _snapshot_config(self) -> None:
        snapshot_path = self.run_dir / "config.json"
        payload = self.config.to_json_dict()
        if snapshot_path.exists():
            existing = json.loads(snapshot_path.read_text(encoding="utf-8"))
            existing_digest = _config_digest_from_snapshot(existing)
            if existing_digest != self.config.digest():
                raise ConfigError(
                    "config drift: this run directory was created with a different "
                    "configuration; start a fresh output directory or restore the "
                    "original config")
            return
        snapshot_path.write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def _input_digests(self) -> dict[str, str]:
        digests = {
            "questions": _digest_file(self.config.questions_path),
            "responses": _digest_file(self.config.responses_path),
        }
        if self.config.slides_path is not None and self.config.slides_path.exists():
            digests["slides"] = _digest_file(self.config.slides_path)
        return digests

    def _run_stage(
        self,
        stage: str,
        ledger: RunLedger,
        items: Sequence[tuple[str, object]],
        execute: Callable[[object], dict],
        artifact_name: str,
    ) -> dict[str, dict]:
        """Run one stage over its work items, journaling each completion.

        Returns record id -> serialized row for every item that has completed
        (now or in a previous attempt), in no particular order; the artifact
        file itself is finalized in the items' canonical order.
        """
        writer = _StageWriter(self.run_dir / artifact_name)
        existing = writer.existing_rows()
        done: dict[str, dict] = {}
        pending: list[tuple[str, object]] = []
        for record_id, payload in items:
            if ledger.is_done(stage, record_id) and record_id in existing:
                done[record_id] = existing[record_id]
            else:
                pending.append((record_id, payload))

        def worker(item: tuple[str, object]) -> tuple[str, dict | None, str | None]:
            record_id, payload = item
            try:
                row = execute(payload)
            except Exception as exc:  # per-record failure: record and continue
                logger.warning("%s failed for %s: %s", stage, record_id, exc)
                return record_id, None, str(exc)
            return record_id, row, None

        if pending:
            with ThreadPoolExecutor(max_workers=self.config.concurrency) as pool:
                for record_id, row, error in pool.map(worker, pending):
                    if error is not None:
                        self.errors.append(RecordError(stage, record_id, error))
                        continue
                    assert row is not None
                    writer.append(row)
                    ledger.mark_done(stage, record_id)
                    done[record_id] = row

        ordered = [done[record_id] for record_id, _ in items if record_id in done]
        writer.finalize(ordered)
        return done

    # -- stages --------------------------------------------------------------

    def _generation_items(self) -> list[tuple[str, tuple[Method, StudentResponse]]]:
        return [
            (f"{method.key}:{response.id}:r1", (method, response))
            for method in self.methods
            for response in self.dataset.responses
        ]

    def _generate_one(self, payload: tuple[Method, StudentResponse]) -> dict:
        method, response = payload
        question = self.questions[response.question_id]
        retrieved: RetrievalResult | None = None
        if method.strategy.value == "rag_cot":
            assert self.index is not None
            query = f"{question.stem} {response.text}"
            retrieved = retrieve_top_k(query, self.index, self.config.retrieval_k)
        bundle = self.factory.build_generation_prompt(
            method, question, response, retrieved, self.chunks if retrieved else None)
        completion = with_retry(self.gateway, bundle.request, self.retry_policy)
        record = FeedbackRecord(
            id=f"{method.key}:{response.id}:r1",
            response_id=response.id,
            method=method,
            round=Round.FIRST,
            text=completion.content,
            retrieved_slides=retrieved.chunk_ids() if retrieved else (),
        )
        return record.to_dict()

    def _evaluate_one(self, record: FeedbackRecord) -> dict:
        response = self._response_for(record)
        question = self.questions[response.question_id]
        evaluation = evaluate_feedback(record, question, response, self.gateway,
                                       self.factory, self.chunks)
        return evaluation.to_dict()

    def _response_for(self, record: FeedbackRecord) -> StudentResponse:
        for response in self.dataset.responses:
            if response.id == record.response_id:
                return response
        raise KeyError(f"response {record.response_id} not in dataset")

    def _suggest_one(self, payload: tuple[FeedbackRecord, Evaluation]) -> dict:
        record, evaluation = payload
        suggestions = decode_suggestions(evaluation, self.config.simplicity_budget,
                                         self.factory.templates)
        if not suggestions and self.config.always_regenerate:
            suggestions = [fallback_suggestion(self.config.simplicity_budget)]
        return {
            "feedback_id": record.id,
            "suggestions": [s.to_dict() for s in suggestions],
        }

    def _regenerate_one(self, payload: tuple[FeedbackRecord, list[Suggestion]]) -> dict:
        record, suggestions = payload
        response = self._response_for(record)
        question = self.questions[response.question_id]
        second = regenerate(question, response, record, suggestions, self.gateway, self.factory)
        return second.to_dict()

    def _human_evaluation(self, record: FeedbackRecord) -> Evaluation | None:
        assert self.config.human_codes_path is not None
        codes = self._human_codes
        code = codes.get(record.id)
        if code is None:
            return None
        return Evaluation(
            feedback_id=record.id,
            simplicity=word_count(record.text),
            rationale="",
            source=Source.HUMAN,
            **code.values,
        )

    # -- the run -------------------------------------------------------------

    def run(self) -> RunResult:
        self._snapshot_config()
        ledger = RunLedger(self.run_dir / "ledger.jsonl")
        ledger.write_header(self.config.digest(), self._input_digests())

        if self.config.suggestion_source == "human":
            self._human_codes = load_human_codes(self.config.human_codes_path)

        # Stage 1: first-round generation.
        generation_items = self._generation_items()
        feedback1_rows = self._run_stage(
            STAGE_GENERATE, ledger, generation_items, self._generate_one,
            "feedback_round1.jsonl")
        feedback1 = {rid: FeedbackRecord.from_dict(row) for rid, row in feedback1_rows.items()}

        # Stage 2: first-round evaluation.
        evaluate_items = [(rid, feedback1[rid])
                          for rid, _ in generation_items if rid in feedback1]
        evals1_rows = self._run_stage(
            STAGE_EVALUATE1, ledger, evaluate_items, self._evaluate_one,
            "evaluations_round1.jsonl")
        evals1 = {rid: Evaluation.from_dict(row) for rid, row in evals1_rows.items()}

        # Stage 3: decode suggestions (from the configured evaluation source).
        suggest_items = []
        for rid, _ in evaluate_items:
            if rid not in feedback1:
                continue
            if self.config.suggestion_source == "human":
                evaluation = self._human_evaluation(feedback1[rid])
                if evaluation is None:
                    self.errors.append(RecordError(
                        STAGE_SUGGEST, rid, "no human code row for this feedback id"))
                    continue
            else:
                evaluation = evals1.get(rid)
                if evaluation is None:
                    continue  # evaluation failed upstream; lineage stops here
            suggest_items.append((rid, (feedback1[rid], evaluation)))
        suggestion_rows = self._run_stage(
            STAGE_SUGGEST, ledger, suggest_items, self._suggest_one, "suggestions.jsonl")

        # Stage 4: regeneration for every record with suggestions.
        regen_items = []
        for rid, _ in suggest_items:
            row = suggestion_rows.get(rid)
            if not row or not row["suggestions"]:
                continue
            suggestions = [Suggestion.from_dict(s) for s in row["suggestions"]]
            regen_items.append((second_round_id(feedback1[rid]),
                                (feedback1[rid], suggestions)))
        feedback2_rows = self._run_stage(
            STAGE_REGENERATE, ledger, regen_items, self._regenerate_one,
            "feedback_round2.jsonl")
        feedback2 = {rid: FeedbackRecord.from_dict(row) for rid, row in feedback2_rows.items()}

        # Stage 5: second-round evaluation.
        evaluate2_items = [(rid, feedback2[rid])
                           for rid, _ in regen_items if rid in feedback2]
        self._run_stage(STAGE_EVALUATE2, ledger, evaluate2_items, self._evaluate_one,
                        "evaluations_round2.jsonl")

        # Stage 6: statistics tables (deterministic, so re-emitting is harmless).
        emit_stats(self.run_dir, method_keys=[m.key for m in self.methods])
        if not ledger.is_done(STAGE_STATS, "run"):
            ledger.mark_done(STAGE_STATS, "run")

        self._write_errors()
        counts = {
            "responses": len(self.dataset.responses),
            "methods": len(self.methods),
            "feedback_round1": len(feedback1_rows),
            "evaluations_round1": len(evals1_rows),
            "suggestions": len(suggestion_rows),
            "feedback_round2": len(feedback2_rows),
            "evaluations_round2": len(evaluate2_items),
        }
        return RunResult(run_dir=self.run_dir, counts=counts, errors=list(self.errors))

    def _write_errors(self) -> None:
        errors_path = self.run_dir / "errors.jsonl"
        if not self.errors:
            if errors_path.exists():
                errors_path.unlink()
            return
        ordered = sorted(self.errors, key=lambda e: (e.stage, e.record_id))
        with errors_path.open("w", encoding="utf-8") as handle:
            for error in ordered:
                handle.write(json.dumps(error.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def run_pipeline(config: RunConfig, gateway: ChatGateway | None = None) -> RunResult:
    """Execute (or continue) a full run under the given configuration."""
    return Pipeline(config, gateway=gateway).run()


def resume(run_dir: Path, gateway: ChatGateway | None = None) -> RunResult:
    """Continue an interrupted run from its own config snapshot and ledger."""
    snapshot_path = run_dir / "config.json"
    if not snapshot_path.exists():
        raise ConfigError(f"not a run directory (no config.json): {run_dir}")
    config = config_from_snapshot(json.loads(snapshot_path.read_text(encoding="utf-8")),
                                  output_dir=run_dir)
    return run_pipeline(config, gateway=gateway)


def config_from_snapshot(payload: dict, output_dir: Path) -> RunConfig:
    def path_or_none(value):
        return None if value is None else Path(value)

    return RunConfig(
        questions_path=Path(payload["questions_path"]),
        responses_path=Path(payload["responses_path"]),
        slides_path=path_or_none(payload.get("slides_path")),
        output_dir=output_dir,
        mode=payload["mode"],
        cache_path=path_or_none(payload.get("cache_path")),
        templates_dir=path_or_none(payload.get("templates_dir")),
        model=payload["model"],
        base_url=payload.get("base_url"),
        temperature_generate=payload["temperature_generate"],
        temperature_evaluate=payload["temperature_evaluate"],
        max_output_tokens=payload["max_output_tokens"],
        concurrency=payload["concurrency"],
        max_attempts=payload["max_attempts"],
        retrieval_k=payload["retrieval_k"],
        chunk_size=payload["chunk_size"],
        chunk_overlap=payload["chunk_overlap"],
        methods=tuple(payload["methods"]),
        simplicity_budget=payload["simplicity_budget"],
        always_regenerate=payload["always_regenerate"],
        suggestion_source=payload["suggestion_source"],
        human_codes_path=path_or_none(payload.get("human_codes_path")),
        prompt_token_budget=payload["prompt_token_budget"],
        length_hint=payload.get("length_hint"),
    )


def _config_digest_from_snapshot(payload: dict) -> str:
    return config_from_snapshot(payload, output_dir=Path(payload["output_dir"])).digest()
