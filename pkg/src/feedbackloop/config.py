"""Run configuration: one JSON file mirroring RunConfig, with relative paths
resolved against the config file's directory so fixture configs stay portable.

The config digest covers every field except the output directory, so a run
directory can be moved or re-targeted and still resume, while any change to
the inputs or parameters is refused as config drift.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

from .model import METHOD_KEYS

API_BASE_ENV = "FEEDBACKLOOP_API_BASE"
API_KEY_ENV = "FEEDBACKLOOP_API_KEY"


class ConfigError(Exception):
    """Configuration or validation problem; maps to exit code 2."""


@dataclass
class RunConfig:
    questions_path: Path
    responses_path: Path
    slides_path: Path | None
    output_dir: Path
    mode: str = "replay"  # live | replay
    cache_path: Path | None = None
    templates_dir: Path | None = None
    model: str = "gpt-4o"
    base_url: str | None = None
    temperature_generate: float = 0.7
    temperature_evaluate: float = 0.0
    max_output_tokens: int = 1024
    concurrency: int = 4
    max_attempts: int = 3
    retrieval_k: int = 3
    chunk_size: int = 120
    chunk_overlap: int = 30
    methods: tuple[str, ...] = METHOD_KEYS
    simplicity_budget: int = 120
    always_regenerate: bool = True
    suggestion_source: str = "llm"  # llm | human
    human_codes_path: Path | None = None
    prompt_token_budget: int = 3000
    length_hint: str | None = None

    def validate(self) -> None:
        if self.mode not in ("live", "replay"):
            raise ConfigError(f"mode must be 'live' or 'replay', got {self.mode!r}")
        if not self.methods:
            raise ConfigError("methods list must be non-empty")
        unknown = [m for m in self.methods if m not in METHOD_KEYS]
        if unknown:
            raise ConfigError(f"unknown method keys {unknown}; valid: {list(METHOD_KEYS)}")
        if self.mode == "replay":
            if self.cache_path is None or not self.cache_path.exists():
                raise ConfigError(
                    f"replay mode requires an existing cache file (got {self.cache_path})")
        if self.suggestion_source not in ("llm", "human"):
            raise ConfigError(
                f"suggestion_source must be 'llm' or 'human', got {self.suggestion_source!r}")
        if self.suggestion_source == "human" and self.human_codes_path is None:
            raise ConfigError("suggestion_source 'human' requires human_codes_path")
        if not self.questions_path.exists():
            raise ConfigError(f"questions file not found: {self.questions_path}")
        if not self.responses_path.exists():
            raise ConfigError(f"responses file not found: {self.responses_path}")
        if self.chunk_size <= 0 or not 0 <= self.chunk_overlap < self.chunk_size:
            raise ConfigError("retrieval chunking needs chunk_size > overlap >= 0")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be at least 1")

    def digest(self) -> str:
        """Stable digest of everything except the output directory."""
        payload = {k: (str(v) if isinstance(v, Path) else list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(self).items() if k != "output_dir"}
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_json_dict(self) -> dict:
        return {k: (str(v) if isinstance(v, Path) else list(v) if isinstance(v, tuple) else v)
                for k, v in asdict(self).items()}

    def api_credentials(self) -> tuple[str, str]:
        base = self.base_url or os.environ.get(API_BASE_ENV) or "https://api.openai.com/v1"
        key = os.environ.get(API_KEY_ENV, "")
        if not key:
            raise ConfigError(f"live mode requires the {API_KEY_ENV} environment variable")
        return base, key


def _optional_path(base: Path, value) -> Path | None:
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else (base / path)


def load_config(path: Path, output_override: Path | None = None,
                mode_override: str | None = None) -> RunConfig:
    """Parse a config JSON file, resolving relative paths against its directory."""
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc

    base = path.resolve().parent
    dataset = raw.get("dataset") or {}
    gateway = raw.get("gateway") or {}
    retrieval = raw.get("retrieval") or {}

    try:
        config = RunConfig(
            questions_path=_optional_path(base, dataset["questions"]),
            responses_path=_optional_path(base, dataset["responses"]),
            slides_path=_optional_path(base, dataset.get("slides")),
            output_dir=(output_override or _optional_path(base, raw.get("output_dir"))
                        or Path("run-output")),
            mode=mode_override or gateway.get("mode", "replay"),
            cache_path=_optional_path(base, gateway.get("cache_path")),
            templates_dir=_optional_path(base, raw.get("templates_dir")),
            model=gateway.get("model", "gpt-4o"),
            base_url=gateway.get("base_url"),
            temperature_generate=gateway.get("temperature_generate", 0.7),
            temperature_evaluate=gateway.get("temperature_evaluate", 0.0),
            max_output_tokens=gateway.get("max_output_tokens", 1024),
            concurrency=gateway.get("concurrency", 4),
            max_attempts=gateway.get("max_attempts", 3),
            retrieval_k=retrieval.get("k", 3),
            chunk_size=retrieval.get("chunk_size", 120),
            chunk_overlap=retrieval.get("overlap", 30),
            methods=tuple(raw.get("methods") or METHOD_KEYS),
            simplicity_budget=raw.get("simplicity_budget", 120),
            always_regenerate=raw.get("always_regenerate", True),
            suggestion_source=raw.get("suggestion_source", "llm"),
            human_codes_path=_optional_path(base, raw.get("human_codes_path")),
            prompt_token_budget=raw.get("prompt_token_budget", 3000),
            length_hint=raw.get("length_hint"),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing required config key {exc}") from exc
    config.validate()
    return config
