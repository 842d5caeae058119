"""Learner-centered quiz feedback: generate, evaluate with a rubric, and
regenerate from decoded suggestions, with a fully replayable model gateway
and the statistics suite used to measure the before/after improvement."""

from .agreement import AgreementReport, agreement_metrics, cohen_kappa, load_human_codes
from .config import ConfigError, RunConfig, load_config
from .evaluation import EvaluationError, evaluate_feedback, parse_evaluation, word_count
from .gateway import (ChatGateway, ChatRequest, ChatResponse, GatewayMode,
                      MissingRecordingError, RetryPolicy, cache_key, with_retry)
from .model import (CourseDataset, Evaluation, FeedbackRecord, Method, QuizItem,
                    StudentResponse, enumerate_methods, expected_fanout,
                    validate_dataset)
from .pipeline import Pipeline, RunResult, resume, run_pipeline
from .prompts import PromptBundle, PromptFactory, TemplateSet
from .regenerate import (CycleResult, Suggestion, decode_suggestions, regenerate,
                         run_refinement_cycle)
from .retrieval import (RetrievalResult, SlideChunk, build_index, cosine_similarity,
                        ingest_slides, retrieve_top_k)
from .stats import (MethodTable, PairedSamples, TestResult, count_percentage,
                    feature_means, improvement_table, level_increase_histogram,
                    paired_t_test, wilcoxon_signed_rank)

__version__ = "0.1.0"
