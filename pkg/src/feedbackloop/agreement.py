"""Agreement between the model's rubric verdicts and human coding.

Covers Cohen's kappa for coder-to-coder reliability and per-sub-indicator
accuracy/precision/recall/F1 for model-to-human agreement. Boolean
sub-indicators score the True class; three-level features are macro-averaged
over the fixed classes {1, 2, 3}, which keeps minority-class failures visible
under heavy class imbalance. A sub-indicator with no predicted positives gets
precision 0 and is flagged in its support counts.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Mapping, Sequence

from .model import Evaluation

INDICATORS = (
    "evaluation_accuracy",
    "retrieved_slides_accuracy",
    "c1_critiques",
    "c2_strengths",
    "c3_actionable",
    "c4_agency",
    "f1_positive",
    "f2_usable",
    "f3_relationship",
    "f4_dialogue",
    "f5_independence",
)

BOOLEAN_INDICATORS = INDICATORS[:6]
FEATURE_INDICATORS = INDICATORS[6:]
FEATURE_CLASSES = (1, 2, 3)


class AgreementError(ValueError):
    """Raised for unusable agreement inputs (length mismatch, unmatched ids)."""


def cohen_kappa(coder_a: Sequence[Hashable], coder_b: Sequence[Hashable]) -> float:
    """Chance-corrected agreement between two equal-length label sequences.

    Returns exactly 1.0 in the degenerate case where both coders used a
    single identical label throughout (observed and expected agreement both
    1, so the usual ratio is 0/0).
    """
    if len(coder_a) != len(coder_b):
        raise AgreementError(
            f"label sequences differ in length: {len(coder_a)} vs {len(coder_b)}")
    if not coder_a:
        raise AgreementError("label sequences must be non-empty")

    n = len(coder_a)
    observed = sum(1 for a, b in zip(coder_a, coder_b) if a == b) / n
    counts_a = Counter(coder_a)
    counts_b = Counter(coder_b)
    expected = sum(counts_a[label] * counts_b.get(label, 0) for label in counts_a) / (n * n)
    if expected == 1.0:
        return 1.0
    return (observed - expected) / (1.0 - expected)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


def _class_metrics(predicted: Sequence[Hashable], actual: Sequence[Hashable],
                   positive: Hashable) -> tuple[ClassMetrics, dict[str, int]]:
    tp = sum(1 for p, a in zip(predicted, actual) if p == positive and a == positive)
    fp = sum(1 for p, a in zip(predicted, actual) if p == positive and a != positive)
    fn = sum(1 for p, a in zip(predicted, actual) if p != positive and a == positive)
    tn = len(predicted) - tp - fp - fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClassMetrics(precision, recall, f1), {"tp": tp, "fp": fp, "fn": fn, "tn": tn}


@dataclass(frozen=True)
class AgreementRow:
    """Agreement metrics for one rubric sub-indicator."""

    indicator: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    support: dict

    def to_dict(self) -> dict:
        return {
            "indicator": self.indicator,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
        }


@dataclass(frozen=True)
class AgreementReport:
    rows: tuple[AgreementRow, ...]

    def row(self, indicator: str) -> AgreementRow:
        for row in self.rows:
            if row.indicator == indicator:
                return row
        raise KeyError(indicator)


def boolean_agreement(predicted: Sequence[bool], actual: Sequence[bool],
                      indicator: str) -> AgreementRow:
    metrics, confusion = _class_metrics(predicted, actual, positive=True)
    accuracy = sum(1 for p, a in zip(predicted, actual) if p == a) / len(predicted)
    support = {"n": len(predicted), **confusion,
               "zero_predicted_positive": confusion["tp"] + confusion["fp"] == 0}
    return AgreementRow(indicator, accuracy, metrics.precision, metrics.recall,
                        metrics.f1, support)


def multiclass_agreement(predicted: Sequence[int], actual: Sequence[int],
                         indicator: str) -> AgreementRow:
    accuracy = sum(1 for p, a in zip(predicted, actual) if p == a) / len(predicted)
    per_class = [_class_metrics(predicted, actual, positive=cls)[0] for cls in FEATURE_CLASSES]
    precision = sum(m.precision for m in per_class) / len(FEATURE_CLASSES)
    recall = sum(m.recall for m in per_class) / len(FEATURE_CLASSES)
    f1 = sum(m.f1 for m in per_class) / len(FEATURE_CLASSES)
    support = {
        "n": len(predicted),
        "actual_counts": {cls: sum(1 for a in actual if a == cls) for cls in FEATURE_CLASSES},
        "zero_predicted_positive": any(
            all(p != cls for p in predicted) for cls in FEATURE_CLASSES),
    }
    return AgreementRow(indicator, accuracy, precision, recall, f1, support)


@dataclass(frozen=True)
class HumanCode:
    """One human coder row, carrying the 11 agreement sub-indicators."""

    feedback_id: str
    values: dict  # indicator name -> bool | int | None


def load_human_codes(path: Path) -> dict[str, HumanCode]:
    """Import the human-coding CSV (booleans true/false, N/A as empty cell)."""
    expected_header = ["feedback_id", "evaluation_accuracy", "retrieved_slides_accuracy",
                       "c1", "c2", "c3", "c4", "f1", "f2", "f3", "f4", "f5"]
    short_to_field = {
        "evaluation_accuracy": "evaluation_accuracy",
        "retrieved_slides_accuracy": "retrieved_slides_accuracy",
        "c1": "c1_critiques", "c2": "c2_strengths",
        "c3": "c3_actionable", "c4": "c4_agency",
        "f1": "f1_positive", "f2": "f2_usable", "f3": "f3_relationship",
        "f4": "f4_dialogue", "f5": "f5_independence",
    }

    rows: dict[str, HumanCode] = {}
    with path.open(encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != expected_header:
            raise AgreementError(
                f"{path}: expected header {','.join(expected_header)}, "
                f"got {','.join(reader.fieldnames or [])}")
        for line_number, row in enumerate(reader, start=2):
            feedback_id = row["feedback_id"]
            values: dict = {}
            for short, field_name in short_to_field.items():
                cell = (row[short] or "").strip()
                if short.startswith(("c", "evaluation", "retrieved")):
                    if cell == "":
                        if short == "retrieved_slides_accuracy":
                            values[field_name] = None
                            continue
                        raise AgreementError(f"{path}:{line_number}: empty cell for {short}")
                    if cell.lower() not in ("true", "false"):
                        raise AgreementError(
                            f"{path}:{line_number}: {short} must be true/false, got {cell!r}")
                    values[field_name] = cell.lower() == "true"
                else:
                    if not cell.isdigit() or int(cell) not in (1, 2, 3):
                        raise AgreementError(
                            f"{path}:{line_number}: {short} must be 1, 2, or 3, got {cell!r}")
                    values[field_name] = int(cell)
            rows[feedback_id] = HumanCode(feedback_id=feedback_id, values=values)
    return rows


def agreement_metrics(llm: Sequence[Evaluation],
                      human: Mapping[str, HumanCode]) -> AgreementReport:
    """Per-sub-indicator agreement between model verdicts and human codes.

    Every model evaluation must have a matching human row. The slide-accuracy
    row only scores records where both sides carry a verdict; its support
    counts report how many pairs were compared.
    """
    missing = [e.feedback_id for e in llm if e.feedback_id not in human]
    if missing:
        raise AgreementError(f"no human codes for feedback ids: {missing[:5]}"
                             + ("..." if len(missing) > 5 else ""))

    rows: list[AgreementRow] = []
    for indicator in INDICATORS:
        predicted: list = []
        actual: list = []
        skipped = 0
        for evaluation in llm:
            llm_value = getattr(evaluation, indicator)
            human_value = human[evaluation.feedback_id].values[indicator]
            if indicator == "retrieved_slides_accuracy" and (
                    llm_value is None or human_value is None):
                skipped += 1
                continue
            predicted.append(llm_value)
            actual.append(human_value)

        if not predicted:
            rows.append(AgreementRow(indicator, 0.0, 0.0, 0.0, 0.0,
                                     {"n": 0, "skipped": skipped,
                                      "zero_predicted_positive": True}))
            continue

        if indicator in BOOLEAN_INDICATORS:
            row = boolean_agreement(predicted, actual, indicator)
        else:
            row = multiclass_agreement(predicted, actual, indicator)
        if skipped:
            row.support["skipped"] = skipped
        rows.append(row)
    return AgreementReport(rows=tuple(rows))
