"""Builds every reported table from the run's evaluation artifacts and writes
the stats directory (one CSV plus one Markdown file per table analog) and the
consolidated run report.

Sign convention for the word-count test: the test statistic is positive when
the second round got shorter (the reduction direction), while the mean-change
column stays signed as round 2 minus round 1. The two conventions are mixed
deliberately so rows read the same way as conventional before/after tables.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .agreement import AgreementReport
from .model import (COMPONENT_FIELDS, FEATURE_FIELDS, Evaluation, FeedbackRecord,
                    Method, read_jsonl)
from .stats import (LevelShiftCounts, MethodTable, PairedSamples, TestMethod,
                    TestResult, count_percentage, improvement_table,
                    level_increase_histogram, paired_t_test, round_half_up,
                    wilcoxon_signed_rank)


class ReportError(Exception):
    """Raised when report inputs are missing or unreadable."""


# -- grouping helpers --------------------------------------------------------


def load_feedback(path: Path) -> dict[str, FeedbackRecord]:
    return {row["id"]: FeedbackRecord.from_dict(row) for row in read_jsonl(path)}


def load_evaluations(path: Path) -> dict[str, Evaluation]:
    return {row["feedback_id"]: Evaluation.from_dict(row) for row in read_jsonl(path)}


def group_by_method(
    evaluations: Mapping[str, Evaluation],
    feedback: Mapping[str, FeedbackRecord],
    method_keys: Sequence[str],
) -> dict[str, list[Evaluation]]:
    groups: dict[str, list[Evaluation]] = {key: [] for key in method_keys}
    for feedback_id, evaluation in evaluations.items():
        record = feedback.get(feedback_id)
        if record is not None and record.method.key in groups:
            groups[record.method.key].append(evaluation)
    return groups


def paired_values(
    evals1: Mapping[str, Evaluation],
    evals2: Mapping[str, Evaluation],
    feedback2: Mapping[str, FeedbackRecord],
    value, method_key: str | None = None,
) -> PairedSamples | None:
    """Pair each round-2 value with its parent's round-1 value by lineage."""
    pairs: list[tuple[float, float]] = []
    keys: list[str] = []
    for record in sorted(feedback2.values(), key=lambda r: r.id):
        if method_key is not None and record.method.key != method_key:
            continue
        parent_eval = evals1.get(record.parent_id or "")
        child_eval = evals2.get(record.id)
        if parent_eval is None or child_eval is None:
            continue
        before, after = value(parent_eval), value(child_eval)
        if before is None or after is None:
            continue
        pairs.append((float(before), float(after)))
        keys.append(record.parent_id or record.id)
    if not pairs:
        return None
    return PairedSamples(pairs=tuple(pairs), keys=tuple(keys))


# -- table builders ----------------------------------------------------------


def reliability_table(groups: Mapping[str, Sequence[Evaluation]]) -> MethodTable:
    rows: dict[str, dict] = {}
    for method_key, evaluations in groups.items():
        row: dict = {"n": len(evaluations)}
        if evaluations:
            count, pct = count_percentage([e.evaluation_accuracy for e in evaluations])
            row["accuracy_count"], row["accuracy_pct"] = count, pct
            slide_flags = [e.retrieved_slides_accuracy for e in evaluations
                           if e.retrieved_slides_accuracy is not None]
            if slide_flags:
                count, pct = count_percentage(slide_flags)
                row["slides_count"], row["slides_pct"] = count, pct
            else:
                row["slides_count"] = row["slides_pct"] = None
        rows[method_key] = row
    return MethodTable(indicator="reliability",
                       columns=("n", "accuracy_count", "accuracy_pct",
                                "slides_count", "slides_pct"),
                       rows=rows)


def components_table(groups: Mapping[str, Sequence[Evaluation]]) -> MethodTable:
    columns: list[str] = []
    for name in COMPONENT_FIELDS:
        columns += [f"{name}_count", f"{name}_pct"]
    columns += ["all_components_count", "all_components_pct"]

    rows: dict[str, dict] = {}
    for method_key, evaluations in groups.items():
        row: dict = {}
        for name in COMPONENT_FIELDS:
            count, pct = count_percentage([getattr(e, name) for e in evaluations])
            row[f"{name}_count"], row[f"{name}_pct"] = count, pct
        count, pct = count_percentage(
            [all(getattr(e, name) for name in COMPONENT_FIELDS) for e in evaluations])
        row["all_components_count"], row["all_components_pct"] = count, pct
        rows[method_key] = row
    return MethodTable(indicator="components", columns=tuple(columns), rows=rows)


def features_table(groups: Mapping[str, Sequence[Evaluation]]) -> MethodTable:
    rows = {
        method_key: {
            name: round_half_up(sum(getattr(e, name) for e in evaluations) / len(evaluations))
            for name in FEATURE_FIELDS
        }
        for method_key, evaluations in groups.items()
    }
    return MethodTable(indicator="features", columns=FEATURE_FIELDS, rows=rows)


def simplicity_table(groups: Mapping[str, Sequence[Evaluation]]) -> MethodTable:
    rows: dict[str, dict] = {}
    for method_key, evaluations in groups.items():
        counts = [e.simplicity for e in evaluations]
        mean = sum(counts) / len(counts)
        if len(counts) > 1:
            sd = math.sqrt(sum((c - mean) ** 2 for c in counts) / (len(counts) - 1))
        else:
            sd = 0.0
        rows[method_key] = {"mean_words": round_half_up(mean), "sd_words": round_half_up(sd)}
    return MethodTable(indicator="simplicity", columns=("mean_words", "sd_words"), rows=rows)


def accuracy_improvement_tables(
    groups1: Mapping[str, Sequence[Evaluation]],
    groups2: Mapping[str, Sequence[Evaluation]],
) -> tuple[MethodTable, MethodTable]:
    """Round-2 accuracy table plus per-cell deltas against round 1."""
    round1 = reliability_table(groups1)
    round2 = reliability_table(groups2)
    deltas = improvement_table(
        MethodTable(round1.indicator, ("accuracy_pct",),
                    {k: {"accuracy_pct": v.get("accuracy_pct")} for k, v in round1.rows.items()}),
        MethodTable(round2.indicator, ("accuracy_pct",),
                    {k: {"accuracy_pct": v.get("accuracy_pct")} for k, v in round2.rows.items()}),
    )
    return round2, deltas


def word_count_tests(
    evals1: Mapping[str, Evaluation],
    evals2: Mapping[str, Evaluation],
    feedback2: Mapping[str, FeedbackRecord],
    method_keys: Sequence[str],
) -> dict[str, dict]:
    """Table-6 analog: per method, round-2 word-count moments plus the paired test."""
    table: dict[str, dict] = {}
    for method_key in method_keys:
        samples = paired_values(evals1, evals2, feedback2,
                                value=lambda e: e.simplicity, method_key=method_key)
        if samples is None:
            table[method_key] = {"n": 0}
            continue
        round2_values = [after for _, after in samples.pairs]
        mean2 = sum(round2_values) / len(round2_values)
        sd2 = (math.sqrt(sum((v - mean2) ** 2 for v in round2_values) / (len(round2_values) - 1))
               if len(round2_values) > 1 else 0.0)
        mean_change = sum(after - before for before, after in samples.pairs) / len(samples)
        # reduction-positive test: pairs reversed so t > 0 means round 2 got shorter
        reversed_samples = PairedSamples(
            pairs=tuple((after, before) for before, after in samples.pairs),
            keys=samples.keys)
        result = (paired_t_test(reversed_samples) if len(reversed_samples) >= 2
                  else TestResult(None, None, len(reversed_samples), None,
                                  TestMethod.PAIRED_T))
        table[method_key] = {
            "n": len(samples),
            "mean_round2": round_half_up(mean2),
            "sd_round2": round_half_up(sd2),
            "mean_change": round_half_up(mean_change),
            "t": None if result.statistic is None else round_half_up(result.statistic),
            "p": result.p_value,
            "effect_size_dz": (None if result.effect_size is None
                               else round_half_up(result.effect_size, 3)),
            "stars": result.stars(),
        }
    return table


INDICATOR_VALUE_GETTERS = {
    "evaluation_accuracy": lambda e: 1.0 if e.evaluation_accuracy else 0.0,
    **{name: (lambda e, _n=name: 1.0 if getattr(e, _n) else 0.0) for name in COMPONENT_FIELDS},
    **{name: (lambda e, _n=name: float(getattr(e, _n))) for name in FEATURE_FIELDS},
}


def wilcoxon_tests(
    evals1: Mapping[str, Evaluation],
    evals2: Mapping[str, Evaluation],
    feedback2: Mapping[str, FeedbackRecord],
    method_keys: Sequence[str],
) -> list[dict]:
    """Round-1 vs round-2 Wilcoxon tests per (method, sub-indicator)."""
    rows: list[dict] = []
    for method_key in method_keys:
        for indicator, getter in INDICATOR_VALUE_GETTERS.items():
            samples = paired_values(evals1, evals2, feedback2, getter, method_key)
            if samples is None:
                continue
            result = wilcoxon_signed_rank(samples)
            rows.append({
                "method": method_key,
                "indicator": indicator,
                "n_pairs": len(samples),
                "n_effective": result.n,
                "w": result.statistic,
                "p": result.p_value,
                "stars": result.stars(),
            })
    return rows


def level_shift_rows(
    evals1: Mapping[str, Evaluation],
    evals2: Mapping[str, Evaluation],
    feedback2: Mapping[str, FeedbackRecord],
    method_keys: Sequence[str],
) -> list[dict]:
    """Fig-5 analog: how each feature's levels moved between rounds, per method."""
    rows: list[dict] = []
    for method_key in method_keys:
        for feature in FEATURE_FIELDS:
            samples = paired_values(evals1, evals2, feedback2,
                                    lambda e, _f=feature: getattr(e, _f), method_key)
            if samples is None:
                continue
            counts: LevelShiftCounts = level_increase_histogram(samples)
            percentages = counts.percentages()
            rows.append({
                "method": method_key,
                "feature": feature,
                "n": counts.total,
                "up_by_one": counts.up_by_one,
                "up_by_two": counts.up_by_two,
                "decreased": counts.decreased,
                "unchanged": counts.unchanged,
                "pct_up_by_one": percentages["up_by_one"],
                "pct_up_by_two": percentages["up_by_two"],
                "pct_improved": percentages["improved"],
            })
    return rows


# -- writers -----------------------------------------------------------------


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format_cell(cell) for cell in row])
    path.write_text(buffer.getvalue(), encoding="utf-8")


def markdown_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |",
             "| " + " | ".join("---" for _ in header) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(_format_cell(cell) for cell in row) + " |")
    return "\n".join(lines) + "\n"


def method_table_rows(table: MethodTable) -> list[list]:
    return [[method_key] + [table.rows[method_key].get(col) for col in table.columns]
            for method_key in table.rows]


def emit_method_table(stats_dir: Path, name: str, table: MethodTable) -> list[Path]:
    header = ["method"] + list(table.columns)
    rows = method_table_rows(table)
    csv_path = stats_dir / f"{name}.csv"
    md_path = stats_dir / f"{name}.md"
    write_csv(csv_path, header, rows)
    md_path.parent.mkdir(parents=True, exist_ok=True)
    md_path.write_text(markdown_table(header, rows), encoding="utf-8")
    return [csv_path, md_path]


def emit_dict_rows(stats_dir: Path, name: str, header: Sequence[str],
                   rows: Iterable[Mapping]) -> list[Path]:
    materialized = [[row.get(col) for col in header] for row in rows]
    csv_path = stats_dir / f"{name}.csv"
    md_path = stats_dir / f"{name}.md"
    write_csv(csv_path, header, materialized)
    md_path.parent.mkdir(parents=True, exist_ok=True)
    md_path.write_text(markdown_table(header, materialized), encoding="utf-8")
    return [csv_path, md_path]


def emit_agreement_report(stats_dir: Path, report: AgreementReport) -> list[Path]:
    header = ["indicator", "accuracy", "precision", "recall", "f1", "n"]
    rows = [{
        "indicator": row.indicator,
        "accuracy": round_half_up(row.accuracy),
        "precision": round_half_up(row.precision),
        "recall": round_half_up(row.recall),
        "f1": round_half_up(row.f1),
        "n": row.support.get("n", 0),
    } for row in report.rows]
    return emit_dict_rows(stats_dir, "agreement", header, rows)


def _digest_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def emit_stats(run_dir: Path, method_keys: Sequence[str] | None = None) -> Path:
    """Compute every table from the run artifacts and write the stats directory."""
    evals1_path = run_dir / "evaluations_round1.jsonl"
    feedback1_path = run_dir / "feedback_round1.jsonl"
    for required in (feedback1_path, evals1_path):
        if not required.exists():
            raise ReportError(f"missing required artifact: {required}")

    feedback1 = load_feedback(feedback1_path)
    evals1 = load_evaluations(evals1_path)
    if method_keys is None:
        method_keys = sorted({record.method.key for record in feedback1.values()},
                             key=lambda key: [m.key for m in _canonical_methods()].index(key))
    groups1 = group_by_method(evals1, feedback1, method_keys)

    feedback2_path = run_dir / "feedback_round2.jsonl"
    evals2_path = run_dir / "evaluations_round2.jsonl"
    has_round2 = feedback2_path.exists() and evals2_path.exists()
    feedback2 = load_feedback(feedback2_path) if has_round2 else {}
    evals2 = load_evaluations(evals2_path) if has_round2 else {}

    stats_dir = run_dir / "stats"
    stats_dir.mkdir(parents=True, exist_ok=True)
    emitted: list[Path] = []

    emitted += emit_method_table(stats_dir, "reliability", reliability_table(groups1))
    emitted += emit_method_table(stats_dir, "components", components_table(groups1))
    emitted += emit_method_table(stats_dir, "features", features_table(groups1))
    emitted += emit_method_table(stats_dir, "simplicity", simplicity_table(groups1))

    if has_round2 and feedback2:
        groups2 = group_by_method(evals2, feedback2, method_keys)
        round2_table, delta_table = accuracy_improvement_tables(groups1, groups2)
        improvements = MethodTable(
            indicator="improvements",
            columns=("accuracy_round2_pct", "accuracy_delta_pct"),
            rows={
                key: {
                    "accuracy_round2_pct": round2_table.rows[key].get("accuracy_pct"),
                    "accuracy_delta_pct": delta_table.rows[key].get("accuracy_pct"),
                }
                for key in method_keys
            },
        )
        emitted += emit_method_table(stats_dir, "improvements", improvements)

        wc_tests = word_count_tests(evals1, evals2, feedback2, method_keys)
        emitted += emit_dict_rows(
            stats_dir, "word_count_tests",
            ["method", "n", "mean_round2", "sd_round2", "mean_change",
             "t", "p", "effect_size_dz", "stars"],
            [{"method": key, **wc_tests[key]} for key in method_keys])

        emitted += emit_dict_rows(
            stats_dir, "wilcoxon_tests",
            ["method", "indicator", "n_pairs", "n_effective", "w", "p", "stars"],
            wilcoxon_tests(evals1, evals2, feedback2, method_keys))

        emitted += emit_dict_rows(
            stats_dir, "level_shifts",
            ["method", "feature", "n", "up_by_one", "up_by_two", "decreased",
             "unchanged", "pct_up_by_one", "pct_up_by_two", "pct_improved"],
            level_shift_rows(evals1, evals2, feedback2, method_keys))

    inputs = {
        path.name: _digest_file(path)
        for path in (feedback1_path, evals1_path, feedback2_path, evals2_path)
        if path.exists()
    }
    manifest = {
        "inputs": inputs,
        "artifacts": {path.name: _digest_file(path) for path in sorted(emitted)},
    }
    manifest_path = stats_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return stats_dir


def _canonical_methods() -> list[Method]:
    from .model import enumerate_methods

    return enumerate_methods()


def render_report(run_dir: Path) -> str:
    """One consolidated Markdown document mirroring the emitted tables."""
    evals1_path = run_dir / "evaluations_round1.jsonl"
    evals2_path = run_dir / "evaluations_round2.jsonl"
    missing = [p.name for p in (evals1_path, evals2_path) if not p.exists()]
    if missing:
        raise ReportError(f"missing evaluation artifacts: {', '.join(missing)}")

    stats_dir = run_dir / "stats"
    if not (stats_dir / "manifest.json").exists():
        emit_stats(run_dir)

    sections = ["# Feedback run report", ""]
    titles = [
        ("reliability", "Round-1 reliability"),
        ("components", "Round-1 components"),
        ("features", "Round-1 feature means"),
        ("simplicity", "Round-1 word counts"),
        ("improvements", "Round-2 accuracy and improvement"),
        ("word_count_tests", "Word-count paired t-tests (round 1 vs round 2)"),
        ("wilcoxon_tests", "Wilcoxon signed-rank tests (round 1 vs round 2)"),
        ("level_shifts", "Feature level shifts (round 1 to round 2)"),
    ]
    for name, title in titles:
        md_path = stats_dir / f"{name}.md"
        if md_path.exists():
            sections += [f"## {title}", "", md_path.read_text(encoding="utf-8"), ""]

    agreement_md = stats_dir / "agreement.md"
    sections.append("## Agreement with human codes")
    sections.append("")
    if agreement_md.exists():
        sections.append(agreement_md.read_text(encoding="utf-8"))
    else:
        sections.append("Not available (no human codes supplied).")
    sections.append("")
    return "\n".join(sections)


def emit_report(run_dir: Path) -> Path:
    report_path = run_dir / "report.md"
    report_path.write_text(render_report(run_dir), encoding="utf-8")
    return report_path
