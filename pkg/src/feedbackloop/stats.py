"""Statistics behind the reported tables: count/percentage cells, paired
tests, feature means, improvement deltas, and level-shift histograms.

All arithmetic runs at full float precision; rounding to two decimals happens
only at the reporting boundary, with half-up rounding so printed cells match
conventional table formatting. The Student-t tail is computed from a local
regularized incomplete-beta routine, keeping this module dependency-free and
auditable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Mapping, Sequence


class StatsError(ValueError):
    """Raised for misuse of a statistics operation (empty input, mismatched tables)."""


def round_half_up(value: float, digits: int = 2) -> float:
    """Round half away from zero at the given decimal place (reporting only)."""
    quantum = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def count_percentage(flags: Sequence[bool]) -> tuple[int, float]:
    """Count of true flags and their share of the list as a 2-decimal percentage."""
    if not flags:
        raise StatsError("count_percentage requires a non-empty list")
    count = sum(1 for flag in flags if flag)
    return count, round_half_up(100.0 * count / len(flags))


@dataclass(frozen=True)
class PairedSamples:
    """Before/after value pairs, keyed by the lineage of the round-1 record."""

    pairs: tuple[tuple[float, float], ...]
    keys: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.pairs:
            raise StatsError("paired samples must contain at least one pair")
        if self.keys is not None and len(self.keys) != len(self.pairs):
            raise StatsError("keys and pairs must have equal length")

    def differences(self) -> list[float]:
        return [after - before for before, after in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)


class TestMethod(str, Enum):
    WILCOXON = "wilcoxon"
    PAIRED_T = "paired_t"


@dataclass(frozen=True)
class TestResult:
    """Outcome of a paired test; p_value is None exactly for degenerate samples."""

    statistic: float | None
    p_value: float | None
    n: int
    effect_size: float | None
    method: TestMethod

    def stars(self) -> str:
        if self.p_value is None:
            return ""
        if self.p_value < 0.001:
            return "***"
        if self.p_value < 0.01:
            return "**"
        if self.p_value < 0.05:
            return "*"
        return ""

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "n": self.n,
            "effect_size": self.effect_size,
            "method": self.method.value,
        }


def _midranks(values: Sequence[float]) -> list[float]:
    """Average ranks (1-based) with mid-ranks assigned to tied values."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    position = 0
    while position < len(order):
        tail = position
        while tail + 1 < len(order) and values[order[tail + 1]] == values[order[position]]:
            tail += 1
        mid = (position + tail) / 2.0 + 1.0
        for j in range(position, tail + 1):
            ranks[order[j]] = mid
        position = tail + 1
    return ranks


def _exact_min_rank_sum_p(doubled_ranks: Sequence[int], doubled_w: int) -> float:
    """Exact two-sided p for W = min(W+, W-) over all equally likely sign flips.

    Works on ranks scaled by two so mid-ranks become integers, and convolves
    the distribution of 2*W+ instead of enumerating sign assignments.
    """
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for rank in doubled_ranks:
        for w in range(total - rank, -1, -1):
            if counts[w]:
                counts[w + rank] += counts[w]

    low = sum(counts[: doubled_w + 1])
    high = sum(counts[max(0, total - doubled_w):])
    overlap = sum(counts[total - doubled_w: doubled_w + 1]) if total - doubled_w <= doubled_w else 0
    favorable = low + high - overlap
    return favorable / (1 << len(doubled_ranks))


EXACT_WILCOXON_MAX_N = 25


def wilcoxon_signed_rank(samples: PairedSamples) -> TestResult:
    """Two-sided Wilcoxon signed-rank test on after-minus-before differences.

    Zero differences are discarded (the effective n reflects that); if every
    difference is zero the result is degenerate with p = None. Absolute
    differences are ranked with mid-ranks, W = min(W+, W-); p is exact for
    effective n up to 25 and a tie- and continuity-corrected normal
    approximation beyond that.
    """
    differences = [d for d in samples.differences() if d != 0.0]
    if not differences:
        return TestResult(statistic=None, p_value=None, n=0,
                          effect_size=None, method=TestMethod.WILCOXON)

    n = len(differences)
    magnitudes = [abs(d) for d in differences]
    ranks = _midranks(magnitudes)
    w_plus = sum(rank for rank, d in zip(ranks, differences) if d > 0)
    w_minus = sum(rank for rank, d in zip(ranks, differences) if d < 0)
    statistic = min(w_plus, w_minus)

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = [round(2 * rank) for rank in ranks]
        p_value = _exact_min_rank_sum_p(doubled, round(2 * statistic))
    else:
        mean = n * (n + 1) / 4.0
        variance = n * (n + 1) * (2 * n + 1) / 24.0
        tie_sizes = _tie_group_sizes(magnitudes)
        variance -= sum(t ** 3 - t for t in tie_sizes) / 48.0
        z = max(0.0, abs(statistic - mean) - 0.5) / math.sqrt(variance)
        p_value = normal_two_sided_p(z)

    return TestResult(statistic=statistic, p_value=p_value, n=n,
                      effect_size=None, method=TestMethod.WILCOXON)


def _tie_group_sizes(values: Sequence[float]) -> list[int]:
    from collections import Counter

    return [size for size in Counter(values).values() if size > 1]


def paired_t_test(samples: PairedSamples) -> TestResult:
    """Two-sided paired t-test with Cohen's d_z (mean of d over sd of d).

    The effect size satisfies d_z = t / sqrt(n) by construction. Samples whose
    differences are all identical to machine precision give a degenerate
    result with p = None.
    """
    differences = samples.differences()
    n = len(differences)
    if n < 2:
        raise StatsError("paired t-test requires at least 2 pairs")

    mean = sum(differences) / n
    variance = sum((d - mean) ** 2 for d in differences) / (n - 1)
    sd = math.sqrt(variance)
    if sd == 0.0:
        return TestResult(statistic=None, p_value=None, n=n,
                          effect_size=None, method=TestMethod.PAIRED_T)

    statistic = mean / (sd / math.sqrt(n))
    p_value = student_t_two_sided_p(statistic, n - 1)
    effect_size = mean / sd
    return TestResult(statistic=statistic, p_value=p_value, n=n,
                      effect_size=effect_size, method=TestMethod.PAIRED_T)


def normal_two_sided_p(z: float) -> float:
    """P(|Z| >= |z|) for a standard normal variable."""
    return math.erfc(abs(z) / math.sqrt(2.0))


def student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with df degrees of freedom."""
    if df < 1:
        raise StatsError(f"degrees of freedom must be >= 1 (got {df})")
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) via the standard continued-fraction expansion.

    Uses the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) to keep the continued
    fraction in its rapidly converging region.
    """
    if a <= 0.0 or b <= 0.0:
        raise StatsError("incomplete beta requires positive shape parameters")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0

    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def _beta_continued_fraction(a: float, b: float, x: float,
                             max_iterations: int = 300, epsilon: float = 1e-15) -> float:
    """Modified Lentz evaluation of the incomplete-beta continued fraction."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    result = d
    for m in range(1, max_iterations + 1):
        m2 = 2 * m
        numerator = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + numerator * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + numerator / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        result *= d * c
        numerator = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + numerator * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + numerator / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        result *= delta
        if abs(delta - 1.0) < epsilon:
            return result
    raise StatsError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


@dataclass(frozen=True)
class MethodTable:
    """One row per method with named numeric cells for a chosen indicator."""

    indicator: str
    columns: tuple[str, ...]
    rows: dict[str, dict[str, float | int | None]] = field(default_factory=dict)

    def cell(self, method_key: str, column: str) -> float | int | None:
        return self.rows[method_key][column]

    def method_keys(self) -> tuple[str, ...]:
        return tuple(self.rows.keys())


def feature_means(groups: Mapping[str, Sequence[object]],
                  feature_fields: Sequence[str]) -> MethodTable:
    """Arithmetic mean of each feature level per method, reported to 2 decimals."""
    rows: dict[str, dict[str, float | int | None]] = {}
    for method_key, evaluations in groups.items():
        if not evaluations:
            raise StatsError(f"feature_means: empty group for method {method_key!r}")
        rows[method_key] = {
            name: round_half_up(
                sum(getattr(e, name) for e in evaluations) / len(evaluations))
            for name in feature_fields
        }
    return MethodTable(indicator="feature_means", columns=tuple(feature_fields), rows=rows)


def improvement_table(round1: MethodTable, round2: MethodTable) -> MethodTable:
    """Per-cell deltas (round 2 minus round 1) as 2-decimal point changes."""
    if set(round1.rows) != set(round2.rows):
        raise StatsError(
            f"method mismatch: {sorted(round1.rows)} vs {sorted(round2.rows)}")
    shared_columns = tuple(c for c in round1.columns if c in round2.columns)
    rows: dict[str, dict[str, float | int | None]] = {}
    for method_key in round1.rows:
        rows[method_key] = {}
        for column in shared_columns:
            before = round1.cell(method_key, column)
            after = round2.cell(method_key, column)
            if before is None or after is None:
                rows[method_key][column] = None
            else:
                rows[method_key][column] = round_half_up(after - before)
    return MethodTable(indicator=f"{round1.indicator}_improvement",
                       columns=shared_columns, rows=rows)


@dataclass(frozen=True)
class LevelShiftCounts:
    """How paired 3-level feature values moved between rounds."""

    up_by_one: int
    up_by_two: int
    decreased: int
    unchanged: int

    @property
    def total(self) -> int:
        return self.up_by_one + self.up_by_two + self.decreased + self.unchanged

    @property
    def improved(self) -> int:
        return self.up_by_one + self.up_by_two

    def percentages(self) -> dict[str, float]:
        total = self.total
        return {
            "up_by_one": round_half_up(100.0 * self.up_by_one / total),
            "up_by_two": round_half_up(100.0 * self.up_by_two / total),
            "decreased": round_half_up(100.0 * self.decreased / total),
            "unchanged": round_half_up(100.0 * self.unchanged / total),
            "improved": round_half_up(100.0 * self.improved / total),
        }


def level_increase_histogram(samples: PairedSamples) -> LevelShiftCounts:
    """Classify every (before, after) level pair as +1, +2, decreased, or unchanged."""
    up_one = up_two = down = same = 0
    for before, after in samples.pairs:
        if before not in (1, 2, 3) or after not in (1, 2, 3):
            raise StatsError(f"feature levels must be in {{1,2,3}}: got ({before}, {after})")
        delta = after - before
        if delta == 1:
            up_one += 1
        elif delta == 2:
            up_two += 1
        elif delta < 0:
            down += 1
        else:
            same += 1
    return LevelShiftCounts(up_by_one=up_one, up_by_two=up_two,
                            decreased=down, unchanged=same)
