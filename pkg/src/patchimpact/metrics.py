"""Evaluation math: confusion metrics as exact rationals with half-up
percent rounding, expert field-score averages, inter-rater agreement, and
token/time cost accounting."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .agents import UsageRecord
from .model import ConfusionCounts


class EmptyHistogram(Exception):
    pass


def round_half_up_percent(value: Fraction) -> int:
    """Round a ratio to an integer percent, halves away from zero upward."""
    return math.floor(value * 100 + Fraction(1, 2))


def round_half_up(value: Fraction, decimals: int) -> float:
    scale = 10**decimals
    return math.floor(value * scale + Fraction(1, 2)) / scale


@dataclass(frozen=True)
class MetricsResult:
    precision: Fraction | None
    recall: Fraction | None
    f1: Fraction | None
    specificity: Fraction | None

    def _pct(self, value: Fraction | None) -> int | None:
        return None if value is None else round_half_up_percent(value)

    @property
    def precision_pct(self) -> int | None:
        return self._pct(self.precision)

    @property
    def recall_pct(self) -> int | None:
        return self._pct(self.recall)

    @property
    def f1_pct(self) -> int | None:
        return self._pct(self.f1)

    @property
    def specificity_pct(self) -> int | None:
        return self._pct(self.specificity)

    def to_dict(self) -> dict:
        def fmt(value: Fraction | None) -> str | None:
            return None if value is None else f"{value.numerator}/{value.denominator}"

        return {
            "precision": fmt(self.precision),
            "recall": fmt(self.recall),
            "f1": fmt(self.f1),
            "specificity": fmt(self.specificity),
            "precision_pct": self.precision_pct,
            "recall_pct": self.recall_pct,
            "f1_pct": self.f1_pct,
            "specificity_pct": self.specificity_pct,
        }


def compute_metrics(counts: ConfusionCounts) -> MetricsResult:
    """Precision, recall, F1 and specificity as exact rationals; metrics with
    a zero denominator come back undefined (None)."""
    if counts.total == 0:
        raise ValueError("confusion counts are all zero")

    def ratio(num: int, den: int) -> Fraction | None:
        return Fraction(num, den) if den > 0 else None

    precision = ratio(counts.tp, counts.tp + counts.fp)
    recall = ratio(counts.tp, counts.tp + counts.fn)
    if precision is not None and recall is not None and (precision + recall) > 0:
        f1 = 2 * precision * recall / (precision + recall)
    elif precision is not None and recall is not None:
        f1 = Fraction(0)
    else:
        f1 = None
    specificity = ratio(counts.tn, counts.tn + counts.fp)
    return MetricsResult(precision=precision, recall=recall, f1=f1, specificity=specificity)


@dataclass(frozen=True)
class FieldRatingHistogram:
    """Rating counts for one structured field: 0=missing, 1=partial, 2=accurate."""

    missing: int
    partial: int
    accurate: int

    def __post_init__(self) -> None:
        if min(self.missing, self.partial, self.accurate) < 0:
            raise ValueError("histogram counts must be non-negative")

    @property
    def total(self) -> int:
        return self.missing + self.partial + self.accurate


def score_fields(histogram: FieldRatingHistogram) -> float:
    """Average rating on [0, 2], reported to two decimals (half-up)."""
    if histogram.total == 0:
        raise EmptyHistogram("histogram has no ratings")
    average = Fraction(histogram.partial + 2 * histogram.accurate, histogram.total)
    return round_half_up(average, 2)


@dataclass(frozen=True)
class KappaResult:
    value: float
    degenerate: bool = False


def cohen_kappa(rater_a: Sequence[int], rater_b: Sequence[int]) -> KappaResult:
    """Cohen's kappa over two equal-length label sequences.

    Chance agreement comes from the marginal label frequencies. When chance
    agreement is 1 the statistic is degenerate: defined as 1 under perfect
    observed agreement, else 0, and flagged.
    """
    if len(rater_a) != len(rater_b) or not rater_a:
        raise ValueError("rater sequences must be equal-length and non-empty")
    n = len(rater_a)
    observed = Fraction(sum(1 for a, b in zip(rater_a, rater_b) if a == b), n)
    counts_a = Counter(rater_a)
    counts_b = Counter(rater_b)
    labels = set(counts_a) | set(counts_b)
    expected = sum(
        (Fraction(counts_a.get(label, 0), n) * Fraction(counts_b.get(label, 0), n))
        for label in labels
    )
    if expected == 1:
        return KappaResult(value=1.0 if observed == 1 else 0.0, degenerate=True)
    kappa = (observed - expected) / (1 - expected)
    return KappaResult(value=float(kappa), degenerate=False)


@dataclass(frozen=True)
class TaskCost:
    task_kind: str
    count: int
    total_tokens: int
    avg_tokens: float
    total_time_min: float
    avg_time_min: float


@dataclass(frozen=True)
class CostSummary:
    per_task: tuple[TaskCost, ...]
    grand_total_tokens: int
    grand_total_time_min: float

    def to_dict(self) -> dict:
        return {
            "per_task": [
                {
                    "task_kind": t.task_kind,
                    "count": t.count,
                    "total_tokens": t.total_tokens,
                    "avg_tokens": t.avg_tokens,
                    "total_time_min": t.total_time_min,
                    "avg_time_min": t.avg_time_min,
                }
                for t in self.per_task
            ],
            "grand_total_tokens": self.grand_total_tokens,
            "grand_total_time_min": self.grand_total_time_min,
        }


def account_cost(usage_log: Sequence[UsageRecord]) -> CostSummary:
    """Group usage by task kind; tokens include both input and output.

    Totals are additive: the grand total equals the sum of group totals.
    """
    groups: dict[str, list[UsageRecord]] = {}
    for record in usage_log:
        groups.setdefault(record.task_kind, []).append(record)
    per_task = []
    for task_kind in sorted(groups):
        records = groups[task_kind]
        tokens = sum(r.input_tokens + r.output_tokens for r in records)
        seconds = sum(r.wall_time for r in records)
        per_task.append(
            TaskCost(
                task_kind=task_kind,
                count=len(records),
                total_tokens=tokens,
                avg_tokens=tokens / len(records),
                total_time_min=seconds / 60.0,
                avg_time_min=seconds / 60.0 / len(records),
            )
        )
    return CostSummary(
        per_task=tuple(per_task),
        grand_total_tokens=sum(t.total_tokens for t in per_task),
        grand_total_time_min=sum(t.total_time_min for t in per_task),
    )
