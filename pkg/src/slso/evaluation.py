"""Binary per-category scoring against ground truth and comparison statistics.

Scores are exact-match bits over the seven interpretation categories.  The
comparison table reports mean ± standard error per category, the improvement
of the proposed method over the baseline, and a paired-test p-value.
Improvement arithmetic follows the printed-precision convention: absolute
improvement and improvement rate are computed from means rounded to three
decimals, the precision the report displays.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from scipy import stats as _scipy_stats

from .schema import CystStructuredData

# Report rows in fixed order: (record field or tooth-number key, display label).
EVAL_CATEGORIES: tuple[tuple[str, str], ...] = (
    ("radiolucency", "Radiolucency"),
    ("internal_structure", "Internal structure"),
    ("boundary", "Boundary"),
    ("root_resorption", "Root resorption"),
    ("tooth_displacement", "Tooth displacement"),
    ("anatomical_relation", "Relationship with other structures"),
    ("tooth_number", "Tooth number"),
)
CATEGORY_KEYS = tuple(key for key, _ in EVAL_CATEGORIES)


class EvaluationError(Exception):
    """Base class for evaluation failures."""


class InsufficientCases(EvaluationError):
    """Fewer cases than the statistic requires."""


class CaseIdMismatch(EvaluationError):
    """Baseline and proposed score lists disagree on case ids or order."""


@dataclass(frozen=True)
class GroundTruthRecord:
    """Radiologist labels for one case; the prose findings are reference only."""

    case_id: str
    truth: CystStructuredData
    prose: str | None = None


@dataclass(frozen=True)
class CaseScore:
    """Per-category 0/1 bits for one case, aligned with CATEGORY_KEYS."""

    case_id: str
    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.bits) != len(CATEGORY_KEYS):
            raise ValueError(f"expected {len(CATEGORY_KEYS)} bits")
        if any(bit not in (0, 1) for bit in self.bits):
            raise ValueError("bits must be 0 or 1")

    @property
    def category_mean(self) -> float:
        return sum(self.bits) / len(self.bits)

    def bit(self, key: str) -> int:
        return self.bits[CATEGORY_KEYS.index(key)]

    def as_dict(self) -> dict[str, int]:
        return dict(zip(CATEGORY_KEYS, self.bits))


@dataclass(frozen=True)
class CategoryStats:
    """Mean and standard error of one category for one method."""

    category: str
    n: int
    mean: float
    se: float


@dataclass(frozen=True)
class CategoryComparison:
    """Paired comparison of one category between two methods."""

    category: str
    label: str
    baseline: CategoryStats
    proposed: CategoryStats
    absolute_improvement: float
    improvement_rate: float | None  # percent; None when the baseline mean is 0
    p_value: float | None  # None renders as n/a


@dataclass(frozen=True)
class FlaggedCase:
    """Case scored on last-best output because a run did not resolve it."""

    case_id: str
    run: str
    status: str


@dataclass(frozen=True)
class Comparison:
    """Complete comparison table in fixed category order."""

    baseline_label: str
    proposed_label: str
    n: int
    categories: tuple[CategoryComparison, ...]
    flagged_cases: tuple[FlaggedCase, ...] = ()


def score_case(
    result: CystStructuredData, truth: CystStructuredData, case_id: str = ""
) -> CaseScore:
    """Exact-match bits: enum categories by equality of canonical values,
    tooth number by exact set equality (near misses score 0)."""
    bits = []
    for key in CATEGORY_KEYS:
        if key == "tooth_number":
            bits.append(1 if result.affected_teeth == truth.affected_teeth else 0)
        else:
            bits.append(1 if result.value(key) == truth.value(key) else 0)
    return CaseScore(case_id, tuple(bits))


def zero_score(case_id: str) -> CaseScore:
    """All-zero score for a case with no scorable output."""
    return CaseScore(case_id, (0,) * len(CATEGORY_KEYS))


def aggregate(scores: Sequence[CaseScore]) -> dict[str, CategoryStats]:
    """Per-category mean and standard error over a corpus.

    SE uses the Bessel-corrected sample standard deviation over sqrt(n),
    which for 0/1 scores is sqrt(p(1-p)/(n-1)).
    """
    n = len(scores)
    if n < 2:
        raise InsufficientCases(f"need at least 2 cases, got {n}")
    result: dict[str, CategoryStats] = {}
    for index, key in enumerate(CATEGORY_KEYS):
        p = sum(score.bits[index] for score in scores) / n
        se = math.sqrt(p * (1.0 - p) / (n - 1))
        result[key] = CategoryStats(key, n, p, se)
    return result


def shapiro_wilk(values: Sequence[float]) -> tuple[float, float]:
    """Shapiro-Wilk normality test: returns (W, p); requires n >= 3."""
    if len(values) < 3:
        raise InsufficientCases(f"Shapiro-Wilk needs at least 3 values, got {len(values)}")
    result = _scipy_stats.shapiro([float(v) for v in values])
    return float(result.statistic), float(result.pvalue)


def paired_t_pvalue(differences: Sequence[float]) -> float:
    """Two-sided paired t-test p-value on a difference vector."""
    return float(_scipy_stats.ttest_1samp([float(d) for d in differences], 0.0).pvalue)


def wilcoxon_pvalue(differences: Sequence[float]) -> float:
    """Two-sided Wilcoxon signed-rank p-value, zeros dropped, mid-rank ties."""
    result = _scipy_stats.wilcoxon(
        [float(d) for d in differences], zero_method="wilcox", alternative="two-sided"
    )
    return float(result.pvalue)


def test_paired(differences: Sequence[float]) -> float | None:
    """Two-sided paired test on a difference vector.

    Zero-variance vectors carry no evidence and return None (rendered n/a).
    Otherwise normality is assessed with Shapiro-Wilk at alpha 0.05 (skipped
    for n < 3, where it is untestable and the t-test is used); normal-looking
    differences get a paired t-test, the rest a Wilcoxon signed-rank test
    with zeros dropped and mid-rank ties.
    """
    diffs = [float(d) for d in differences]
    n = len(diffs)
    if n < 2:
        raise InsufficientCases(f"need at least 2 differences, got {n}")
    if max(diffs) == min(diffs):
        return None
    if n >= 3:
        normal = shapiro_wilk(diffs)[1] >= 0.05
    else:
        normal = True
    if normal:
        return paired_t_pvalue(diffs)
    return wilcoxon_pvalue(diffs)


def compare(
    baseline_scores: Sequence[CaseScore],
    proposed_scores: Sequence[CaseScore],
    baseline_label: str = "baseline",
    proposed_label: str = "proposed",
    flagged_cases: Iterable[FlaggedCase] = (),
) -> Comparison:
    """Build the full per-category comparison for two paired score lists."""
    baseline_ids = [score.case_id for score in baseline_scores]
    proposed_ids = [score.case_id for score in proposed_scores]
    if baseline_ids != proposed_ids:
        raise CaseIdMismatch(
            f"baseline ids {baseline_ids!r} != proposed ids {proposed_ids!r}"
        )
    baseline_stats = aggregate(baseline_scores)
    proposed_stats = aggregate(proposed_scores)

    rows = []
    for index, (key, label) in enumerate(EVAL_CATEGORIES):
        b, p = baseline_stats[key], proposed_stats[key]
        # The printed-precision convention: improvements derive from the
        # 3-decimal means the table shows.
        rounded_b, rounded_p = round(b.mean, 3), round(p.mean, 3)
        improvement = rounded_p - rounded_b
        if improvement == 0:
            improvement = 0.0  # normalize -0.0
        rate = None if rounded_b == 0 else improvement / rounded_b * 100.0
        diffs = [
            ps.bits[index] - bs.bits[index]
            for bs, ps in zip(baseline_scores, proposed_scores)
        ]
        rows.append(
            CategoryComparison(
                category=key,
                label=label,
                baseline=b,
                proposed=p,
                absolute_improvement=improvement,
                improvement_rate=rate,
                p_value=test_paired(diffs),
            )
        )
    return Comparison(
        baseline_label=baseline_label,
        proposed_label=proposed_label,
        n=len(baseline_scores),
        categories=tuple(rows),
        flagged_cases=tuple(flagged_cases),
    )


def _format_cells(row: CategoryComparison) -> dict[str, str]:
    rate = "n/a" if row.improvement_rate is None else f"{row.improvement_rate:+.1f} %"
    p = "n/a" if row.p_value is None else f"{row.p_value:.3f}"
    return {
        "label": row.label,
        "baseline": f"{row.baseline.mean:.3f} ± {row.baseline.se:.3f}",
        "proposed": f"{row.proposed.mean:.3f} ± {row.proposed.se:.3f}",
        "improvement": f"{row.absolute_improvement:+.3f}",
        "rate": rate,
        "p_value": p,
    }


def _render_markdown(comparison: Comparison) -> str:
    header = (
        f"| Interpretation category | {comparison.baseline_label} (mean ± SE)"
        f" | {comparison.proposed_label} (mean ± SE)"
        " | Absolute improvement | Improvement rate | p-value |"
    )
    lines = [header, "| --- | --- | --- | --- | --- | --- |"]
    for row in comparison.categories:
        cells = _format_cells(row)
        lines.append(
            f"| {cells['label']} | {cells['baseline']} | {cells['proposed']}"
            f" | {cells['improvement']} | {cells['rate']} | {cells['p_value']} |"
        )
    if comparison.flagged_cases:
        lines.append("")
        lines.append("Flagged cases (scored on last-best output):")
        for flagged in comparison.flagged_cases:
            lines.append(f"- {flagged.case_id}: {flagged.run} {flagged.status}")
    return "\n".join(lines) + "\n"


def _render_csv(comparison: Comparison) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        [
            "interpretation_category",
            f"{comparison.baseline_label} (mean ± SE)",
            f"{comparison.proposed_label} (mean ± SE)",
            "absolute_improvement",
            "improvement_rate",
            "p_value",
        ]
    )
    for row in comparison.categories:
        cells = _format_cells(row)
        writer.writerow(
            [
                cells["label"],
                cells["baseline"],
                cells["proposed"],
                cells["improvement"],
                cells["rate"],
                cells["p_value"],
            ]
        )
    return buffer.getvalue()


def _render_json(comparison: Comparison) -> str:
    categories = []
    for row in comparison.categories:
        cells = _format_cells(row)
        categories.append(
            {
                "category": row.category,
                "label": row.label,
                "baseline_mean_se": cells["baseline"],
                "proposed_mean_se": cells["proposed"],
                "absolute_improvement": cells["improvement"],
                "improvement_rate": cells["rate"],
                "p_value": cells["p_value"],
                "baseline_mean": row.baseline.mean,
                "baseline_se": row.baseline.se,
                "proposed_mean": row.proposed.mean,
                "proposed_se": row.proposed.se,
            }
        )
    document = {
        "baseline_label": comparison.baseline_label,
        "proposed_label": comparison.proposed_label,
        "n": comparison.n,
        "categories": categories,
        "flagged_cases": [
            {"case_id": f.case_id, "run": f.run, "status": f.status}
            for f in comparison.flagged_cases
        ],
    }
    return json.dumps(document, indent=2, ensure_ascii=False) + "\n"


_RENDERERS = {
    "markdown": _render_markdown,
    "csv": _render_csv,
    "json": _render_json,
}


def render_report(comparison: Comparison, fmt: str) -> str:
    """Render the comparison as ``markdown``, ``csv`` or ``json``.

    All three renderings are built from the same formatted cells, so they
    agree cell for cell.
    """
    try:
        renderer = _RENDERERS[fmt]
    except KeyError:
        raise ValueError(f"unknown report format: {fmt!r}") from None
    return renderer(comparison)
