"""Paired comparison report: per-category accuracy, delta, CI and p, plus the
agreement table and McNemar's test."""

from __future__ import annotations

from typing import Mapping, Sequence

from .benchmark import CATEGORY_LABELS, CATEGORY_ORDER, BenchmarkCase, QuestionType
from .harness import GradedAnswer, per_category_accuracy
from .stats import (
    DEFAULT_RESAMPLES,
    DEFAULT_SEED,
    BootstrapResult,
    NoDiscordantPairs,
    agreement,
    bootstrap_paired,
    mcnemar,
    paired_outcomes,
    per_category_bootstrap,
)


def _categories(grades: Sequence[GradedAnswer], cases: Sequence[BenchmarkCase] | None) -> dict[str, str]:
    cats = {g.question_id: g.category for g in grades if g.category is not None}
    if cases is not None:
        cats.update({c.question_id: c.category.value for c in cases})
    return cats


def _row(label: str, r: BootstrapResult) -> dict:
    return {
        "category": label,
        "n": r.n,
        "a": r.a_accuracy,
        "a_ci": list(r.a_ci),
        "b": r.b_accuracy,
        "b_ci": list(r.b_ci),
        "delta": r.point_delta,
        "ci": [r.ci_low, r.ci_high],
        "p": r.p_one_sided,
    }


def compare_grades(
    grades_a: Sequence[GradedAnswer],
    grades_b: Sequence[GradedAnswer],
    *,
    cases: Sequence[BenchmarkCase] | None = None,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = DEFAULT_SEED,
    labels: tuple[str, str] = ("A", "B"),
) -> dict:
    """Compare two graded runs on the question ids graded in both."""
    a = {g.question_id: g.correct for g in grades_a if not g.flagged}
    b = {g.question_id: g.correct for g in grades_b if not g.flagged}
    cats = _categories([*grades_a, *grades_b], cases)
    shared = sorted(set(a) & set(b))
    missing = [q for q in shared if q not in cats]
    if missing:
        raise KeyError(f"no category for question ids {missing[:5]}; pass the benchmark cases")
    outcomes = paired_outcomes(a, b, cats)

    per_cat = per_category_bootstrap(outcomes, resamples, seed)
    rows = []
    for cat in CATEGORY_ORDER:
        if cat.value in per_cat.results:
            rows.append(_row(CATEGORY_LABELS[cat], per_cat.results[cat.value]))
    overall = bootstrap_paired(outcomes, resamples, seed)
    rows.append(_row("Overall", overall))

    table = agreement(outcomes)
    try:
        mc = mcnemar(table)
        mc_out = {"chi_squared": mc.chi_squared, "p_value": mc.p_value}
    except NoDiscordantPairs as exc:
        mc_out = {"error": str(exc)}

    a_only_by_cat: dict[str, int] = {}
    for o in outcomes:
        if o.a_correct and not o.b_correct:
            a_only_by_cat[o.category] = a_only_by_cat.get(o.category, 0) + 1

    return {
        "labels": list(labels),
        "n_shared": len(outcomes),
        "resamples": resamples,
        "seed": seed,
        "rows": rows,
        "skipped_categories": {str(k): v for k, v in per_cat.skipped.items()},
        "agreement": {
            "both_correct": table.both_correct,
            f"{labels[0]}_only": table.a_only,
            f"{labels[1]}_only": table.b_only,
            "both_wrong": table.both_wrong,
        },
        f"{labels[0]}_only_by_category": a_only_by_cat,
        "mcnemar": mc_out,
    }


_CATS = {c.value for c in QuestionType}


def _fmt_pct(x: float, decimals: int) -> str:
    return f"{x:.{decimals}f}"


def _fmt_delta(x: float, decimals: int) -> str:
    s = f"{x:+.{decimals}f}"
    return "0" if float(s) == 0 else s


def _fmt_p(p: float, resamples: int) -> str:
    if p == 0:
        return f"< {1 / resamples:.4f}".rstrip("0")
    return f"{p:.3f}"


def render_markdown(report: Mapping) -> str:
    la, lb = report["labels"]
    lines = [
        f"| Category | {la} | {lb} | Delta | 95% CI | p |",
        "|---|---|---|---|---|---|",
    ]
    for row in report["rows"]:
        d = 1 if row["category"] == "Overall" else 0
        lines.append(
            "| {cat} | {a} [{alo}, {ahi}] | {b} [{blo}, {bhi}] | {delta} | [{lo}, {hi}] | {p} |".format(
                cat=row["category"],
                a=_fmt_pct(row["a"], d),
                alo=_fmt_pct(row["a_ci"][0], 0),
                ahi=_fmt_pct(row["a_ci"][1], 0),
                b=_fmt_pct(row["b"], d),
                blo=_fmt_pct(row["b_ci"][0], 0),
                bhi=_fmt_pct(row["b_ci"][1], 0),
                delta=_fmt_delta(row["delta"], d),
                lo=_fmt_delta(row["ci"][0], 0),
                hi=_fmt_delta(row["ci"][1], 0),
                p=_fmt_p(row["p"], report["resamples"]),
            )
        )
    for cat, why in report.get("skipped_categories", {}).items():
        lines.append(f"| {CATEGORY_LABELS[QuestionType(cat)] if cat in _CATS else cat} | skipped ({why}) | | | | |")
    ag = report["agreement"]
    lines += [
        "",
        f"Paired questions: {report['n_shared']} (resamples={report['resamples']}, seed={report['seed']})",
        "",
        f"| | {lb} correct | {lb} wrong |",
        "|---|---|---|",
        f"| {la} correct | {ag['both_correct']} | {ag[f'{la}_only']} |",
        f"| {la} wrong | {ag[f'{lb}_only']} | {ag['both_wrong']} |",
        "",
    ]
    mc = report["mcnemar"]
    if "error" in mc:
        lines.append(f"McNemar: {mc['error']}")
    else:
        lines.append(f"McNemar (continuity-corrected): chi2 = {mc['chi_squared']:.2f}, p = {mc['p_value']:.2g}")
    return "\n".join(lines) + "\n"


def accuracy_markdown(table_by_label: Mapping[str, object]) -> str:
    """Per-condition accuracy rows (per-type whole percent, overall one decimal)."""
    cols = [c.value for c in CATEGORY_ORDER]
    head = ["Condition", "Overall", *[CATEGORY_LABELS[QuestionType(c)] for c in cols]]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for label, table in table_by_label.items():
        disp = table.display()
        lines.append("| " + " | ".join([label, disp["overall"], *[disp[c] for c in cols]]) + " |")
    return "\n".join(lines) + "\n"


__all__ = ["compare_grades", "render_markdown", "accuracy_markdown", "per_category_accuracy"]
