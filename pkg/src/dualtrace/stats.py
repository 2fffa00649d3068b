"""Paired-comparison statistics for two conditions graded on the same questions.

Resampling uses numpy's PCG64 bit generator seeded through
``numpy.random.SeedSequence(seed)``. Each resample draws ``n`` question
indices with ``Generator.integers(0, n)`` (Lemire bounded draws), row by row,
so a run is reproducible from ``(outcomes, resamples, seed)``. Per-category
runs use the child stream ``SeedSequence(seed, spawn_key=(i,))`` where ``i``
is the category's position in sorted label order.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats as sps

DEFAULT_RESAMPLES = 10_000
DEFAULT_SEED = 42


class StatsError(ValueError):
    pass


class NoDiscordantPairs(StatsError):
    pass


@dataclass(frozen=True)
class PairedOutcome:
    question_id: str
    a_correct: bool
    b_correct: bool
    category: Hashable | None = None


def paired_outcomes(
    a: Mapping[str, bool],
    b: Mapping[str, bool],
    categories: Mapping[str, Hashable] | None = None,
) -> list[PairedOutcome]:
    """Pair two grade maps on the intersection of their question ids (sorted)."""
    shared = sorted(set(a) & set(b))
    categories = categories or {}
    return [PairedOutcome(q, bool(a[q]), bool(b[q]), categories.get(q)) for q in shared]


def _check(outcomes: Sequence[PairedOutcome]) -> None:
    ids = [o.question_id for o in outcomes]
    if len(set(ids)) != len(ids):
        raise StatsError("question ids must be unique")


@dataclass(frozen=True)
class AgreementTable:
    both_correct: int
    a_only: int
    b_only: int
    both_wrong: int

    @property
    def n(self) -> int:
        return self.both_correct + self.a_only + self.b_only + self.both_wrong

    @property
    def discordant(self) -> int:
        return self.a_only + self.b_only

    @property
    def point_delta(self) -> float:
        """Accuracy difference a - b in percentage points."""
        return 100.0 * (self.a_only - self.b_only) / self.n

    def transpose(self) -> AgreementTable:
        return AgreementTable(self.both_correct, self.b_only, self.a_only, self.both_wrong)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.both_correct, self.a_only, self.b_only, self.both_wrong)


def agreement(outcomes: Sequence[PairedOutcome]) -> AgreementTable:
    _check(outcomes)
    counts = defaultdict(int)
    for o in outcomes:
        counts[(o.a_correct, o.b_correct)] += 1
    return AgreementTable(counts[(True, True)], counts[(True, False)], counts[(False, True)], counts[(False, False)])


def outcomes_from_table(table: AgreementTable, *, prefix: str = "q", category: Hashable | None = None) -> list[PairedOutcome]:
    """Synthetic per-question outcomes realizing a 2x2 table (both-correct first)."""
    cells = [(True, True)] * table.both_correct + [(True, False)] * table.a_only
    cells += [(False, True)] * table.b_only + [(False, False)] * table.both_wrong
    width = len(str(len(cells)))
    return [PairedOutcome(f"{prefix}{i:0{width}d}", a, b, category) for i, (a, b) in enumerate(cells)]


@dataclass(frozen=True)
class McNemarResult:
    chi_squared: float
    p_value: float
    a_only: int
    b_only: int


def mcnemar(table: AgreementTable) -> McNemarResult:
    """McNemar's chi-squared with continuity correction, clamped at zero, 1 df upper tail."""
    b, c = table.a_only, table.b_only
    if b + c < 1:
        raise NoDiscordantPairs("no discordant pairs: McNemar's test is undefined")
    chi2 = max(abs(b - c) - 1, 0) ** 2 / (b + c)
    return McNemarResult(chi2, float(sps.chi2.sf(chi2, 1)), b, c)


@dataclass(frozen=True)
class BootstrapResult:
    n: int
    point_delta: float
    ci_low: float
    ci_high: float
    p_one_sided: float
    resamples: int
    seed: int
    a_accuracy: float
    a_ci: tuple[float, float]
    b_accuracy: float
    b_ci: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "point_delta": self.point_delta,
            "ci": [self.ci_low, self.ci_high],
            "p_one_sided": self.p_one_sided,
            "resamples": self.resamples,
            "seed": self.seed,
            "a_accuracy": self.a_accuracy,
            "a_ci": list(self.a_ci),
            "b_accuracy": self.b_accuracy,
            "b_ci": list(self.b_ci),
        }


def _generator(seed: int, substream: int | None = None) -> np.random.Generator:
    if substream is None:
        ss = np.random.SeedSequence(seed)
    else:
        ss = np.random.SeedSequence(seed, spawn_key=(substream,))
    return np.random.Generator(np.random.PCG64(ss))


def resample_indices(n: int, resamples: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n, size=(resamples, n))


def _bootstrap(a: np.ndarray, b: np.ndarray, resamples: int, seed: int, rng: np.random.Generator, alpha: float) -> BootstrapResult:
    n = len(a)
    idx = resample_indices(n, resamples, rng)
    a_sums = a[idx].sum(axis=1)
    b_sums = b[idx].sum(axis=1)
    diff = a_sums - b_sums
    q = [100 * alpha / 2, 100 * (1 - alpha / 2)]
    d_lo, d_hi = np.percentile(100.0 * diff / n, q)
    a_lo, a_hi = np.percentile(100.0 * a_sums / n, q)
    b_lo, b_hi = np.percentile(100.0 * b_sums / n, q)
    return BootstrapResult(
        n=n,
        point_delta=100.0 * (int(a.sum()) - int(b.sum())) / n,
        ci_low=float(d_lo),
        ci_high=float(d_hi),
        p_one_sided=float(np.count_nonzero(diff <= 0) / resamples),
        resamples=resamples,
        seed=seed,
        a_accuracy=100.0 * int(a.sum()) / n,
        a_ci=(float(a_lo), float(a_hi)),
        b_accuracy=100.0 * int(b.sum()) / n,
        b_ci=(float(b_lo), float(b_hi)),
    )


def bootstrap_paired(
    outcomes: Sequence[PairedOutcome],
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = DEFAULT_SEED,
    *,
    confidence: float = 0.95,
    substream: int | None = None,
) -> BootstrapResult:
    """Paired percentile bootstrap of the accuracy difference a - b.

    The one-sided p-value is the fraction of resamples whose difference is
    zero or less. Per-condition accuracy CIs come from the same resamples.
    """
    _check(outcomes)
    if len(outcomes) < 2:
        raise StatsError("bootstrap needs at least 2 paired outcomes")
    if resamples < 1:
        raise StatsError("resamples must be >= 1")
    a = np.fromiter((o.a_correct for o in outcomes), dtype=np.int64, count=len(outcomes))
    b = np.fromiter((o.b_correct for o in outcomes), dtype=np.int64, count=len(outcomes))
    return _bootstrap(a, b, resamples, seed, _generator(seed, substream), 1 - confidence)


@dataclass(frozen=True)
class CategoryBootstrap:
    results: dict[Hashable, BootstrapResult]
    skipped: dict[Hashable, str]


def per_category_bootstrap(
    outcomes: Sequence[PairedOutcome],
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = DEFAULT_SEED,
    *,
    confidence: float = 0.95,
) -> CategoryBootstrap:
    """Resample independently within each category label; categories with n < 2 are skipped."""
    _check(outcomes)
    groups: dict[Hashable, list[PairedOutcome]] = defaultdict(list)
    for o in outcomes:
        if o.category is None:
            raise StatsError(f"{o.question_id}: missing category label")
        groups[o.category].append(o)
    results, skipped = {}, {}
    for offset, label in enumerate(sorted(groups, key=str)):
        members = groups[label]
        if len(members) < 2:
            skipped[label] = f"n={len(members)} < 2"
            continue
        results[label] = bootstrap_paired(members, resamples, seed, confidence=confidence, substream=offset)
    return CategoryBootstrap(results, skipped)


def paired_delta_se(outcomes: Iterable[PairedOutcome]) -> float:
    """Plug-in standard error of the paired difference, in percentage points."""
    d = np.array([int(o.a_correct) - int(o.b_correct) for o in outcomes], dtype=float)
    return float(100.0 * d.std(ddof=0) / np.sqrt(len(d)))
