"""Tie-aware AP / DCG / NDCG on Hamming rankings.

A tie-aware metric is the average of the classical metric over every
ordering of the items inside each tie group. For AP and DCG the average has
a closed form that only needs the per-distance, per-level histogram
``n[d, v]``, so evaluation is linear in the database size.

The classical (tie-unaware) metrics, the tie-breaking strategies and the
brute-force permutation average are kept here too, mainly to audit and test
the closed forms.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import (
    CombinatorialGuardError,
    DataError,
    DimensionError,
    UndefinedMetricError,
    UnknownLevelError,
)
from .hamming import (
    BinaryCodebook,
    TieGroupedRanking,
    gain,
    pairwise_distances,
    rank_by_distance,
    sort_gains_desc,
)

Metric = Literal["AP", "DCG", "NDCG"]
Strategy = Literal["optimistic", "pessimistic", "random", "by_index"]

ORACLE_MAX_PERMUTATIONS = 10**6


@dataclass(frozen=True)
class AffinityLevels:
    """Affinity of every database item to one fixed query."""

    per_item: np.ndarray
    levels: tuple[int, ...] = (0, 1)

    def __post_init__(self) -> None:
        levels = tuple(sorted({int(v) for v in self.levels}))
        if not levels or levels[0] < 0:
            raise DataError("affinity levels must be non-empty and non-negative")
        per_item = np.asarray(self.per_item, dtype=np.int64)
        if per_item.ndim != 1:
            raise DimensionError("per_item affinities must be 1D")
        unknown = ~np.isin(per_item, levels)
        if unknown.any():
            raise UnknownLevelError(
                f"affinity value {per_item[unknown][0]} is not in level set {list(levels)}"
            )
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "per_item", per_item)

    @property
    def level_index(self) -> np.ndarray:
        return np.searchsorted(np.asarray(self.levels), self.per_item)

    @property
    def gains(self) -> np.ndarray:
        return gain(self.per_item)

    @property
    def relevant(self) -> np.ndarray:
        """Binary reduction: any positive level counts as relevant."""
        return self.per_item > 0


@dataclass(frozen=True)
class TieHistogram:
    """Counts ``counts[d, k]`` of items at distance d with level ``levels[k]``."""

    counts: np.ndarray
    levels: tuple[int, ...]

    @property
    def num_bits(self) -> int:
        return self.counts.shape[0] - 1

    @property
    def cum(self) -> np.ndarray:
        return np.cumsum(self.counts, axis=0)

    @property
    def n(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def N(self) -> np.ndarray:
        return np.cumsum(self.n)

    @property
    def n_pos(self) -> np.ndarray:
        return self.counts[:, np.asarray(self.levels) > 0].sum(axis=1)

    @property
    def N_pos(self) -> np.ndarray:
        return np.cumsum(self.n_pos)

    @property
    def total_pos(self) -> int:
        return int(self.n_pos.sum())

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def level_gains(self) -> np.ndarray:
        return gain(self.levels)


def build_tie_histogram(ranking: TieGroupedRanking, affinities: AffinityLevels) -> TieHistogram:
    if ranking.total != len(affinities.per_item):
        raise DimensionError(
            f"ranking covers {ranking.total} items but {len(affinities.per_item)} affinities given"
        )
    num_levels = len(affinities.levels)
    dist = np.repeat(np.arange(ranking.num_bits + 1), ranking.sizes)
    lvl = affinities.level_index[ranking.order]
    flat = np.bincount(dist * num_levels + lvl, minlength=(ranking.num_bits + 1) * num_levels)
    return TieHistogram(flat.reshape(ranking.num_bits + 1, num_levels), affinities.levels)


def _discount(ranks: np.ndarray) -> np.ndarray:
    return 1.0 / np.log2(ranks + 1.0)


def harmonic_table(n: int) -> np.ndarray:
    """``H[t] = 1 + 1/2 + ... + 1/t`` for t = 0..n."""
    return np.concatenate([[0.0], np.cumsum(1.0 / np.arange(1, n + 1))])


def discount_table(n: int) -> np.ndarray:
    """Cumulative log discount ``Dc[t] = sum_{s<=t} 1/log2(s+1)`` for t = 0..n."""
    return np.concatenate([[0.0], np.cumsum(_discount(np.arange(1, n + 1, dtype=np.float64)))])


def _check_cutoff(k: int | None, total: int) -> int:
    if k is None:
        return total
    if not 1 <= k <= total:
        raise DataError(f"cutoff k={k} outside [1, {total}]")
    return int(k)


def _tie_bounds(n: np.ndarray, k) -> tuple[np.ndarray, np.ndarray]:
    """First and one-past-last rank of every tie, both clipped to the cutoff."""
    N = np.cumsum(n, axis=-1)
    k = np.asarray(k)[..., None]
    return np.minimum(N - n, k), np.minimum(N, k)


def ap_from_counts(n: np.ndarray, n_pos: np.ndarray, k=None, H: np.ndarray | None = None) -> np.ndarray:
    """Tie-aware AP@k from per-tie totals and relevant counts, shape ``(..., b+1)``.

    Within tie d the summand is ``(P + (t - a - 1) r + 1) / t`` with
    ``a = N_{d-1}``, ``P = N+_{d-1}`` and ``r = (n+ - 1)/(n - 1)``; summed over
    ranks t it is ``r m + (P + 1 - r (a + 1)) (H[hi] - H[lo])``. Returns NaN
    where there is no relevant item.
    """
    n = np.asarray(n, dtype=np.int64)
    n_pos = np.asarray(n_pos, dtype=np.int64)
    total = n.sum(axis=-1)
    k = total if k is None else k
    H = harmonic_table(int(np.max(total, initial=0))) if H is None else H
    lo, hi = _tie_bounds(n, k)
    nf, pf = n.astype(np.float64), n_pos.astype(np.float64)
    prev = np.cumsum(nf, axis=-1) - nf
    prev_pos = np.cumsum(pf, axis=-1) - pf
    # (n+ - 1)/(n - 1) is taken as 0 for singleton ties; its coefficient vanishes there
    r = np.divide(pf - 1, nf - 1, out=np.zeros_like(nf), where=n > 1)
    share = np.divide(pf, nf, out=np.zeros_like(nf), where=n > 0)
    tie_sum = r * (hi - lo) + (prev_pos + 1 - r * (prev + 1)) * (H[hi] - H[lo])
    n_rel = pf.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_rel > 0, (share * tie_sum).sum(axis=-1) / n_rel, np.nan)


def dcg_from_counts(counts: np.ndarray, level_gains: np.ndarray, k=None, Dc: np.ndarray | None = None) -> np.ndarray:
    """Tie-aware DCG@k from ``counts[..., d, level]``; a straddling tie keeps its mean gain."""
    counts = np.asarray(counts, dtype=np.int64)
    n = counts.sum(axis=-1)
    total = n.sum(axis=-1)
    k = total if k is None else k
    Dc = discount_table(int(np.max(total, initial=0))) if Dc is None else Dc
    lo, hi = _tie_bounds(n, k)
    mean_gain = np.divide(counts @ level_gains, n, out=np.zeros(n.shape), where=n > 0)
    return (mean_gain * (Dc[hi] - Dc[lo])).sum(axis=-1)


def ideal_dcg_from_counts(level_counts: np.ndarray, level_gains: np.ndarray, k=None, Dc: np.ndarray | None = None) -> np.ndarray:
    """Ideal DCG@k from per-level item counts: gains placed in descending order."""
    order = np.argsort(level_gains)[::-1]
    desc = np.asarray(level_counts, dtype=np.int64)[..., order]
    return dcg_from_counts(desc[..., :, None] * np.eye(len(order), dtype=np.int64), level_gains[order], k, Dc)


def ap_tie_aware_at_k(h: TieHistogram, k: int | None) -> float:
    """Tie-aware AP truncated at rank ``k``, normalised by the total relevant count."""
    if h.total_pos == 0:
        raise UndefinedMetricError("AP is undefined without relevant items")
    k = _check_cutoff(k, h.total)
    return float(ap_from_counts(h.n, h.n_pos, k))


def ap_tie_aware(h: TieHistogram) -> float:
    """Tie-aware average precision over the full ranking."""
    return ap_tie_aware_at_k(h, None)


def dcg_tie_aware(h: TieHistogram, cutoff: int | None = None) -> float:
    """Tie-aware DCG; the tie straddling ``cutoff`` keeps its full mean gain."""
    k = _check_cutoff(cutoff, h.total) if h.total else 0
    return float(dcg_from_counts(h.counts, h.level_gains, k))


def ideal_dcg(affinities: AffinityLevels, cutoff: int | None = None) -> float:
    gains = sort_gains_desc(affinities.per_item, affinities.levels)
    k = len(gains) if cutoff is None else min(cutoff, len(gains))
    return float(np.sum(gains[:k] * _discount(np.arange(1, k + 1, dtype=np.float64))))


def ndcg_tie_aware(h: TieHistogram, affinities: AffinityLevels, cutoff: int | None = None) -> float:
    ideal = ideal_dcg(affinities, cutoff)
    if ideal <= 0:
        raise UndefinedMetricError("NDCG is undefined when every gain is zero")
    return dcg_tie_aware(h, cutoff) / ideal


# classical metrics on a fixed linear order


def ap_classical(relevant: Sequence[bool], cutoff: int | None = None) -> float:
    rel = np.asarray(relevant, dtype=np.float64)
    total = rel.sum()
    if total == 0:
        raise UndefinedMetricError("AP is undefined without relevant items")
    k = _check_cutoff(cutoff, len(rel))
    ranks = np.arange(1, k + 1)
    precision = np.cumsum(rel[:k]) / ranks
    return float(np.sum(precision * rel[:k]) / total)


def dcg_classical(gains: Sequence[float], cutoff: int | None = None) -> float:
    g = np.asarray(gains, dtype=np.float64)
    k = _check_cutoff(cutoff, len(g)) if len(g) else 0
    return float(np.sum(g[:k] * _discount(np.arange(1, k + 1, dtype=np.float64))))


def _classical(
    order: np.ndarray, affinities: AffinityLevels, metric: Metric, cutoff: int | None
) -> float:
    if metric == "AP":
        return ap_classical(affinities.relevant[order], cutoff)
    if metric == "DCG":
        return dcg_classical(affinities.gains[order], cutoff)
    if metric == "NDCG":
        ideal = ideal_dcg(affinities, cutoff)
        if ideal <= 0:
            raise UndefinedMetricError("NDCG is undefined when every gain is zero")
        return dcg_classical(affinities.gains[order], cutoff) / ideal
    raise ValueError(f"unknown metric {metric!r}")


def tie_aware(
    ranking: TieGroupedRanking,
    affinities: AffinityLevels,
    metric: Metric,
    cutoff: int | None = None,
) -> float:
    """Dispatch to the closed-form tie-aware metric."""
    h = build_tie_histogram(ranking, affinities)
    if metric == "AP":
        return ap_tie_aware_at_k(h, cutoff)
    if metric == "DCG":
        return dcg_tie_aware(h, cutoff)
    if metric == "NDCG":
        return ndcg_tie_aware(h, affinities, cutoff)
    raise ValueError(f"unknown metric {metric!r}")


def flatten_ranking(
    ranking: TieGroupedRanking,
    affinities: AffinityLevels,
    strategy: Strategy,
    seed: int | None = None,
) -> np.ndarray:
    """Break ties to obtain a linear order of database indices."""
    if strategy == "by_index":
        return ranking.order.copy()
    rng = np.random.default_rng(seed) if strategy == "random" else None
    pieces = []
    for group in ranking.groups:
        if strategy == "random":
            pieces.append(rng.permutation(group))
            continue
        if strategy == "optimistic":
            key = -affinities.per_item[group]
        elif strategy == "pessimistic":
            key = affinities.per_item[group]
        else:
            raise ValueError(f"unknown tie-breaking strategy {strategy!r}")
        pieces.append(group[np.argsort(key, kind="stable")])
    return np.concatenate(pieces) if pieces else ranking.order.copy()


def metric_with_tiebreak(
    ranking: TieGroupedRanking,
    affinities: AffinityLevels,
    metric: Metric,
    strategy: Strategy,
    seed: int | None = None,
    cutoff: int | None = None,
) -> float:
    order = flatten_ranking(ranking, affinities, strategy, seed)
    return _classical(order, affinities, metric, cutoff)


def tiebreak_range(
    ranking: TieGroupedRanking,
    affinities: AffinityLevels,
    metric: Metric,
    cutoff: int | None = None,
) -> tuple[float, float, float]:
    """(worst, best, tie-aware) value over all within-tie orderings."""
    lo = metric_with_tiebreak(ranking, affinities, metric, "pessimistic", cutoff=cutoff)
    hi = metric_with_tiebreak(ranking, affinities, metric, "optimistic", cutoff=cutoff)
    return lo, hi, tie_aware(ranking, affinities, metric, cutoff)


def permutation_count(ranking: TieGroupedRanking) -> int:
    return math.prod(math.factorial(int(s)) for s in ranking.sizes)


def permutation_average_oracle(
    ranking: TieGroupedRanking,
    affinities: AffinityLevels,
    metric: Metric,
    cutoff: int | None = None,
    max_permutations: int = ORACLE_MAX_PERMUTATIONS,
) -> float:
    """Mean classical metric over every within-tie permutation, by enumeration."""
    count = permutation_count(ranking)
    if count > max_permutations:
        raise CombinatorialGuardError(
            f"{count} within-tie permutations exceed the budget of {max_permutations}"
        )
    per_group = [list(itertools.permutations(g.tolist())) for g in ranking.groups if len(g)]
    values = [
        _classical(np.fromiter(itertools.chain.from_iterable(choice), dtype=np.int64), affinities, metric, cutoff)
        for choice in itertools.product(*per_group)
    ]
    return math.fsum(values) / len(values)


@dataclass
class MetricReport:
    """Per-query values of one metric; ``None`` marks an undefined query."""

    name: str
    per_query: list[float | None]
    cutoff: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def defined(self) -> list[float]:
        return [v for v in self.per_query if v is not None]

    @property
    def num_undefined(self) -> int:
        return len(self.per_query) - len(self.defined)

    @property
    def mean(self) -> float | None:
        vals = self.defined
        return math.fsum(vals) / len(vals) if vals else None

    def to_dict(self) -> dict:
        return {
            "metric": self.name,
            "cutoff": self.cutoff,
            "mean": self.mean,
            "num_queries": len(self.per_query),
            "num_undefined": self.num_undefined,
            "per_query": self.per_query,
            **self.extra,
        }


def evaluate_codes(
    query: BinaryCodebook,
    database: BinaryCodebook,
    level_matrix: np.ndarray,
    levels: Sequence[int],
    cutoff: int | None = None,
    chunk: int = 256,
    workers: int = 1,
) -> dict[str, MetricReport]:
    """Tie-aware AP, AP@k, DCG and NDCG of Hamming ranking for every query.

    ``level_matrix[q, i]`` is the affinity level of database item i to query
    q; AP treats every positive level as relevant. Per query this is a
    counting pass over the integer distances (the tie sizes per level) plus
    O(b) closed-form work.
    """
    level_matrix = np.asarray(level_matrix)
    levels = tuple(sorted(int(v) for v in levels))
    nq, n = query.num_items, database.num_items
    if level_matrix.shape != (nq, n):
        raise DimensionError(f"affinity matrix {level_matrix.shape} does not match {nq} queries x {n} items")
    if query.num_bits != database.num_bits:
        raise DimensionError(f"bit widths differ: {query.num_bits} vs {database.num_bits}")
    level_arr = np.asarray(levels)
    lvl = np.searchsorted(level_arr, level_matrix)
    if np.any(lvl >= len(levels)) or np.any(level_arr[np.minimum(lvl, len(levels) - 1)] != level_matrix):
        raise UnknownLevelError(f"affinity matrix holds values outside level set {list(levels)}")
    k = None if cutoff is None else min(cutoff, n)
    b, L = database.num_bits, len(levels)
    H, Dc = harmonic_table(n), discount_table(n)
    level_gains = gain(levels)
    ap, ap_k, dcg, ndcg = (np.empty(nq) for _ in range(4))

    def run(start: int) -> None:
        stop = min(start + chunk, nq)
        dist = pairwise_distances(query[start:stop], database)
        rows = np.arange(stop - start)[:, None]
        flat = (rows * (b + 1) + dist) * L + lvl[start:stop]
        counts = np.bincount(flat.ravel(), minlength=(stop - start) * (b + 1) * L).reshape(-1, b + 1, L)
        n_tie = counts.sum(axis=-1)
        n_pos = counts[..., level_arr > 0].sum(axis=-1)
        ap[start:stop] = ap_from_counts(n_tie, n_pos, None, H)
        ap_k[start:stop] = ap_from_counts(n_tie, n_pos, k, H) if k else np.nan
        dcg[start:stop] = dcg_from_counts(counts, level_gains, None, Dc)
        ideal = ideal_dcg_from_counts(counts.sum(axis=1), level_gains, None, Dc)
        with np.errstate(invalid="ignore", divide="ignore"):
            ndcg[start:stop] = np.where(ideal > 0, dcg[start:stop] / ideal, np.nan)

    # chunks write disjoint slices, so threads need no locking
    starts = range(0, nq, chunk)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, starts))
    else:
        for start in starts:
            run(start)

    def listed(values):
        return [None if np.isnan(v) else float(v) for v in values]

    reports = {
        "AP": MetricReport("AP_T", listed(ap)),
        "DCG": MetricReport("DCG_T", listed(dcg)),
        "NDCG": MetricReport("NDCG_T", listed(ndcg)),
    }
    if k:
        reports["AP@k"] = MetricReport("AP_T@k", listed(ap_k), cutoff=k)
    return reports


AUDIT_STRATEGIES = ("pessimistic", "optimistic", "random", "tie_aware")


def audit_codes(
    query: BinaryCodebook,
    database: BinaryCodebook,
    level_matrix: np.ndarray,
    levels: Sequence[int],
    metric: Metric = "AP",
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Per-query metric under each tie-breaking strategy plus the tie-aware value.

    Undefined queries (no relevant item, or zero ideal DCG) come back as NaN.
    Query q's random order is seeded with ``seed + q``.
    """
    level_matrix = np.asarray(level_matrix)
    if level_matrix.shape != (query.num_items, database.num_items):
        raise DimensionError(
            f"affinity matrix {level_matrix.shape} does not match {query.num_items} queries x {database.num_items} items"
        )
    dist = pairwise_distances(query, database)
    out = {name: np.full(query.num_items, np.nan) for name in AUDIT_STRATEGIES}
    for q in range(query.num_items):
        ranking = rank_by_distance(dist[q], database.num_bits)
        aff = AffinityLevels(level_matrix[q], levels)
        try:
            lo, hi, exact = tiebreak_range(ranking, aff, metric)
            rnd = metric_with_tiebreak(ranking, aff, metric, "random", seed=seed + q)
        except UndefinedMetricError:
            continue
        out["pessimistic"][q], out["optimistic"][q], out["random"][q], out["tie_aware"][q] = lo, hi, rnd, exact
    return out
