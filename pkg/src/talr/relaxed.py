"""Continuous relaxations of the tie-aware objectives.

Pipeline: activations -> tanh codes -> relaxed Hamming distances -> soft
histograms ``c[d, v]`` (triangular binning) -> AP/DCG relaxations.

Soft-histogram arrays have shape ``(..., b + 1, L)``: any leading batch axes,
then distance bins, then affinity levels. The per-bin ``*_terms`` functions
return the contribution of each bin, shape ``(..., b + 1)``, and broadcast
over the batch axes so a whole minibatch is evaluated at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, NumericError
from .hamming import gain
from .metrics import AffinityLevels, TieHistogram

LN2 = math.log(2.0)
RATIO_EPS = 1e-6
EMPTY_BIN = 1e-12
DCG_SHIFT = 0.5
AP_SHIFT = 0.5
LI_TOL = 1e-10
LI_MAX_DEPTH = 40

OBJECTIVES = ("AP_s", "DCG_s", "AP_r", "DCG_r")


@dataclass(frozen=True)
class RelaxedCodes:
    """tanh-relaxed codes, one row per item."""

    values: np.ndarray
    alpha: float

    @property
    def num_bits(self) -> int:
        return self.values.shape[1]


def relax_codes(activations: np.ndarray, alpha: float) -> RelaxedCodes:
    if not alpha > 0:
        raise DataError(f"tanh scale alpha must be positive, got {alpha}")
    f = np.asarray(activations, dtype=np.float64)
    if not np.isfinite(f).all():
        raise DataError("activations contain non-finite values")
    return RelaxedCodes(np.tanh(alpha * f), float(alpha))


def relaxed_distance(q: np.ndarray, x: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if q.shape != x.shape or q.ndim != 1:
        raise DimensionError(f"code shapes differ: {q.shape} vs {x.shape}")
    return 0.5 * (len(q) - float(q @ x))


def relaxed_pairwise(codes: np.ndarray) -> np.ndarray:
    """Relaxed Hamming distance between every pair of rows."""
    codes = np.asarray(codes, dtype=np.float64)
    return 0.5 * (codes.shape[1] - codes @ codes.T)


def soft_bin(z, d, slope: float = 1.0):
    """Triangular kernel of half-width ``slope`` centred on bin ``d``."""
    return np.maximum(0.0, 1.0 - np.abs(np.asarray(z, dtype=np.float64) - d) / slope)


def soft_bin_grad(z, d, slope: float = 1.0):
    """d soft_bin / dz; zero at the three kink points."""
    diff = np.asarray(z, dtype=np.float64) - d
    inside = (np.abs(diff) < slope) & (diff != 0)
    return np.where(inside, -np.sign(diff) / slope, 0.0)


@dataclass(frozen=True)
class SoftHistogramSet:
    """Soft counts ``soft[d, k]`` for distance bin d and level ``levels[k]``."""

    soft: np.ndarray
    levels: tuple[int, ...]
    slope: float = 1.0

    @property
    def num_bits(self) -> int:
        return self.soft.shape[-2] - 1

    @property
    def cum(self) -> np.ndarray:
        return np.cumsum(self.soft, axis=-2)

    @property
    def c(self) -> np.ndarray:
        return self.soft.sum(axis=-1)

    @property
    def C(self) -> np.ndarray:
        return np.cumsum(self.c, axis=-1)

    @property
    def positive(self) -> np.ndarray:
        return np.asarray(self.levels) > 0

    @property
    def c_pos(self) -> np.ndarray:
        return self.soft[..., self.positive].sum(axis=-1)

    @property
    def C_pos(self) -> np.ndarray:
        return np.cumsum(self.c_pos, axis=-1)

    @classmethod
    def from_hard(cls, h: TieHistogram) -> SoftHistogramSet:
        return cls(h.counts.astype(np.float64), h.levels)


def soft_histogram(
    distances: np.ndarray, level_index: np.ndarray, num_bits: int, num_levels: int, slope: float = 1.0
) -> np.ndarray:
    """Soft counts from relaxed distances.

    ``distances`` and ``level_index`` share shape ``(..., n)``; entries with a
    negative level index are ignored. Returns shape ``(..., b + 1, L)``.
    """
    if not slope > 0:
        raise DataError(f"bin slope must be positive, got {slope}")
    z = np.asarray(distances, dtype=np.float64)
    level_index = np.broadcast_to(level_index, z.shape)
    lead = z.shape[:-1]
    rows = np.arange(int(np.prod(lead)), dtype=np.int64).reshape(lead + (1,))
    keep = level_index >= 0
    flat_w, flat_i = [], []
    # only bins within one slope of z are non-zero
    for d, w in kernel_band(z, num_bits, slope):
        use = keep & (w > 0)
        flat_i.append(((rows * (num_bits + 1) + d) * num_levels + level_index)[use])
        flat_w.append(w[use])
    size = int(np.prod(lead)) * (num_bits + 1) * num_levels
    out = np.bincount(np.concatenate(flat_i), np.concatenate(flat_w), minlength=size)
    return out.reshape(lead + (num_bits + 1, num_levels))


def kernel_band(z: np.ndarray, num_bits: int, slope: float = 1.0, grad: bool = False):
    """Yield ``(d, value)`` for every bin offset that can touch ``z``.

    ``d`` is clipped to ``[0, b]`` and ``value`` is zeroed where the clipped
    bin is not the intended one, so callers may gather or scatter freely.
    """
    base = np.floor(z).astype(np.int64)
    reach = int(math.ceil(slope))
    for o in range(-reach, reach + 1):
        d = base + o
        valid = (d >= 0) & (d <= num_bits)
        d = np.clip(d, 0, num_bits)
        value = soft_bin_grad(z, d, slope) if grad else soft_bin(z, d, slope)
        yield d, np.where(valid, value, 0.0)


def build_soft_histograms(
    query_idx: int, relaxed: RelaxedCodes, affinities: AffinityLevels, slope: float = 1.0
) -> SoftHistogramSet:
    """Soft histogram of item ``query_idx`` against every other row of ``relaxed``.

    ``affinities`` has one entry per row; the query's own entry is ignored.
    """
    codes = relaxed.values
    m = codes.shape[0]
    if len(affinities.per_item) != m:
        raise DimensionError(f"{len(affinities.per_item)} affinities for {m} codes")
    if m < 2:
        raise DataError("the query needs at least one other item to rank")
    others = np.arange(m) != query_idx
    z = 0.5 * (codes.shape[1] - codes[others] @ codes[query_idx])
    soft = soft_histogram(
        z, affinities.level_index[others], codes.shape[1], len(affinities.levels), slope
    )
    return SoftHistogramSet(soft, affinities.levels, slope)


def _bin_stats(soft: np.ndarray, positive: np.ndarray):
    """Per-bin totals and exclusive cumulative sums."""
    c = soft.sum(axis=-1)
    cp = soft[..., positive].sum(axis=-1)
    C_prev = np.cumsum(c, axis=-1) - c
    Cp_prev = np.cumsum(cp, axis=-1) - cp
    return c, cp, C_prev, Cp_prev


def _per_query(norm, soft: np.ndarray) -> np.ndarray:
    norm = np.asarray(norm, dtype=np.float64)
    if np.any(norm <= 0):
        raise DataError("objective normaliser (N+ or ideal DCG) must be positive")
    return norm[..., None]


def ap_simplified_terms(soft: np.ndarray, positive: np.ndarray, n_plus) -> np.ndarray:
    """Midpoint-repeated AP per bin: c+/N+ * (C+_{d-1} + C+_d + 1) / (C_{d-1} + C_d + 1)."""
    c, cp, C_prev, Cp_prev = _bin_stats(soft, positive)
    norm = _per_query(n_plus, soft)
    return cp / norm * (2 * Cp_prev + cp + 1) / (2 * C_prev + c + 1)


def dcg_simplified_terms(soft: np.ndarray, levels: Sequence[int], norm=1.0) -> np.ndarray:
    """Jensen lower bound of DCG per bin: sum_v G(v) c_{d,v} / log2(C_{d-1} + c_d / 2 + 3/2)."""
    g = soft @ gain(levels)
    c = soft.sum(axis=-1)
    C_prev = np.cumsum(c, axis=-1) - c
    return g / np.log2(C_prev + 0.5 * c + 1.5) / _per_query(norm, soft)


def _ap_relaxed_parts(c, cp, C_prev, Cp_prev, unshifted_log: bool):
    """Shared pieces of the guarded AP relaxation (used by the gradient code too).

    Returns masks for the singleton-guard and regular branches plus the
    harmonic-sum surrogate ``lam`` and tie slope ``r`` on the regular branch.
    """
    empty = c < EMPTY_BIN
    guard = (c < 1 + RATIO_EPS) & ~empty
    regular = ~(guard | empty)
    c_reg = np.where(regular, c, 2.0)
    r = (cp - 1) / (c_reg - 1)
    C_d = C_prev + c
    if unshifted_log:
        lam = np.log(np.where(regular, C_d, 1.0)) - np.log(np.maximum(C_prev, 1.0))
    else:
        lam = np.log(C_d + AP_SHIFT) - np.log(C_prev + AP_SHIFT)
    return empty, guard, regular, c_reg, r, lam


def ap_relaxed_terms(
    soft: np.ndarray, positive: np.ndarray, n_plus, unshifted_log: bool = False
) -> np.ndarray:
    """Relaxed tie-aware AP per bin.

    Regular bins use ``c+/(c N+) [r c + (C+_{d-1} + 1 - r (C_{d-1} + 1)) lam]``
    with ``r = (c+ - 1)/(c - 1)`` and ``lam = ln((C_d + 1/2)/(C_{d-1} + 1/2))``
    (``ln(C_d / max(C_{d-1}, 1))`` when ``unshifted_log``). Bins with ``c < 1 + eps``
    use ``r = c+/c`` and the exact singleton harmonic term ``lam = c / C_d``.
    """
    c, cp, C_prev, Cp_prev = _bin_stats(soft, positive)
    norm = _per_query(n_plus, soft)
    empty, guard, regular, c_reg, r, lam = _ap_relaxed_parts(c, cp, C_prev, Cp_prev, unshifted_log)
    reg = cp / (c_reg * norm) * (r * c_reg + (Cp_prev + 1 - r * (C_prev + 1)) * lam)
    c_safe = np.where(empty, 1.0, c)
    C_d = np.where(empty, 1.0, C_prev + c)
    sing = cp / (norm * C_d) * (cp * (1 - 1 / c_safe) + Cp_prev + 1)
    return np.where(regular, reg, np.where(guard, sing, 0.0))


def log_integral(a: float, b: float, tol: float = LI_TOL, max_depth: int = LI_MAX_DEPTH) -> float:
    """Integral of 1/ln(t) over [a, b] for 1 < a <= b, by adaptive Simpson."""
    if a == b:
        return 0.0
    if not 1.0 < a < b:
        raise NumericError(f"log-integral limits must satisfy 1 < a <= b, got [{a}, {b}]")

    def f(t):
        return 1.0 / math.log(t)

    def simpson(lo, flo, hi, fhi):
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        return mid, fmid, (hi - lo) / 6.0 * (flo + 4 * fmid + fhi)

    fa, fb = f(a), f(b)
    m, fm, whole = simpson(a, fa, b, fb)
    total = 0.0
    stack = [(a, fa, b, fb, m, fm, whole, tol, 0)]
    while stack:
        lo, flo, hi, fhi, mid, fmid, est, eps, depth = stack.pop()
        lm, flm, left = simpson(lo, flo, mid, fmid)
        rm, frm, right = simpson(mid, fmid, hi, fhi)
        delta = left + right - est
        if abs(delta) <= 15 * eps:
            total += left + right + delta / 15.0
        elif depth >= max_depth:
            raise NumericError(f"log-integral quadrature did not converge on [{lo}, {hi}]")
        else:
            stack.append((lo, flo, mid, fmid, lm, flm, left, eps / 2, depth + 1))
            stack.append((mid, fmid, hi, fhi, rm, frm, right, eps / 2, depth + 1))
    return total


def log_integral_many(a: np.ndarray, b: np.ndarray, tol: float = LI_TOL, max_depth: int = LI_MAX_DEPTH) -> np.ndarray:
    """Elementwise ``log_integral`` with one shared work queue.

    Same adaptive Simpson rule and per-interval tolerance as the scalar
    version; every refinement level is one vectorised step over all
    segments still open.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a, b = np.broadcast_arrays(a, b)
    out = np.zeros(a.shape)
    live = a != b
    if np.any(live & ~((a > 1.0) & (a < b))):
        bad = np.flatnonzero(live & ~((a > 1.0) & (a < b)))[0]
        raise NumericError(f"log-integral limits must satisfy 1 < a <= b, got [{a.flat[bad]}, {b.flat[bad]}]")
    owner = np.flatnonzero(live)
    lo, hi = a.ravel()[owner], b.ravel()[owner]
    flo, fhi = 1.0 / np.log(lo), 1.0 / np.log(hi)
    mid = 0.5 * (lo + hi)
    fmid = 1.0 / np.log(mid)
    est = (hi - lo) / 6.0 * (flo + 4 * fmid + fhi)
    eps = np.full(len(owner), tol)
    flat = out.ravel()
    for depth in range(max_depth + 1):
        if not len(owner):
            break
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = 1.0 / np.log(lm), 1.0 / np.log(rm)
        left = (mid - lo) / 6.0 * (flo + 4 * flm + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4 * frm + fhi)
        delta = left + right - est
        done = np.abs(delta) <= 15 * eps
        np.add.at(flat, owner[done], (left + right + delta / 15.0)[done])
        todo = ~done
        if todo.any() and depth >= max_depth:
            k = np.flatnonzero(todo)[0]
            raise NumericError(f"log-integral quadrature did not converge on [{lo[k]}, {hi[k]}]")
        # split every open segment into its two halves
        owner = np.concatenate([owner[todo], owner[todo]])
        lo, mid, hi, flo, fmid, fhi, est = (
            np.concatenate([lo[todo], mid[todo]]),
            np.concatenate([lm[todo], rm[todo]]),
            np.concatenate([mid[todo], hi[todo]]),
            np.concatenate([flo[todo], fmid[todo]]),
            np.concatenate([flm[todo], frm[todo]]),
            np.concatenate([fmid[todo], fhi[todo]]),
            np.concatenate([left[todo], right[todo]]),
        )
        eps = np.concatenate([eps[todo], eps[todo]]) / 2
    return flat.reshape(a.shape)


def _dcg_relaxed_limits(C_prev: np.ndarray, c: np.ndarray, unshifted_limits: bool):
    shift = 0.0 if unshifted_limits else DCG_SHIFT
    lo = C_prev + 1 + shift
    hi = C_prev + c + 1 + shift
    return lo, hi


def dcg_relaxed_terms(
    soft: np.ndarray, levels: Sequence[int], norm=1.0, unshifted_limits: bool = False
) -> np.ndarray:
    """Relaxed DCG per bin: ln2 * (mean gain) * integral of 1/ln t over the shifted rank range."""
    g = soft @ gain(levels)
    c = soft.sum(axis=-1)
    C_prev = np.cumsum(c, axis=-1) - c
    lo, hi = _dcg_relaxed_limits(C_prev, c, unshifted_limits)
    nonempty = c >= EMPTY_BIN
    if unshifted_limits and np.any(nonempty & (C_prev < RATIO_EPS)):
        raise NumericError("unshifted DCG relaxation diverges for a bin with C_{d-1} = 0")
    integral = log_integral_many(np.where(nonempty, lo, 2.0), np.where(nonempty, hi, 2.0))
    mean_gain = np.divide(g, c, out=np.zeros_like(c), where=nonempty)
    return LN2 * mean_gain * integral / _per_query(norm, soft)


def objective_terms(name: str, soft: np.ndarray, levels: Sequence[int], norm, **flags) -> np.ndarray:
    """Per-bin values of objective ``name``; ``norm`` is N+ (AP) or the DCG normaliser."""
    positive = np.asarray(levels) > 0
    if name == "AP_s":
        return ap_simplified_terms(soft, positive, norm)
    if name == "AP_r":
        return ap_relaxed_terms(soft, positive, norm, unshifted_log=flags.get("unshifted", False))
    if name == "DCG_s":
        return dcg_simplified_terms(soft, levels, norm)
    if name == "DCG_r":
        return dcg_relaxed_terms(soft, levels, norm, unshifted_limits=flags.get("unshifted", False))
    raise ValueError(f"unknown objective {name!r}; expected one of {OBJECTIVES}")


def ap_relaxed(s: SoftHistogramSet, N_plus: float, unshifted: bool = False) -> float:
    return float(ap_relaxed_terms(s.soft, s.positive, N_plus, unshifted_log=unshifted).sum())


def dcg_relaxed(s: SoftHistogramSet, levels: Sequence[int] | None = None, unshifted: bool = False) -> float:
    levels = s.levels if levels is None else tuple(levels)
    return float(dcg_relaxed_terms(s.soft, levels, unshifted_limits=unshifted).sum())


def ap_simplified(s: SoftHistogramSet, N_plus: float) -> float:
    return float(ap_simplified_terms(s.soft, s.positive, N_plus).sum())


def dcg_simplified(s: SoftHistogramSet, levels: Sequence[int] | None = None) -> float:
    levels = s.levels if levels is None else tuple(levels)
    return float(dcg_simplified_terms(s.soft, levels).sum())
