"""Closed-form gradients of the relaxed objectives.

Backpropagation runs in three stages:

1. ``objective_bin_grads``: partials of each query's objective with respect
   to its soft-histogram bins, ``alpha[i, d, k] = dO_i / dc_{d,k}``.
   Every objective splits into per-bin terms ``O_d`` that depend on bin d
   directly and on earlier bins only through cumulative counts. So
   ``alpha = zeta + U theta``: ``zeta`` is the direct part, ``theta`` the
   partial through the cumulative counts, and ``U`` a strictly upper
   triangular matrix of ones, applied as a reversed cumulative sum.
2. ``minibatch_backprop``: chain rule through triangular binning and
   relaxed distances, in matrix form ``-Phi / (2M) sum_{d,v} (A B + B^T A)``.
3. ``model_backprop``: through tanh and the linear hash functions.

``naive_backprop`` and ``numeric_bin_grads`` are slow reference paths that
do not rely on the matrix identities or the per-bin decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .hamming import gain
from .relaxed import (
    AP_SHIFT,
    LN2,
    OBJECTIVES,
    _ap_relaxed_parts,
    _bin_stats,
    _dcg_relaxed_limits,
    EMPTY_BIN,
    log_integral_many,
    kernel_band,
    objective_terms,
    soft_bin_grad,
)

# objectives whose per-bin terms provably depend on earlier bins only via
# cumulative counts; the zeta + U theta assembly is exact for these
DECOMPOSABLE_OBJECTIVES = frozenset(OBJECTIVES)
ROW_BLOCK = 32


@dataclass(frozen=True)
class HistogramGradients:
    """Per-query bin gradients, each of shape ``(M, b + 1, L)``."""

    zeta: np.ndarray
    theta: np.ndarray

    @property
    def alpha(self) -> np.ndarray:
        return self.zeta + upper_cumsum(self.theta)


def upper_cumsum(theta: np.ndarray) -> np.ndarray:
    """``U @ theta`` along the bin axis: entry l is the sum of theta over bins d > l."""
    rev = np.cumsum(theta[..., ::-1, :], axis=-2)[..., ::-1, :]
    return rev - theta


def _norm(norm) -> np.ndarray:
    return np.asarray(norm, dtype=np.float64)[..., None]


def _ap_simplified_grads(soft, positive, norm):
    c, cp, C_prev, Cp_prev = _bin_stats(soft, positive)
    nrm = _norm(norm)
    s = cp / nrm
    P = 2 * Cp_prev + cp + 1
    Q = 2 * C_prev + c + 1
    d_cp = P / Q / nrm + s / Q
    d_c = -s * P / Q**2
    d_Cp = 2 * s / Q
    d_C = -2 * s * P / Q**2
    pos = positive.astype(np.float64)
    return (d_c[..., None] + d_cp[..., None] * pos, d_C[..., None] + d_Cp[..., None] * pos)


def _dcg_simplified_grads(soft, levels, norm):
    G = gain(levels)
    g = soft @ G
    c = soft.sum(axis=-1)
    C_prev = np.cumsum(c, axis=-1) - c
    X = C_prev + 0.5 * c + 1.5
    lnX = np.log(X)
    nrm = _norm(norm)
    d_g = LN2 / (lnX * nrm)
    d_C = -LN2 * g / (nrm * lnX**2 * X)
    d_c = 0.5 * d_C
    return d_g[..., None] * G + d_c[..., None], np.broadcast_to(d_C[..., None], soft.shape).copy()


def _ap_relaxed_grads(soft, positive, norm, unshifted_log=False):
    c, cp, C_prev, Cp_prev = _bin_stats(soft, positive)
    nrm = _norm(norm)
    empty, guard, regular, c_reg, r, lam = _ap_relaxed_parts(c, cp, C_prev, Cp_prev, unshifted_log)

    # regular branch
    C_d = C_prev + c
    if unshifted_log:
        C_reg = np.where(regular, C_d, 1.0)
        dlam_dc = 1.0 / C_reg
        dlam_dC = 1.0 / C_reg - np.where(C_prev > 1.0, 1.0 / np.maximum(C_prev, 1.0), 0.0)
    else:
        dlam_dc = 1.0 / (C_d + AP_SHIFT)
        dlam_dC = dlam_dc - 1.0 / (C_prev + AP_SHIFT)
    s = cp / (c_reg * nrm)
    K = Cp_prev + 1 - r * (C_prev + 1)
    cm1 = c_reg - 1
    reg_cp = r / nrm + cp / (cm1 * nrm) + K * lam / (c_reg * nrm) - s * (C_prev + 1) / cm1 * lam
    reg_c = (
        -cp * r / (cm1 * nrm)
        - cp / (c_reg**2 * nrm) * K * lam
        + s * r * (C_prev + 1) / cm1 * lam
        + s * K * dlam_dc
    )
    reg_Cp = s * lam
    reg_C = -s * r * lam + s * K * dlam_dC

    # singleton guard branch: O = c+ W / (N+ C_d), W = c+ (1 - 1/c) + C+_{d-1} + 1
    c_safe = np.where(empty, 1.0, c)
    Cd_safe = np.where(empty, 1.0, C_d)
    W = cp * (1 - 1 / c_safe) + Cp_prev + 1
    den = nrm * Cd_safe
    g_cp = (W + cp * (1 - 1 / c_safe)) / den
    g_c = cp * cp / c_safe**2 / den - cp * W / (den * Cd_safe)
    g_Cp = cp / den
    g_C = -cp * W / (den * Cd_safe)

    def pick(a, b):
        return np.where(regular, a, np.where(guard, b, 0.0))

    d_cp, d_c, d_Cp, d_C = pick(reg_cp, g_cp), pick(reg_c, g_c), pick(reg_Cp, g_Cp), pick(reg_C, g_C)
    pos = positive.astype(np.float64)
    return (d_c[..., None] + d_cp[..., None] * pos, d_C[..., None] + d_Cp[..., None] * pos)


def _dcg_relaxed_grads(soft, levels, norm, unshifted_limits=False):
    G = gain(levels)
    g = soft @ G
    c = soft.sum(axis=-1)
    C_prev = np.cumsum(c, axis=-1) - c
    lo, hi = _dcg_relaxed_limits(C_prev, c, unshifted_limits)
    nonempty = c >= EMPTY_BIN
    integral = log_integral_many(np.where(nonempty, lo, 2.0), np.where(nonempty, hi, 2.0))
    nrm = _norm(norm)
    c_safe = np.where(nonempty, c, 1.0)
    inv_hi = np.where(nonempty, 1.0 / np.log(np.where(nonempty, hi, 2.0)), 0.0)
    inv_lo = np.where(nonempty, 1.0 / np.log(np.where(nonempty, lo, 2.0)), 0.0)
    mean_gain = np.where(nonempty, g / c_safe, 0.0)
    d_g = np.where(nonempty, LN2 * integral / (c_safe * nrm), 0.0)
    d_c = np.where(nonempty, LN2 / nrm * (-g / c_safe**2 * integral + mean_gain * inv_hi), 0.0)
    d_C = LN2 / nrm * mean_gain * (inv_hi - inv_lo)
    return d_g[..., None] * G + d_c[..., None], np.broadcast_to(d_C[..., None], soft.shape).copy()


def objective_bin_grads(
    name: str, soft: np.ndarray, levels: Sequence[int], norm, unshifted: bool = False
) -> HistogramGradients:
    """Analytic ``zeta`` / ``theta`` for every query in ``soft`` (shape ``(..., b+1, L)``)."""
    soft = np.asarray(soft, dtype=np.float64)
    positive = np.asarray(levels) > 0
    if name == "AP_s":
        zeta, theta = _ap_simplified_grads(soft, positive, norm)
    elif name == "DCG_s":
        zeta, theta = _dcg_simplified_grads(soft, levels, norm)
    elif name == "AP_r":
        zeta, theta = _ap_relaxed_grads(soft, positive, norm, unshifted_log=unshifted)
    elif name == "DCG_r":
        zeta, theta = _dcg_relaxed_grads(soft, levels, norm, unshifted_limits=unshifted)
    else:
        raise ValueError(f"unknown objective {name!r}; expected one of {OBJECTIVES}")
    # the upstream partial of bin 0 has no earlier bins to act on
    theta[..., 0, :] = 0.0
    return HistogramGradients(zeta, theta)


def numeric_bin_grads(
    name: str, soft: np.ndarray, levels: Sequence[int], norm, h: float = 1e-6, **flags
) -> np.ndarray:
    """Central-difference ``dO/dc_{d,k}`` for one query, without the bin decomposition."""
    soft = np.asarray(soft, dtype=np.float64)
    out = np.zeros_like(soft)
    for idx in np.ndindex(soft.shape):
        plus, minus = soft.copy(), soft.copy()
        plus[idx] += h
        minus[idx] -= h
        f_plus = objective_terms(name, plus, levels, norm, **flags).sum()
        f_minus = objective_terms(name, minus, levels, norm, **flags).sum()
        out[idx] = (f_plus - f_minus) / (2 * h)
    return out


def check_decomposition(
    name: str, soft: np.ndarray, levels: Sequence[int], norm, h: float = 1e-6, tol: float = 1e-4, **flags
) -> bool:
    """Numerically confirm that ``dO_d/dc_{l,k}`` does not depend on ``l < d``.

    Perturbs single bins and compares each later bin term's response with the
    analytic ``theta``; ``soft`` is a single query's ``(b+1, L)`` histogram.
    """
    soft = np.asarray(soft, dtype=np.float64)
    grads = objective_bin_grads(name, soft, levels, norm, **flags)
    nbins, nlev = soft.shape
    for l in range(nbins - 1):
        for k in range(nlev):
            plus, minus = soft.copy(), soft.copy()
            plus[l, k] += h
            minus[l, k] -= h
            if minus[l, k] < 0:
                continue
            resp = (
                objective_terms(name, plus, levels, norm, **flags)
                - objective_terms(name, minus, levels, norm, **flags)
            ) / (2 * h)
            expected = grads.theta[l + 1 :, k]
            scale = np.maximum(np.maximum(np.abs(resp[l + 1 :]), np.abs(expected)), 1e-8)
            if np.max(np.abs(resp[l + 1 :] - expected) / scale) > tol:
                return False
    return True


def beta_matrices(
    codes: np.ndarray, level_index: np.ndarray, num_levels: int, slope: float = 1.0
) -> np.ndarray:
    """``B[d, k, i, j] = 1[A_ij = k] * delta_d'(dhat_ij)`` with a zero diagonal.

    ``codes`` holds one relaxed code per row (``M x b``).
    """
    codes = np.asarray(codes, dtype=np.float64)
    m, b = codes.shape
    dist = 0.5 * (b - codes @ codes.T)
    out = np.zeros((b + 1, num_levels, m, m))
    off_diag = ~np.eye(m, dtype=bool)
    for d in range(b + 1):
        deriv = soft_bin_grad(dist, d, slope) * off_diag
        for k in range(num_levels):
            out[d, k] = deriv * (level_index == k)
    return out


@dataclass(frozen=True)
class BatchJacobian:
    """``d_phi[i]`` is dO/d(relaxed code of item i), shape ``M x b``."""

    d_phi: np.ndarray
    path: str = "matrix"


def minibatch_backprop(
    codes: np.ndarray,
    alpha: np.ndarray,
    level_index: np.ndarray,
    slope: float = 1.0,
    weight: float | None = None,
    betas: np.ndarray | None = None,
) -> BatchJacobian:
    """Matrix-form Jacobian ``-Phi / (2M) sum_{d,v} (A_{d,v} B_{d,v} + B_{d,v}^T A_{d,v})``.

    ``alpha`` has shape ``(M, b+1, L)``; ``weight`` replaces ``1/M`` when the
    objective averages over fewer queries. Without ``betas`` only the bins
    within one slope of each distance are visited, so the cost is O(M^2 b)
    independent of the level count; with ``betas`` every (d, v) pair is
    applied densely.
    """
    codes = np.asarray(codes, dtype=np.float64)
    m, b = codes.shape
    if alpha.shape[:2] != (m, b + 1):
        raise ValueError(f"alpha shape {alpha.shape} does not match a batch of {m} codes with {b} bits")
    weight = 1.0 / m if weight is None else weight
    num_levels = alpha.shape[2]
    dist = codes @ codes.T
    dist *= -0.5
    dist += 0.5 * b
    if betas is not None:
        S = np.zeros((m, m))
        for d in range(b + 1):
            for k in range(num_levels):
                a = alpha[:, d, k]
                if a.any():
                    S += a[:, None] * betas[d, k] + betas[d, k].T * a[None, :]
        return BatchJacobian(-0.5 * weight * (S @ codes), "matrix")
    # S_ij = sum_d delta_d'(z_ij) (alpha_i[d, A_ij] + alpha_j[d, A_ji]); only bins near z_ij
    # matter. z is symmetric up to rounding, so the second term is the transpose of the first
    # and S = T + T^T.
    lvl = np.asarray(level_index)
    skip = (lvl < 0) | np.eye(m, dtype=bool)
    # ignored pairs point at an appended zero level
    padded = np.zeros((m, b + 1, num_levels + 1))
    padded[..., :num_levels] = alpha
    base = np.arange(m)[:, None] * ((b + 1) * (num_levels + 1)) + np.where(skip, num_levels, lvl)
    flat = padded.ravel()
    T = np.zeros((m, m))
    # row blocks keep the band temporaries cache-sized
    for lo in range(0, m, ROW_BLOCK):
        rows = slice(lo, lo + ROW_BLOCK)
        for d, deriv in kernel_band(dist[rows], b, slope, grad=True):
            T[rows] += deriv * flat[base[rows] + d * (num_levels + 1)]
    return BatchJacobian(-0.5 * weight * (T @ codes + T.T @ codes), "matrix")


def naive_backprop(
    codes: np.ndarray,
    alpha: np.ndarray,
    level_index: np.ndarray,
    slope: float = 1.0,
    weight: float | None = None,
) -> BatchJacobian:
    """Per-query, per-pair chain rule; reference for ``minibatch_backprop``."""
    codes = np.asarray(codes, dtype=np.float64)
    m, b = codes.shape
    weight = 1.0 / m if weight is None else weight
    out = np.zeros_like(codes)
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            z = 0.5 * (b - codes[i] @ codes[j])
            k = level_index[i, j]
            if k < 0:
                continue
            dc_dz = sum(alpha[i, d, k] * soft_bin_grad(z, d, slope) for d in range(b + 1))
            # dz/dphi_i = -phi_j / 2 and dz/dphi_j = -phi_i / 2
            out[i] += weight * dc_dz * (-0.5 * codes[j])
            out[j] += weight * dc_dz * (-0.5 * codes[i])
    return BatchJacobian(out, "naive")


def model_backprop(
    jac: BatchJacobian, activations: np.ndarray, features: np.ndarray, alpha: float
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. linear hash weights ``W`` (``b x D``) and bias (``b``).

    Codes are ``tanh(alpha * f)`` with ``f = X W^T + bias``.
    """
    f = np.asarray(activations, dtype=np.float64)
    X = np.asarray(features, dtype=np.float64)
    if f.shape != jac.d_phi.shape or X.shape[0] != f.shape[0]:
        raise ValueError(f"shape mismatch: jacobian {jac.d_phi.shape}, activations {f.shape}, features {X.shape}")
    phi = np.tanh(alpha * f)
    d_f = jac.d_phi * alpha * (1 - phi**2)
    return d_f.T @ X, d_f.sum(axis=0)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    num_checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def finite_diff_check(
    func: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare ``analytic`` against central differences of ``func`` at ``x``.

    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    With ``max_coords`` set, a random subset of coordinates is checked.
    """
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    coords = list(np.ndindex(x.shape))
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[p] for p in sorted(pick)]
    worst = GradCheckResult(0.0, (), 0.0, 0.0, len(coords))
    for idx in coords:
        orig = x[idx]
        x[idx] = orig + h
        f_plus = func(x)
        x[idx] = orig - h
        f_minus = func(x)
        x[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"objective is not finite near coordinate {idx}")
        numeric = (f_plus - f_minus) / (2 * h)
        err = abs(analytic[idx] - numeric) / max(abs(analytic[idx]), abs(numeric), 1e-8)
        if err > worst.max_rel_error or not worst.worst_index:
            worst = GradCheckResult(err, idx, float(analytic[idx]), float(numeric), len(coords))
    return worst
