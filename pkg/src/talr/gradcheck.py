"""Finite-difference verification of end-to-end weight gradients."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import DataError
from .gradients import finite_diff_check
from .relaxed import OBJECTIVES, soft_histogram
from .trainer import HashModel, TrainConfig, kink_margin, minibatch_objective

# level sets used for random batches: binary, then the four-threshold scheme
LEVEL_SETS = {2: (0, 1), 3: (0, 1, 2), 4: (0, 1, 2, 5), 5: (0, 1, 2, 5, 10)}
KINK_MARGIN = 1e-3
# AP_r switches to the c+/c ratio at bin total 1 + eps and is very steep just above it
POLE_MARGIN = 1e-2


@dataclass
class GradCheckReport:
    objective: str
    passed: bool
    max_rel_error: float
    worst_coordinate: str
    analytic: float
    numeric: float
    path: str
    resamples: int

    def to_dict(self) -> dict:
        return asdict(self)


def random_batch(rng: np.random.Generator, num_items: int, dim: int, num_levels: int):
    """Gaussian features with a symmetric random affinity matrix (zero diagonal)."""
    if num_levels not in LEVEL_SETS:
        raise DataError(f"num_levels must be one of {sorted(LEVEL_SETS)}")
    levels = LEVEL_SETS[num_levels]
    x = rng.normal(size=(num_items, dim))
    upper = np.triu(rng.choice(levels, size=(num_items, num_items), p=_level_probs(num_levels)), 1)
    return x, upper + upper.T, levels


def bin_total_margin(model: HashModel, features: np.ndarray, alpha: float, delta: float = 1.0) -> float:
    """Smallest gap between a soft bin total (any query, any bin) and 1."""
    codes = np.tanh(alpha * model.activations(features))
    dist = 0.5 * (codes.shape[1] - codes @ codes.T)
    mask = np.zeros(dist.shape, dtype=np.int64)
    np.fill_diagonal(mask, -1)
    totals = soft_histogram(dist, mask, model.num_bits, 1, delta)[..., 0]
    return float(np.min(np.abs(totals - 1)))


def _level_probs(num_levels: int) -> np.ndarray:
    # keep relevant pairs common enough that most queries are defined
    p = np.full(num_levels, 0.5 / (num_levels - 1))
    p[0] = 0.5
    return p


def _coord_name(idx: tuple, num_bits: int, dim: int) -> str:
    row, col = divmod(idx[0], num_bits)
    return f"W[{col},{row}]" if row < dim else f"bias[{col}]"


def check_objective(
    objective: str,
    *,
    num_items: int = 16,
    num_bits: int = 8,
    dim: int = 16,
    num_levels: int = 2,
    alpha: float = 1.0,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    path: str = "verified",
    max_resamples: int = 10,
    corrupt: Callable[[np.ndarray], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic weight and bias gradients with central differences.

    Batches whose relaxed distances sit within ``KINK_MARGIN`` of a bin
    centre (where the triangular kernel is not differentiable) are redrawn,
    at most ``max_resamples`` times. For AP_r, batches with a bin total
    within ``POLE_MARGIN`` of 1 are redrawn too. ``corrupt`` maps the flat analytic
    gradient before comparison; it exists for fault-injection tests.
    """
    if objective not in OBJECTIVES:
        raise DataError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
    rng = np.random.default_rng(seed)
    config = TrainConfig(num_bits=num_bits, objective=objective, alpha=alpha, batch_size=num_items).validate()
    for attempt in range(max_resamples + 1):
        x, lv, levels = random_batch(rng, num_items, dim, num_levels)
        model = HashModel.init(num_bits, dim, rng)
        model.bias = rng.normal(scale=0.1, size=num_bits)
        if kink_margin(model, x, alpha) <= KINK_MARGIN:
            continue
        if objective == "AP_r" and bin_total_margin(model, x, alpha) <= POLE_MARGIN:
            continue
        break
    else:
        raise DataError(f"every batch was near a non-smooth point after {max_resamples} resamples")

    res = minibatch_objective(model, x, lv, levels, config, alpha, path=path)
    # bias stacked as an extra row: params[r, c] for r < D is W[c, r]
    params = np.vstack([model.weights.T, model.bias[None, :]])
    analytic = np.vstack([res.grad_weights.T, res.grad_bias[None, :]]).ravel()
    if corrupt is not None:
        analytic = corrupt(analytic.copy())

    def value(flat: np.ndarray) -> float:
        p = flat.reshape(params.shape)
        probe = HashModel(p[:-1].T.copy(), p[-1].copy())
        return minibatch_objective(probe, x, lv, levels, config, alpha, path="matrix").value

    out = finite_diff_check(value, params.ravel(), analytic, h=h)
    return GradCheckReport(
        objective=objective,
        passed=out.passed(tol),
        max_rel_error=out.max_rel_error,
        worst_coordinate=_coord_name(out.worst_index, num_bits, dim),
        analytic=out.analytic,
        numeric=out.numeric,
        path=res.path,
        resamples=attempt,
    )
