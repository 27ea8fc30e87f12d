"""Minibatch gradient ascent of relaxed tie-aware objectives for linear hashing."""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, NumericError, UndefinedMetricError
from .gradients import (
    DECOMPOSABLE_OBJECTIVES,
    check_decomposition,
    minibatch_backprop,
    model_backprop,
    naive_backprop,
    numeric_bin_grads,
    objective_bin_grads,
)
from .hamming import BinaryCodebook, binarize_and_pack, gain
from .relaxed import OBJECTIVES, objective_terms, soft_histogram

log = logging.getLogger(__name__)

AFFINITY_MODES = ("single_label", "multilabel_shared_count", "threshold_multilevel")
DEFAULT_QUANTILES = (0.05, 0.01, 0.002, 0.001)
DEFAULT_LEVEL_VALUES = (1, 2, 5, 10)

CHECKPOINT_MAGIC = b"TALRMODL"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIIB")


class DegenerateBatchError(UndefinedMetricError):
    """No query in the minibatch has a defined objective."""


@dataclass
class AffinityOracle:
    """Pairwise affinity levels from labels or feature distances.

    ``single_label`` compares integer class labels, ``multilabel_shared_count``
    counts shared labels between rows of a 0/1 label-indicator matrix, and
    ``threshold_multilevel`` assigns ``level_values[k]`` when the Euclidean
    distance falls within the ``quantiles[k]`` cut of training-pair distances,
    taking the innermost (largest) applicable value.
    """

    mode: str = "single_label"
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    level_values: tuple[int, ...] = DEFAULT_LEVEL_VALUES
    cuts: np.ndarray | None = None
    max_shared: int = 1

    def __post_init__(self) -> None:
        if self.mode not in AFFINITY_MODES:
            raise DataError(f"unknown affinity mode {self.mode!r}; expected one of {AFFINITY_MODES}")
        self.quantiles = tuple(float(q) for q in self.quantiles)
        self.level_values = tuple(int(v) for v in self.level_values)
        if self.mode == "threshold_multilevel":
            if len(self.quantiles) != len(self.level_values) or not self.quantiles:
                raise DataError("thresholds and level values must be non-empty and the same length")
            if any(a <= b for a, b in zip(self.quantiles, self.quantiles[1:])):
                raise DataError(f"threshold quantiles must be strictly decreasing: {self.quantiles}")
            if any(a >= b for a, b in zip(self.level_values, self.level_values[1:])):
                raise DataError(f"level values must be strictly increasing: {self.level_values}")
            if self.level_values[0] <= 0:
                raise DataError("threshold level values must be positive")

    @property
    def levels(self) -> tuple[int, ...]:
        if self.mode == "single_label":
            return (0, 1)
        if self.mode == "multilabel_shared_count":
            return tuple(range(self.max_shared + 1))
        return (0, *self.level_values)

    def fit(self, payload: np.ndarray, max_pairs: int = 2_000_000, seed: int = 0) -> AffinityOracle:
        """Calibrate on training data: distance cuts, or the largest shared-label count."""
        payload = np.asarray(payload)
        if self.mode == "threshold_multilevel":
            self.cuts = pair_distance_quantiles(payload, self.quantiles, max_pairs, seed)
        elif self.mode == "multilabel_shared_count":
            self.max_shared = max(1, int(payload.sum(axis=1).max()))
        return self

    def pair_levels(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Affinity level for every (row of ``a``, row of ``b``) pair."""
        if a is None or b is None:
            raise DataError(f"affinity mode {self.mode!r} needs labels or features")
        a, b = np.asarray(a), np.asarray(b)
        if self.mode == "single_label":
            return (a.reshape(-1)[:, None] == b.reshape(-1)[None, :]).astype(np.int64)
        if self.mode == "multilabel_shared_count":
            shared = a.astype(np.int64) @ b.astype(np.int64).T
            return np.minimum(shared, self.max_shared)
        if self.cuts is None:
            raise DataError("threshold affinities need distance cuts; call fit() on training features first")
        dist = euclidean(a, b)
        out = np.zeros(dist.shape, dtype=np.int64)
        # quantiles are decreasing, so later (tighter) cuts overwrite looser ones
        for cut, value in zip(self.cuts, self.level_values):
            out[dist <= cut] = value
        return out

    def derive_affinity(self, a, b) -> int:
        """Level for a single pair of items."""
        a, b = np.asarray(a), np.asarray(b)
        return int(self.pair_levels(a.reshape(1, -1), b.reshape(1, -1))[0, 0])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "quantiles": list(self.quantiles),
            "level_values": list(self.level_values),
            "cuts": None if self.cuts is None else [float(c) for c in self.cuts],
            "levels": list(self.levels),
        }


def euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def pair_distance_quantiles(
    features: np.ndarray, quantiles: Sequence[float], max_pairs: int = 2_000_000, seed: int = 0
) -> np.ndarray:
    """Distance values at the given quantiles of all distinct training pairs."""
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise DataError("need at least two training items to calibrate distance thresholds")
    if n * (n - 1) // 2 <= max_pairs:
        dists = euclidean(x, x)[np.triu_indices(n, k=1)]
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, max_pairs)
        j = rng.integers(0, n, max_pairs)
        keep = i != j
        dists = np.sqrt(((x[i[keep]] - x[j[keep]]) ** 2).sum(1))
    return np.quantile(dists, quantiles)


@dataclass
class HashModel:
    """Linear hash functions ``f(x) = W x + bias``; codes are ``sgn(f)``."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] < 1:
            raise DataError("weights must be a (bits x dim) matrix with at least one bit")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.weights.shape[0]:
                raise DataError("bias length must equal the number of bits")
        if not np.isfinite(self.weights).all() or (self.bias is not None and not np.isfinite(self.bias).all()):
            raise NumericError("model parameters contain non-finite values")

    @property
    def num_bits(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, num_bits: int, input_dim: int, rng: np.random.Generator, bias: bool = True) -> HashModel:
        w = rng.normal(0.0, 1.0 / math.sqrt(input_dim), size=(num_bits, input_dim))
        return cls(w, np.zeros(num_bits) if bias else None)

    def activations(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DataError(f"features have dimension {x.shape[-1]}, model expects {self.input_dim}")
        f = x @ self.weights.T
        return f if self.bias is None else f + self.bias

    def encode(self, features: np.ndarray) -> BinaryCodebook:
        return binarize_and_pack(self.activations(features))

    def copy(self) -> HashModel:
        return HashModel(self.weights.copy(), None if self.bias is None else self.bias.copy())


def save_checkpoint(path: str | Path, model: HashModel, alpha: float) -> None:
    has_bias = model.bias is not None
    params = np.hstack([model.weights, model.bias[:, None]]) if has_bias else model.weights
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.num_bits, model.input_dim, has_bias))
        fh.write(params.astype("<f8").tobytes())
        fh.write(struct.pack("<d", alpha))


def load_checkpoint(path: str | Path) -> tuple[HashModel, float]:
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise DataError(f"{path}: truncated checkpoint header at byte {len(blob)}")
    magic, version, bits, dim, has_bias = _CKPT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    cols = dim + (1 if has_bias else 0)
    expected = _CKPT_HEADER.size + 8 * bits * cols + 8
    if len(blob) < expected:
        raise DataError(f"{path}: truncated checkpoint, data ends at byte {len(blob)} of {expected}")
    params = np.frombuffer(blob, dtype="<f8", count=bits * cols, offset=_CKPT_HEADER.size).reshape(bits, cols)
    (alpha,) = struct.unpack_from("<d", blob, _CKPT_HEADER.size + 8 * bits * cols)
    params = params.astype(np.float64)
    if has_bias:
        return HashModel(params[:, :dim].copy(), params[:, dim].copy()), alpha
    return HashModel(params.copy()), alpha


@dataclass
class TrainConfig:
    num_bits: int = 16
    batch_size: int = 256
    epochs: int = 60
    learning_rate: float = 0.1
    momentum: float = 0.9
    alpha: float = 40.0
    alpha_growth: float = 1.0
    alpha_cap: float = 100.0
    objective: str = "AP_s"
    delta: float = 1.0
    seed: int = 0
    normalize_dcg: bool = True
    plateau_patience: int = 5
    lr_decay: float = 0.5
    unshifted: bool = False
    bias: bool = True

    def validate(self) -> TrainConfig:
        problems = []
        if self.num_bits < 1:
            problems.append("num_bits must be >= 1")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.learning_rate < 0:
            problems.append("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if not self.alpha > 0:
            problems.append("alpha must be > 0")
        if self.alpha_growth < 1:
            problems.append("alpha_growth must be >= 1")
        if self.alpha_cap < self.alpha:
            problems.append("alpha_cap must be >= alpha")
        if self.objective not in OBJECTIVES:
            problems.append(f"objective must be one of {OBJECTIVES}")
        if not self.delta > 0:
            problems.append("delta must be > 0")
        if self.plateau_patience < 1:
            problems.append("plateau_patience must be >= 1")
        if not 0 < self.lr_decay <= 1:
            problems.append("lr_decay must lie in (0, 1]")
        if problems:
            raise DataError("invalid training config: " + "; ".join(problems))
        return self

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise DataError(f"unknown config fields: {sorted(unknown)}")
        return cls(**values).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def alpha_schedule_step(alpha: float, epoch: int, config: TrainConfig) -> float:
    """tanh scale for the epoch after ``epoch``: geometric growth up to the cap."""
    if config.alpha_growth < 1:
        raise DataError("alpha_growth must be >= 1")
    return min(config.alpha_cap, alpha * config.alpha_growth)


def query_normalizers(level_matrix: np.ndarray, levels: Sequence[int], objective: str, normalize_dcg: bool) -> np.ndarray:
    """Per-query constant divisor: N+ for AP, the ideal DCG (or 1) for DCG. Zero marks undefined."""
    m = len(level_matrix)
    off = ~np.eye(m, dtype=bool)
    if objective.startswith("AP"):
        return ((level_matrix > 0) & off).sum(axis=1).astype(np.float64)
    gains = np.where(off, gain(level_matrix), 0.0)
    if not normalize_dcg:
        return np.where(gains.sum(axis=1) > 0, 1.0, 0.0)
    ranked = -np.sort(-gains, axis=1)[:, : m - 1]
    discount = 1.0 / np.log2(np.arange(2, m + 1))
    return ranked @ discount


@dataclass
class BatchResult:
    value: float
    grad_weights: np.ndarray
    grad_bias: np.ndarray
    num_defined: int
    path: str


def minibatch_objective(
    model: HashModel,
    features: np.ndarray,
    level_matrix: np.ndarray,
    levels: Sequence[int],
    config: TrainConfig,
    alpha: float | None = None,
    path: str = "auto",
) -> BatchResult:
    """Relaxed objective averaged over queries, each ranking the rest of the batch.

    ``path`` selects the Jacobian route: ``matrix`` (fast), ``naive``
    (per-pair chain rule with numerically differentiated bin gradients),
    ``auto`` (matrix whenever the objective is known to decompose over bins)
    or ``verified`` (matrix only if every query's histogram passes the
    numerical decomposition test, otherwise naive).
    """
    alpha = config.alpha if alpha is None else alpha
    x = np.asarray(features, dtype=np.float64)
    m = len(x)
    if m < 2:
        raise DataError("a minibatch needs at least two items")
    levels = tuple(levels)
    level_index = np.searchsorted(np.asarray(levels), level_matrix)
    np.fill_diagonal(level_index, -1)

    f = model.activations(x)
    codes = np.tanh(alpha * f)
    dist = 0.5 * (codes.shape[1] - codes @ codes.T)
    soft = soft_histogram(dist, level_index, model.num_bits, len(levels), config.delta)
    norm = query_normalizers(level_matrix, levels, config.objective, config.normalize_dcg)
    defined = norm > 0
    if not defined.any():
        raise DegenerateBatchError("no query in the batch has a relevant item")
    flags = {"unshifted": config.unshifted}
    values = objective_terms(config.objective, soft[defined], levels, norm[defined], **flags).sum(axis=1)
    value = float(values.mean())
    if not math.isfinite(value):
        raise NumericError(f"relaxed objective is not finite ({value})")

    if path == "auto":
        path = "matrix" if config.objective in DECOMPOSABLE_OBJECTIVES else "naive"
    elif path == "verified":
        ok = all(check_decomposition(config.objective, soft[i], levels, norm[i], **flags) for i in np.flatnonzero(defined))
        path = "matrix" if ok else "naive"
    alpha_bins = np.zeros_like(soft)
    weight = 1.0 / defined.sum()
    if path == "matrix":
        grads = objective_bin_grads(config.objective, soft[defined], levels, norm[defined], **flags)
        alpha_bins[defined] = grads.alpha
        jac = minibatch_backprop(codes, alpha_bins, level_index, config.delta, weight)
    elif path == "naive":
        for i in np.flatnonzero(defined):
            alpha_bins[i] = numeric_bin_grads(config.objective, soft[i], levels, norm[i], **flags)
        jac = naive_backprop(codes, alpha_bins, level_index, config.delta, weight)
    else:
        raise ValueError(f"unknown backprop path {path!r}")
    grad_w, grad_b = model_backprop(jac, f, x, alpha)
    return BatchResult(value, grad_w, grad_b, int(defined.sum()), path)


def retrieval_objective(
    model: HashModel,
    query_features: np.ndarray,
    database_features: np.ndarray,
    level_matrix: np.ndarray,
    levels: Sequence[int],
    config: TrainConfig,
    alpha: float | None = None,
) -> float:
    """Relaxed objective with every query ranking a separate database.

    Same quantity the trainer ascends, but on a query/database split so it
    can be compared directly with the exact tie-aware metric there.
    """
    alpha = config.alpha if alpha is None else alpha
    levels = tuple(levels)
    level_matrix = np.asarray(level_matrix)
    q = np.tanh(alpha * model.activations(query_features))
    db = np.tanh(alpha * model.activations(database_features))
    dist = 0.5 * (model.num_bits - q @ db.T)
    level_index = np.searchsorted(np.asarray(levels), level_matrix)
    soft = soft_histogram(dist, level_index, model.num_bits, len(levels), config.delta)
    if config.objective.startswith("AP"):
        norm = (level_matrix > 0).sum(axis=1).astype(np.float64)
    elif config.normalize_dcg:
        ranked = -np.sort(-gain(level_matrix), axis=1)
        norm = ranked @ (1.0 / np.log2(np.arange(2, level_matrix.shape[1] + 2)))
    else:
        norm = np.where(level_matrix.max(axis=1) > 0, 1.0, 0.0)
    defined = norm > 0
    if not defined.any():
        raise UndefinedMetricError("no query has a relevant database item")
    terms = objective_terms(config.objective, soft[defined], levels, norm[defined], unshifted=config.unshifted)
    return float(terms.sum(axis=1).mean())


def kink_margin(model: HashModel, features: np.ndarray, alpha: float) -> float:
    """Smallest gap between an off-diagonal relaxed distance and an integer bin edge."""
    codes = np.tanh(alpha * model.activations(features))
    dist = 0.5 * (codes.shape[1] - codes @ codes.T)
    off = ~np.eye(len(dist), dtype=bool)
    return float(np.min(np.abs(dist - np.round(dist))[off]))


def mean_abs_code(model: HashModel, features: np.ndarray, alpha: float) -> float:
    return float(np.mean(np.abs(np.tanh(alpha * model.activations(features)))))


@dataclass
class EpochRecord:
    epoch: int
    alpha: float
    learning_rate: float
    objective: float
    skipped_batches: int
    mean_abs_code: float
    validation: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    model: HashModel
    alpha: float
    history: list[EpochRecord]

    def history_dicts(self) -> list[dict]:
        return [dataclasses.asdict(r) for r in self.history]


def train(
    model: HashModel,
    features: np.ndarray,
    payload: np.ndarray,
    oracle: AffinityOracle,
    config: TrainConfig,
    validate: Callable[[HashModel], dict] | None = None,
    callbacks: Sequence[Callable[[EpochRecord, HashModel], None]] = (),
) -> TrainResult:
    """Shuffled-minibatch SGD with momentum on the ascent direction.

    ``payload`` is what ``oracle.pair_levels`` consumes for each training
    item (labels, label indicators or features). ``validate`` receives a
    snapshot copy of the model after every epoch.
    """
    config.validate()
    x = np.asarray(features, dtype=np.float64)
    if len(x) < 2:
        raise DataError("training needs at least two items")
    if payload is None:
        raise DataError("affinity oracle payload (labels or features) is missing")
    payload = np.asarray(payload)
    levels = oracle.levels
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    vel_w = np.zeros_like(model.weights)
    vel_b = None if model.bias is None else np.zeros_like(model.bias)
    alpha = config.alpha
    lr = config.learning_rate
    best, stale = -math.inf, 0
    history: list[EpochRecord] = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        values, skipped = [], 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            lv = oracle.pair_levels(payload[idx], payload[idx])
            try:
                res = minibatch_objective(model, x[idx], lv, levels, config, alpha)
            except DegenerateBatchError:
                skipped += 1
                continue
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from exc
            vel_w = config.momentum * vel_w + lr * res.grad_weights
            model.weights = model.weights + vel_w
            if vel_b is not None:
                vel_b = config.momentum * vel_b + lr * res.grad_bias
                model.bias = model.bias + vel_b
            if not np.isfinite(model.weights).all():
                raise NumericError(f"epoch {epoch}: weights diverged to non-finite values")
            values.append(res.value)

        epoch_value = float(np.mean(values)) if values else math.nan
        record = EpochRecord(
            epoch=epoch,
            alpha=alpha,
            learning_rate=lr,
            objective=epoch_value,
            skipped_batches=skipped,
            mean_abs_code=mean_abs_code(model, x, alpha),
            validation=validate(model.copy()) if validate else {},
        )
        history.append(record)
        log.info("epoch %d alpha %.3g lr %.3g objective %.5f %s", epoch, alpha, lr, epoch_value, record.validation)
        for cb in callbacks:
            cb(record, model.copy())

        if values:
            if epoch_value > best + 1e-6:
                best, stale = epoch_value, 0
            else:
                stale += 1
                if stale >= config.plateau_patience:
                    lr *= config.lr_decay
                    stale = 0
        alpha = alpha_schedule_step(alpha, epoch, config)

    return TrainResult(model, alpha, history)
