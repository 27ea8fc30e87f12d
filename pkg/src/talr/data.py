"""Dataset files, feature standardisation and the synthetic cluster fixture.

Binary formats (all little-endian):

* features: ``b"TALRFEAT"``, u32 version, u32 rows, u32 dim, then f32 row-major.
* labels:   ``b"TALRLABL"``, u32 rows, u32 max_labels, then per row a u32
  count followed by that many u32 label ids.

Both also load from plain CSV (one row per item; a labels row lists the
item's label ids).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

FEATURE_MAGIC = b"TALRFEAT"
FEATURE_VERSION = 1
LABEL_MAGIC = b"TALRLABL"
_FEAT_HEADER = struct.Struct("<8sIII")
_LABEL_HEADER = struct.Struct("<8sII")


def write_features(path: str | Path, features: np.ndarray) -> None:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("features must be a 2D matrix")
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, *x.shape))
        fh.write(x.astype("<f4").tobytes())


def _read_csv_rows(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]


def read_features(path: str | Path) -> np.ndarray:
    """Load a feature matrix from the binary format or CSV (chosen by magic bytes)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] == FEATURE_MAGIC:
        if len(blob) < _FEAT_HEADER.size:
            raise DataError(f"{path}: truncated feature header at byte {len(blob)}")
        _, version, rows, dim = _FEAT_HEADER.unpack_from(blob)
        if version != FEATURE_VERSION:
            raise DataError(f"{path}: unsupported feature file version {version}")
        expected = _FEAT_HEADER.size + 4 * rows * dim
        if len(blob) < expected:
            raise DataError(f"{path}: truncated feature data, file ends at byte {len(blob)} of {expected}")
        x = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=_FEAT_HEADER.size)
        x = x.reshape(rows, dim).astype(np.float64)
    elif blob[:8] == LABEL_MAGIC or path.suffix.lower() not in (".csv", ".txt"):
        raise DataError(f"{path}: bad magic {blob[:8]!r}, expected {FEATURE_MAGIC!r} or a .csv file")
    else:
        rows = _read_csv_rows(path)
        try:
            x = np.array([[float(c) for c in row] for row in rows], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric feature value ({exc})") from None
        if x.ndim != 2:
            raise DataError(f"{path}: feature rows have inconsistent lengths")
    if np.isnan(x).any():
        raise DataError(f"{path}: features contain NaN")
    return x


def write_labels(path: str | Path, labels: Sequence[Sequence[int]]) -> None:
    rows = [list(map(int, r)) for r in labels]
    max_labels = max((len(r) for r in rows), default=0)
    with open(path, "wb") as fh:
        fh.write(_LABEL_HEADER.pack(LABEL_MAGIC, len(rows), max_labels))
        for r in rows:
            fh.write(struct.pack(f"<I{len(r)}I", len(r), *r))


def read_labels(path: str | Path) -> list[list[int]]:
    """Per-item label-id lists from the binary format or CSV."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != LABEL_MAGIC:
        if path.suffix.lower() not in (".csv", ".txt"):
            raise DataError(f"{path}: bad magic {blob[:8]!r}, expected {LABEL_MAGIC!r} or a .csv file")
        try:
            return [[int(c) for c in row if c.strip()] for row in _read_csv_rows(path)]
        except ValueError as exc:
            raise DataError(f"{path}: non-integer label ({exc})") from None
    if len(blob) < _LABEL_HEADER.size:
        raise DataError(f"{path}: truncated label header at byte {len(blob)}")
    _, rows, max_labels = _LABEL_HEADER.unpack_from(blob)
    out, pos = [], _LABEL_HEADER.size
    for i in range(rows):
        if pos + 4 > len(blob):
            raise DataError(f"{path}: truncated label file at byte {pos} (row {i})")
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if count > max_labels:
            raise DataError(f"{path}: row {i} has {count} labels, header allows {max_labels}")
        if pos + 4 * count > len(blob):
            raise DataError(f"{path}: truncated label file at byte {pos} (row {i})")
        out.append(list(struct.unpack_from(f"<{count}I", blob, pos)))
        pos += 4 * count
    return out


def labels_to_indicator(labels: Sequence[Sequence[int]], num_labels: int | None = None) -> np.ndarray:
    num_labels = num_labels or 1 + max((max(r) for r in labels if r), default=0)
    out = np.zeros((len(labels), num_labels), dtype=np.int64)
    for i, r in enumerate(labels):
        out[i, list(r)] = 1
    return out


def single_labels(labels: Sequence[Sequence[int]]) -> np.ndarray:
    if any(len(r) != 1 for r in labels):
        raise DataError("single-label mode needs exactly one label per item")
    return np.array([r[0] for r in labels], dtype=np.int64)


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> Standardizer:
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale


@dataclass
class DatasetFile:
    """Features, optional per-item label lists and the train/query/database split."""

    features: np.ndarray
    labels: list[list[int]] | None = None
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.features)
        if self.labels is not None and len(self.labels) != n:
            raise DataError(f"{len(self.labels)} label rows for {n} feature rows")
        for name, idx in list(self.splits.items()):
            idx = np.asarray(idx, dtype=np.int64)
            if len(idx) and (idx.min() < 0 or idx.max() >= n):
                raise DataError(f"split {name!r} has indices outside [0, {n})")
            self.splits[name] = idx
        if {"query", "database"} <= set(self.splits):
            if np.intersect1d(self.splits["query"], self.splits["database"]).size:
                raise DataError("query and database splits must be disjoint")

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise DataError(f"dataset has no {name!r} split")
        return self.splits[name]


def load_splits(path: str | Path) -> dict[str, np.ndarray]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid split JSON ({exc})") from None
    return {k: np.asarray(v, dtype=np.int64) for k, v in raw.items()}


def load_dataset(features: str | Path, labels: str | Path | None = None, splits: str | Path | None = None) -> DatasetFile:
    return DatasetFile(
        read_features(features),
        read_labels(labels) if labels else None,
        load_splits(splits) if splits else {},
    )


def make_clusters(
    num_items: int,
    num_classes: int = 4,
    dim: int = 32,
    separation: float = 4.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic unit-variance Gaussian clusters with centres ``separation`` apart.

    Centres sit on orthogonal directions of a random rotation, scaled so
    every pair of centres is exactly ``separation`` standard deviations apart.
    """
    if num_classes > dim:
        raise DataError("need dim >= num_classes to place orthogonal centres")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    centres = basis[:num_classes] * (separation / np.sqrt(2.0))
    labels = rng.integers(0, num_classes, num_items)
    return centres[labels] + rng.normal(size=(num_items, dim)), labels


def synthetic_dataset(
    num_train: int = 2000,
    num_query: int = 400,
    num_database: int = 1600,
    num_classes: int = 4,
    dim: int = 32,
    separation: float = 4.0,
    seed: int = 0,
) -> DatasetFile:
    """Cluster fixture with disjoint train / query / database splits."""
    n = num_train + num_query + num_database
    x, y = make_clusters(n, num_classes, dim, separation, seed)
    bounds = np.cumsum([0, num_train, num_query, num_database])
    splits = {name: np.arange(bounds[i], bounds[i + 1]) for i, name in enumerate(("train", "query", "database"))}
    return DatasetFile(x, [[int(v)] for v in y], splits)
