"""Packed binary codes, popcount Hamming distances and counting-sort ranking.

Codes live in {-1, +1}^b. A +1 is stored as a set bit, -1 as a clear bit.
Bits are packed LSB-first into little-endian uint64 words, row-major: code
element j of a row sits in word j // 64 at bit position j % 64. Unused high
bits of the last word are always zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, DimensionError, UnknownLevelError

WORD_BITS = 64
CODEBOOK_MAGIC = b"TALRCODE"
CODEBOOK_VERSION = 1
_HEADER = struct.Struct("<8sIII")
_SHIFTS = np.arange(WORD_BITS, dtype=np.uint64)


def num_words(num_bits: int) -> int:
    return (num_bits + WORD_BITS - 1) // WORD_BITS


@dataclass(frozen=True)
class BinaryCodebook:
    """Packed b-bit codes for ``num_items`` items."""

    words: np.ndarray
    num_bits: int

    def __post_init__(self) -> None:
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.ndim != 2:
            raise DimensionError("codebook words must be a 2D array")
        if self.num_bits < 1:
            raise DimensionError("num_bits must be >= 1")
        if words.shape[1] != num_words(self.num_bits):
            raise DimensionError(
                f"{words.shape[1]} words per row cannot hold {self.num_bits} bits"
            )
        tail = self.num_bits % WORD_BITS
        if tail and words.shape[0]:
            mask = ~((np.uint64(1) << np.uint64(tail)) - np.uint64(1))
            if np.any(words[:, -1] & mask):
                raise DataError("unused tail bits of the last word must be zero")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @property
    def num_items(self) -> int:
        return self.words.shape[0]

    def __len__(self) -> int:
        return self.num_items

    def __getitem__(self, key) -> BinaryCodebook:
        """Row selection; an integer index yields a one-row codebook."""
        if isinstance(key, (int, np.integer)):
            key = slice(key, key + 1) if key != -1 else slice(-1, None)
        return BinaryCodebook(self.words[key], self.num_bits)

    def to_signs(self) -> np.ndarray:
        """Unpack to a dense ``num_items x num_bits`` matrix of +-1 (int8)."""
        bits = (self.words[:, :, None] >> _SHIFTS) & np.uint64(1)
        bits = bits.reshape(self.num_items, -1)[:, : self.num_bits]
        return (2 * bits.astype(np.int8) - 1).astype(np.int8)

    @classmethod
    def from_signs(cls, signs: np.ndarray) -> BinaryCodebook:
        """Pack a +-1 matrix. Entries other than +1 and -1 are rejected."""
        signs = np.asarray(signs)
        if signs.ndim != 2:
            raise DimensionError("sign matrix must be 2D")
        if not np.isin(signs, (-1, 1)).all():
            raise DataError("sign matrix may only contain -1 and +1")
        return cls(_pack_bits(signs > 0), signs.shape[1])

    def save(self, path: str | Path) -> None:
        header = _HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, self.num_items, self.num_bits)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.words.astype("<u8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> BinaryCodebook:
        blob = Path(path).read_bytes()
        if len(blob) < _HEADER.size:
            raise DataError(f"{path}: truncated codebook header at byte {len(blob)}")
        magic, version, rows, bits = _HEADER.unpack_from(blob)
        if magic != CODEBOOK_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {CODEBOOK_MAGIC!r}")
        if version != CODEBOOK_VERSION:
            raise DataError(f"{path}: unsupported codebook version {version}")
        expected = _HEADER.size + rows * num_words(bits) * 8
        if len(blob) < expected:
            raise DataError(
                f"{path}: truncated codebook, data ends at byte {len(blob)} of {expected}"
            )
        words = np.frombuffer(blob, dtype="<u8", count=rows * num_words(bits), offset=_HEADER.size)
        return cls(words.reshape(rows, num_words(bits)).astype(np.uint64), bits)


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    n, b = bits.shape
    w = num_words(b)
    padded = np.zeros((n, w * WORD_BITS), dtype=np.uint64)
    padded[:, :b] = bits
    padded = padded.reshape(n, w, WORD_BITS) << _SHIFTS
    return np.bitwise_or.reduce(padded, axis=2)


def binarize_and_pack(activations: np.ndarray) -> BinaryCodebook:
    """Hash real activations with sgn and pack the result.

    ``sgn(0)`` is taken to be -1, so a bit is set iff the activation is
    strictly positive.
    """
    activations = np.asarray(activations, dtype=np.float64)
    if activations.ndim == 1:
        activations = activations[None, :]
    if activations.ndim != 2:
        raise DimensionError("activations must be a 2D array")
    if not np.isfinite(activations).all():
        raise DataError("activations contain non-finite values")
    return BinaryCodebook(_pack_bits(activations > 0), activations.shape[1])


def _check_widths(a: BinaryCodebook, b: BinaryCodebook) -> None:
    if a.num_bits != b.num_bits:
        raise DimensionError(f"bit widths differ: {a.num_bits} vs {b.num_bits}")


def _single_row(code: BinaryCodebook) -> np.ndarray:
    if code.num_items != 1:
        raise DimensionError(f"expected a single code row, got {code.num_items}")
    return code.words[0]


def hamming_distance(a: BinaryCodebook, b: BinaryCodebook) -> int:
    """Hamming distance between two single-row codebooks."""
    _check_widths(a, b)
    return int(np.bitwise_count(_single_row(a) ^ _single_row(b)).sum())


def distances_to(query: BinaryCodebook, database: BinaryCodebook) -> np.ndarray:
    """Distances from one query row to every database row, as int64."""
    _check_widths(query, database)
    q = _single_row(query)
    return np.bitwise_count(database.words ^ q).sum(axis=1, dtype=np.int64)


def pairwise_distances(a: BinaryCodebook, b: BinaryCodebook) -> np.ndarray:
    """Full ``len(a) x len(b)`` Hamming distance matrix."""
    _check_widths(a, b)
    out = np.zeros((a.num_items, b.num_items), dtype=np.int64)
    for w in range(a.words.shape[1]):
        out += np.bitwise_count(a.words[:, w, None] ^ b.words[None, :, w])
    return out


@dataclass(frozen=True)
class TieGroupedRanking:
    """A Hamming ranking stored as b+1 tie groups.

    ``order`` lists database indices grouped by distance (ascending index
    within each group); group d is ``order[offsets[d]:offsets[d + 1]]``.
    """

    order: np.ndarray
    offsets: np.ndarray

    @property
    def num_bits(self) -> int:
        return len(self.offsets) - 2

    @property
    def total(self) -> int:
        return int(self.offsets[-1])

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def groups(self) -> list[np.ndarray]:
        return [self.order[self.offsets[d] : self.offsets[d + 1]] for d in range(len(self.offsets) - 1)]

    def group(self, d: int) -> np.ndarray:
        return self.order[self.offsets[d] : self.offsets[d + 1]]

    @classmethod
    def from_groups(cls, groups: Sequence[Iterable[int]]) -> TieGroupedRanking:
        arrays = [np.asarray(list(g), dtype=np.int64) for g in groups]
        sizes = np.array([len(g) for g in arrays], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        order = np.concatenate(arrays) if arrays else np.zeros(0, dtype=np.int64)
        if len(order) and not np.array_equal(np.sort(order), np.arange(len(order))):
            raise DataError("tie groups must partition 0..n-1")
        return cls(order.astype(np.int64), offsets)


def rank_by_distance(distances: np.ndarray, num_bits: int) -> TieGroupedRanking:
    """Counting sort of integer distances in [0, num_bits] into tie groups."""
    distances = np.asarray(distances)
    counts = np.bincount(distances, minlength=num_bits + 1)
    if len(counts) > num_bits + 1:
        raise DataError(f"distance {distances.max()} exceeds code length {num_bits}")
    offsets = np.concatenate([[0], np.cumsum(counts)])
    order = np.empty(len(distances), dtype=np.int64)
    # one O(N) scan per distance value keeps the total at O(bN) and each group stable
    for d in np.flatnonzero(counts):
        order[offsets[d] : offsets[d + 1]] = np.flatnonzero(distances == d)
    return TieGroupedRanking(order, offsets)


def counting_sort_rank(query: BinaryCodebook, database: BinaryCodebook) -> TieGroupedRanking:
    """Hamming-rank ``database`` against a single ``query`` row."""
    return rank_by_distance(distances_to(query, database), database.num_bits)


def gain(levels) -> np.ndarray:
    """Exponential gain 2^v - 1."""
    return np.exp2(np.asarray(levels, dtype=np.float64)) - 1.0


def sort_gains_desc(affinities: Sequence[int], levels: Sequence[int]) -> np.ndarray:
    """Gains of ``affinities`` in descending order, via per-level counting."""
    levels = np.unique(np.asarray(levels, dtype=np.int64))
    affinities = np.asarray(affinities, dtype=np.int64)
    slot = np.searchsorted(levels, affinities)
    known = (slot < len(levels)) & (levels[np.minimum(slot, len(levels) - 1)] == affinities)
    if not known.all():
        bad = affinities[~known][0]
        raise UnknownLevelError(f"affinity value {bad} is not in level set {levels.tolist()}")
    counts = np.bincount(slot, minlength=len(levels))
    return np.repeat(gain(levels)[::-1], counts[::-1])
