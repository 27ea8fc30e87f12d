"""Tie-aware ranking metrics for Hamming retrieval and hash learning that optimizes them."""

from .errors import (
    CombinatorialGuardError,
    DataError,
    DimensionError,
    NumericError,
    TalrError,
    UndefinedMetricError,
    UnknownLevelError,
)
from .hamming import BinaryCodebook, TieGroupedRanking, binarize_and_pack, counting_sort_rank, rank_by_distance
from .metrics import (
    AffinityLevels,
    MetricReport,
    audit_codes,
    build_tie_histogram,
    evaluate_codes,
    permutation_average_oracle,
    tie_aware,
    tiebreak_range,
)
from .relaxed import OBJECTIVES, relax_codes, soft_histogram
from .trainer import AffinityOracle, HashModel, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AffinityLevels",
    "AffinityOracle",
    "BinaryCodebook",
    "CombinatorialGuardError",
    "DataError",
    "DimensionError",
    "HashModel",
    "MetricReport",
    "NumericError",
    "OBJECTIVES",
    "TalrError",
    "TieGroupedRanking",
    "TrainConfig",
    "UndefinedMetricError",
    "UnknownLevelError",
    "audit_codes",
    "binarize_and_pack",
    "build_tie_histogram",
    "counting_sort_rank",
    "evaluate_codes",
    "load_checkpoint",
    "permutation_average_oracle",
    "rank_by_distance",
    "relax_codes",
    "save_checkpoint",
    "soft_histogram",
    "tie_aware",
    "tiebreak_range",
    "train",
]
