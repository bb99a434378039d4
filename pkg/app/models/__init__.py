from .runs import Run
from .checkpoints import CheckpointRecord
from .pair_results import PairResult


__all__ = ["Run", "CheckpointRecord", "PairResult"]
