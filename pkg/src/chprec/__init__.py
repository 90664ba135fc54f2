"""Cross-hop graph collaborative filtering with locality-adaptive layers."""

from .errors import ChprecError
from .graph import BipartiteGraph, PropagationOperator
from .model import ModelParams
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = ["BipartiteGraph", "ChprecError", "ModelParams", "PropagationOperator", "TrainConfig"]
