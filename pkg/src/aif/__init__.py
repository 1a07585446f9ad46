"""Asynchronous pre-ranking inference engine."""
from .config import AIFConfig, StageCostConfig, load_config
from .kernels import BACKEND
from .pipeline import Merger, Request, ScoredCandidate, equivalence_check

__all__ = [
    "AIFConfig",
    "BACKEND",
    "Merger",
    "Request",
    "ScoredCandidate",
    "StageCostConfig",
    "equivalence_check",
    "load_config",
]
__version__ = "0.1.0"
