"""Offline multi-agent RL with coupled value factorization.

Local values ``V_i``/``Q_i`` are combined into ``V_tot``/``Q_tot`` through
non-negative, coupled credit weights; values are learned in-sample with
expectile regression and policies are extracted by advantage-weighted
regression.
"""

from .cvf import CvfModel, Variant
from .dataset import OfflineDataset, generate, load, save, subsample
from .env import make_env, make_grid_env, make_matrix_game
from .estimator import OMAC
from .trainer import PolicyModel, TrainConfig, evaluate, run

__version__ = "0.1.0"

__all__ = [
    "CvfModel", "Variant", "OfflineDataset", "generate", "load", "save", "subsample",
    "make_env", "make_grid_env", "make_matrix_game", "OMAC", "PolicyModel", "TrainConfig",
    "evaluate", "run",
]
