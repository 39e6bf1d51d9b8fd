"""Differentiable soft-tree ensembles in supernode form."""

from .activation import Logistic, SmoothStep, make_activation
from .dataio import Dataset, load_csv, split, standardize
from .ensemble import EnsembleConfig, EnsembleParams, backward, forward, init_params, oracle_forward, predict
from .model import Model
from .objectives import batch_objective, closeness_penalty, get_objective
from .trainer import SearchSpace, TrainReport, TrainSpec, fit, random_search

__version__ = "0.1.0"
