"""Curvature-aware rank allocation and trust-region training for low-rank adapters."""
from __future__ import annotations

__version__ = "0.1.0"

from .config import ConfigError, RunConfig, load_config
from .curvature import CurvatureProxy, estimate_hutchinson_diag, estimate_kfac, metric_norm_sq, whiten_gradient
from .data import Dataset, PlantedSpec, gen_planted_task, split
from .linalg import eigh_spd, exact_svd, kron_quadratic_form, randomized_svd
from .model import AdapterPair, ArchSpec, BaseNetwork, build_network, init_adapters, merge_adapters, predict
from .scheduler import BudgetPlan, allocate_greedy, schedule, score_layer, uniform_plan
from .trainer import TrainConfig, penalty_value_and_grad, train

__all__ = [
    "AdapterPair", "ArchSpec", "BaseNetwork", "BudgetPlan", "ConfigError", "CurvatureProxy",
    "Dataset", "PlantedSpec", "RunConfig", "TrainConfig", "allocate_greedy", "build_network",
    "eigh_spd", "estimate_hutchinson_diag", "estimate_kfac", "exact_svd", "gen_planted_task",
    "init_adapters", "kron_quadratic_form", "load_config", "merge_adapters", "metric_norm_sq",
    "penalty_value_and_grad", "predict", "randomized_svd", "schedule", "score_layer", "split",
    "train", "uniform_plan", "whiten_gradient",
]
