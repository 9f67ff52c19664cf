"""Budgeted per-entity embedding-size search for collaborative filtering."""

from .backbone import Backbone, TrainConfig, finetune, train
from .dataset import InteractionDataset, generate_synthetic, load_interactions, split
from .embedding import MaskedEmbeddingTable, apply_action, export_sparse, import_sparse
from .metrics import eval_ensemble, fitness_ratio
from .predictor import FitnessPredictor, Population
from .sampler import SizeAction, compute_budget, generate_action, sr_action, su_action
from .search import SearchConfig, pretrain, run_baseline, run_search, selective_retrain

__version__ = "0.1.0"

__all__ = [
    "Backbone", "TrainConfig", "finetune", "train",
    "InteractionDataset", "generate_synthetic", "load_interactions", "split",
    "MaskedEmbeddingTable", "apply_action", "export_sparse", "import_sparse",
    "eval_ensemble", "fitness_ratio",
    "FitnessPredictor", "Population",
    "SizeAction", "compute_budget", "generate_action", "sr_action", "su_action",
    "SearchConfig", "pretrain", "run_baseline", "run_search", "selective_retrain",
]
