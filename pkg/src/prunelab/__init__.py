"""Prune-retrain experiments on small numpy networks: a reverse-mode tensor
core, masked networks, four pruning criteria, corruption-based distribution
shift, functional-distance metrics and prune-potential / excess-error analysis."""

__version__ = "0.1.0"

from .data import Corruption, Dataset, DistributionSpec, apply_corruption, make_synthetic, mix_augment
from .evaluation import (
    PruneAccuracyCurve,
    excess_error,
    excess_regression,
    prune_accuracy_curve,
    prune_potential,
)
from .metrics import back_select, make_feature_mask, noise_similarity
from .network import MaskedNetwork, accuracy, desk_cnn, flop_reduction, mlp, prune_ratio
from .pruning import PruneMethod, PruneSchedule, prune, prune_retrain, sensitivity
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig

__all__ = [
    "Corruption", "Dataset", "DistributionSpec", "MaskedNetwork", "PruneAccuracyCurve", "PruneMethod",
    "PruneSchedule", "Tensor", "TrainConfig", "accuracy", "apply_corruption", "back_select", "backward",
    "desk_cnn", "excess_error", "excess_regression", "flop_reduction", "make_feature_mask", "make_synthetic",
    "mix_augment", "mlp", "no_grad", "noise_similarity", "prune", "prune_accuracy_curve", "prune_potential",
    "prune_ratio", "prune_retrain", "sensitivity",
]
