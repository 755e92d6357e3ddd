"""Open-set recognition with a margin cosine loss and synthetic open-space descriptors."""

from .autodiff import Tensor, backward, gradcheck
from .data import OpenSetSplit, make_splits
from .metrics import EvalReport, auroc, closed_accuracy, oscr
from .model import CosineHead, OSRModel, omcl_loss, sample_descriptors
from .trainer import TrainConfig, run_trials, train_trial

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "gradcheck",
    "OpenSetSplit", "make_splits",
    "EvalReport", "auroc", "closed_accuracy", "oscr",
    "CosineHead", "OSRModel", "omcl_loss", "sample_descriptors",
    "TrainConfig", "run_trials", "train_trial",
]
