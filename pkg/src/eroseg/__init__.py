"""Confidence-guided adversarial attacks and adversarial training for a tiny
numpy segmentation network."""

from .attacks import AttackConfig, AttackTrace, eroseg_attack, pgd_attack
from .data import Dataset, Prng, generate
from .errors import FormatError, ShapeError, TrainingError, ValidationError
from .metrics import accumulate, miou
from .model import SegNetTiny, forward, init_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, adv_train, evaluate_clean, evaluate_under_attack, train_clean

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackTrace", "eroseg_attack", "pgd_attack",
    "Dataset", "Prng", "generate",
    "FormatError", "ShapeError", "TrainingError", "ValidationError",
    "accumulate", "miou",
    "SegNetTiny", "forward", "init_model", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "adv_train", "evaluate_clean", "evaluate_under_attack", "train_clean",
]
