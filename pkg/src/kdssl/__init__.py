"""Semi-supervised ensemble classification with online distillation and pseudo-labeling."""

from .augment import AugmentationPolicy, Normalizer, PolicySet
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetPools, Example, SplitSpec, SyntheticSpec, generate_synthetic, mask_labels, stratified_split
from .ensemble import Ensemble
from .errors import *  # noqa: F401,F403
from .losses import class_weights, combined_loss, kd_loss, weighted_ce
from .metrics import MetricsReport, compute_metrics, confusion
from .model import ModelSpec, init_model
from .trainer import TrainConfig, run_ssl

__version__ = "0.1.0"
