"""fogstat: co-occurrence texture statistics + dual-branch fog segmentation."""

from .dbsfnet import ModelConfig, forward, init_params, predict_mask
from .kem import kem_transform, FEATURE_NAMES
from .metrics import ConfusionCounts, confusion, metrics_from_confusion
from .trainer import TrainConfig, train

__version__ = "0.1.0"
