"""Single-image rain removal with an attention U-Net and a Harris-corner loss.

Everything runs on a small numpy reverse-mode autodiff engine
(:mod:`shark.autodiff`).
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import ImagePair, RainSynthesisParams, load_image, save_image, synthesize_rain, synthetic_scene
from .estimator import HarrisCornerDetector, SharkDerainer, derain_image
from .exceptions import (
    CheckpointError,
    ConfigError,
    ImageReadError,
    NonFiniteError,
    ShapeError,
    SharkError,
    UsageError,
    ValidationError,
)
from .losses import HarrisParams, LossWeights, SSIMParams, total_loss
from .metrics import EvalReport, evaluate_dataset, psnr, ssim_eval
from .network import ModelConfig, init_params, shark_forward
from .trainer import TrainConfig, train

__all__ = [
    "__version__",
    "Tensor", "backward", "no_grad",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "ImagePair", "RainSynthesisParams", "load_image", "save_image", "synthesize_rain", "synthetic_scene",
    "HarrisCornerDetector", "SharkDerainer", "derain_image",
    "CheckpointError", "ConfigError", "ImageReadError", "NonFiniteError", "ShapeError", "SharkError",
    "UsageError", "ValidationError",
    "HarrisParams", "LossWeights", "SSIMParams", "total_loss",
    "EvalReport", "evaluate_dataset", "psnr", "ssim_eval",
    "ModelConfig", "init_params", "shark_forward",
    "TrainConfig", "train",
]
