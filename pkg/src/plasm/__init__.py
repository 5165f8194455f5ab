"""Video prediction with pair-wise layer attention and spatial masking, on numpy."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, RunConfig, preset
from .dataio import DatasetFormatError, VideoDataset, gen_moving_shapes, load_dataset, save_dataset
from .kernels import BACKEND as KERNEL_BACKEND
from .metrics import evaluate, mae, mse, psnr, ssim
from .model import VideoPredictor
from .pipeline import TrainingError, predict, pretrain, train
from .rng import Rng

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigError", "DatasetFormatError", "KERNEL_BACKEND", "ModelConfig",
    "Rng", "RunConfig", "TrainingError", "VideoDataset", "VideoPredictor", "evaluate", "gen_moving_shapes",
    "load_checkpoint", "load_dataset", "mae", "mse", "predict", "preset", "pretrain", "psnr", "save_checkpoint",
    "save_dataset", "ssim", "train",
]
