"""Training dynamics of sign-based optimizers on a two-layer softmax-attention model."""

from .datagen import DataConfig, Dataset, generate_dataset
from .gradients import Grads, loss_and_grads
from .optim import OptimizerSpec, run_training
from .transformer import ModelConfig, Params, forward, init_params

__version__ = "0.1.0"

__all__ = [
    "DataConfig",
    "Dataset",
    "Grads",
    "ModelConfig",
    "OptimizerSpec",
    "Params",
    "forward",
    "generate_dataset",
    "init_params",
    "loss_and_grads",
    "run_training",
]
