"""Social-relationship-attention LSTM trajectory prediction toolkit."""

__version__ = "0.1.0"

from .diffcore import Tape, Tensor
from .model import AttentionStrategy, ModelConfig, ModelParams, SceneState

__all__ = [
    "Tape",
    "Tensor",
    "AttentionStrategy",
    "ModelConfig",
    "ModelParams",
    "SceneState",
    "__version__",
]
