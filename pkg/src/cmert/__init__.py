"""Online action detection and anticipation with context-enhanced memory refinement.

A numpy-only implementation: autodiff tensors, transformer decoder units,
the five-partition memory, training, streaming inference and metrics.
"""

from .memory import FeatureStream, PartitionConfig, extract_windows, load_stream, save_stream
from .model import ModelConfig, ModelParams, forward, load_checkpoint, save_checkpoint
from .streaming import run_stream
from .synthetic import SyntheticGrammar, generate_stream
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "FeatureStream",
    "ModelConfig",
    "ModelParams",
    "PartitionConfig",
    "SyntheticGrammar",
    "TrainConfig",
    "__version__",
    "extract_windows",
    "forward",
    "generate_stream",
    "load_checkpoint",
    "load_stream",
    "run_stream",
    "save_checkpoint",
    "save_stream",
    "train",
]
