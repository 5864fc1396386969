"""bamforge: a desk-scale lab for upcycling dense transformers into
FFN-and-attention expert mixtures, with exact cost accounting."""

from .analysis import compute_match, count_params, flops_per_token
from .model import Checkpoint, CheckpointMeta, ModelConfig
from .tensor import Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointMeta", "ModelConfig", "Tensor",
    "compute_match", "count_params", "flops_per_token", "grad_check",
    "__version__",
]
