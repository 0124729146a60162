"""Dense tensors with reverse-mode autodiff, plus checkpoint I/O and gradient checks."""

from earmos.numerics.tensor import (
    Tensor,
    attention,
    concat,
    glorot_uniform,
)
from earmos.numerics.checkpoint import load_checkpoint, save_checkpoint
from earmos.numerics.gradcheck import finite_difference_check

__all__ = [
    "Tensor",
    "attention",
    "concat",
    "glorot_uniform",
    "load_checkpoint",
    "save_checkpoint",
    "finite_difference_check",
]
