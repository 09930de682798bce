"""FCViT: convolutional vision backbone with fused global-context token mixing.

A numpy-only reference implementation with a small autodiff engine,
parameter/FLOP accounting, attention statistics and a bit-exact file format.
"""

from .model import ModelConfig, StageConfig, build_model, count_flops, count_params, model_forward, preset
from .tensor import NonFiniteError, ShapeError, Tensor

__all__ = [
    "ModelConfig",
    "NonFiniteError",
    "ShapeError",
    "StageConfig",
    "Tensor",
    "build_model",
    "count_flops",
    "count_params",
    "model_forward",
    "preset",
]
__version__ = "0.1.0"
