"""Dense-tensor numerics with reverse-mode differentiation."""

from . import tensor as F
from .gradcheck import GradientCheckError, directional_check, gradient_check
from .modules import (
    AdaLN,
    Conv2d,
    Dropout,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    timestep_embedding,
)
from .optim import ParameterStore, read_tensors, write_tensors
from .tensor import ShapeError, Tensor, no_grad

PRIMITIVES = ("linear", "layer_norm", "softmax", "gelu", "dropout", "conv2d", "embedding_lookup")


def primitive_forward(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the named primitive ops by name."""
    table = {
        "linear": F.linear,
        "layer_norm": F.layer_norm,
        "softmax": F.softmax,
        "gelu": F.gelu,
        "dropout": F.dropout,
        "conv2d": F.conv2d,
        "embedding_lookup": F.embedding,
    }
    if op not in table:
        raise ValueError(f"unknown primitive {op!r}; expected one of {PRIMITIVES}")
    return table[op](*inputs, **kwargs)


__all__ = [
    "AdaLN", "Conv2d", "Dropout", "Embedding", "F", "FeedForward", "GradientCheckError", "LayerNorm",
    "Linear", "Module", "MultiHeadAttention", "PRIMITIVES", "ParameterStore", "ShapeError", "Tensor",
    "directional_check", "gradient_check", "no_grad", "primitive_forward", "read_tensors", "timestep_embedding", "write_tensors",
]
