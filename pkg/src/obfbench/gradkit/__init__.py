"""Minimal reverse-mode autodiff over dense numpy arrays."""
from .ops import (add, concat, cross_entropy, dot, embedding, gelu, layer_norm, matmul, scale,
                  slice, softmax, sum, tanh)
from .tape import DEFAULT_DTYPE, Gradients, NonFiniteError, Tape, Tensor, constant

__all__ = [
    "DEFAULT_DTYPE", "Gradients", "NonFiniteError", "Tape", "Tensor", "constant",
    "add", "concat", "cross_entropy", "dot", "embedding", "gelu", "layer_norm", "matmul",
    "scale", "slice", "softmax", "sum", "tanh", "backward",
]


def backward(tape: Tape, output: Tensor) -> Gradients:
    return tape.backward(output)
