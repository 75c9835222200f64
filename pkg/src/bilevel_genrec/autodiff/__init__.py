"""Reverse-mode automatic differentiation on float64 numpy arrays.

Graphs are built eagerly (define-by-run): applying a primitive computes its
value immediately and, when any input requires a gradient, records a node.
"""
from . import ops
from .gradients import backward, gradient, tensors_to_arrays, unrolled_gradient
from .ops import (
    add, as_tensor, concat, cross_entropy, div, dropout, exp, getitem, layer_norm, log,
    log_softmax, matmul, mean, mul, neg, pick, power, relu, reshape, scale, softmax,
    squared_distance, stack, stop_gradient, straight_through, sub, sum, take, transpose,
)
from .params import ParameterSet
from .tensor import ShapeError, Tensor, grad, grad_mode, is_grad_enabled, no_grad, topological_order


def evaluate(root: Tensor):
    """Value of a graph's root node (graphs are evaluated as they are built)."""
    return root.data


__all__ = [
    "Tensor", "ParameterSet", "ShapeError", "grad", "gradient", "backward",
    "unrolled_gradient", "evaluate", "no_grad", "grad_mode", "is_grad_enabled",
    "topological_order", "tensors_to_arrays", "ops",
    "add", "as_tensor", "concat", "cross_entropy", "div", "dropout", "exp", "getitem",
    "layer_norm", "log", "log_softmax", "matmul", "mean", "mul", "neg", "pick", "power",
    "relu", "reshape", "scale", "softmax", "squared_distance", "stack", "stop_gradient",
    "straight_through", "sub", "sum", "take", "transpose",
]
