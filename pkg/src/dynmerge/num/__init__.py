from . import autodiff
from .autodiff import Graph, GraphError, Node, backward
from .kernels import (
    NumericFault,
    ShapeError,
    check_finite,
    dtype,
    float64_mode,
    gelu,
    layernorm,
    matmul,
    set_precision,
    sigmoid,
    softmax_rows,
)
from .rng import Rng, fill_bernoulli, fill_normal, rng

__all__ = [
    "autodiff", "Graph", "GraphError", "Node", "backward", "NumericFault", "ShapeError",
    "check_finite", "dtype", "float64_mode", "gelu", "layernorm", "matmul", "set_precision",
    "sigmoid", "softmax_rows", "Rng", "fill_bernoulli", "fill_normal", "rng",
]
