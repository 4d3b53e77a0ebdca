from . import ops
from .gradcheck import check_gradients, numerical_grad, relative_error
from .nn import GRUCell, LayerNorm, Linear, MLP, Module, gru_cell
from .ops import (
    abs, add, concat, div, exp, gather, gelu, getitem, layernorm, log, matmul, max, mean, mul,
    neg, relu, reshape, sigmoid, softmax, sqrt, square, sub, sum, tanh,
)
from .tensor import ShapeError, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "GRUCell", "LayerNorm", "Linear", "MLP", "Module", "ShapeError", "Tensor",
    "abs", "add", "backward", "check_gradients", "concat", "div", "exp", "gather", "gelu",
    "getitem", "gru_cell", "is_grad_enabled", "layernorm", "log", "matmul", "max", "mean",
    "mul", "neg", "no_grad", "numerical_grad", "ops", "relative_error", "relu", "reshape",
    "sigmoid", "softmax", "sqrt", "square", "sub", "sum", "tanh",
]
