from megan.autodiff.nn import BatchNorm1d, Linear, Module, Parameter
from megan.autodiff.optim import Adam
from megan.autodiff.tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    batchnorm,
    column,
    concat,
    custom_op,
    detach,
    div,
    exp,
    grad,
    leaky_relu,
    linear,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    one_hot,
    relu,
    rows,
    sigmoid,
    softmax,
    softplus,
    square,
    sub,
    sum,

)

__all__ = [
    "Adam", "BatchNorm1d", "Linear", "Module", "Parameter", "Tensor",
    "add", "as_tensor", "backward", "batchnorm", "column", "concat", "custom_op", "detach", "div", "exp",
    "grad", "leaky_relu", "linear", "log", "matmul", "mean", "mul", "neg", "no_grad", "one_hot", "relu",
    "rows", "sigmoid", "softmax", "softplus", "square", "sub", "sum",
]
