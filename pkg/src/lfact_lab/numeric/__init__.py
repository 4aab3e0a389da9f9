"""Tensor arithmetic, reverse-mode differentiation and seeded randomness."""

from .gradcheck import GradCheckError, HaltingFlipError, grad_check
from .params import ParamStore, glorot_init
from .rng import Rng
from .tensor import (
    PRIMITIVES,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    add,
    apply_primitive,
    backward,
    concat,
    const,
    exp,
    log,
    log_softmax,
    matmul,
    mul,
    neg,
    pick,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    sum_,
    tanh,
    transpose,
)

__all__ = [
    "GradCheckError",
    "HaltingFlipError",
    "PRIMITIVES",
    "ParamStore",
    "Rng",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "apply_primitive",
    "backward",
    "concat",
    "const",
    "exp",
    "glorot_init",
    "grad_check",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "neg",
    "pick",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "slice_",
    "softmax",
    "sum_",
    "tanh",
    "transpose",
]
