"""Reverse-mode autodiff over real and complex numpy arrays, plus Adam."""

from .adam import Adam, AdamState, adam_step
from .gradcheck import analytic_gradient, gradcheck, numerical_gradient, relative_error
from .tensor import (
    Tape,
    Tensor,
    abs2,
    active_tape,
    add,
    as_tensor,
    backward,
    batch_norm,
    c_leaky_relu,
    c_relu,
    concat,
    conj,
    div,
    exp,
    getitem,
    imag,
    leaky_relu,
    log2,
    matmul,
    maximum,
    modulus,
    mul,
    neg,
    real,
    record_kinks,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sqrt,
    sub,
    swapaxes,
)
