"""Minimal dense/conv/recurrent network core with hand-derived gradients.

Everything is numpy, float32 by default, and deliberately small: static
layer chains with cached activations, an Adam optimizer on flat parameter
vectors, and a finite-difference gradient checker. No general autodiff.
"""

from .layers import (
    Conv2d,
    Dense,
    Flatten,
    LSTM,
    Layer,
    ReLU,
    Softmax,
    Tanh,
    glorot_uniform,
    log_softmax,
    softmax,
)
from .network import (
    Sequential,
    flatten_arrays,
    load_model,
    param_count,
    save_model,
    unflatten_into,
)
from .optim import AdamState, adam_step
from .gradcheck import grad_check, grad_check_fn

__all__ = [
    "AdamState",
    "Conv2d",
    "Dense",
    "Flatten",
    "LSTM",
    "Layer",
    "ReLU",
    "Sequential",
    "Softmax",
    "Tanh",
    "adam_step",
    "flatten_arrays",
    "glorot_uniform",
    "grad_check",
    "grad_check_fn",
    "load_model",
    "log_softmax",
    "param_count",
    "save_model",
    "softmax",
    "unflatten_into",
]
