"""Adam on flat parameter vectors."""

from __future__ import annotations

import numpy as np


class AdamState:
    """Per-parameter first/second moments plus the step counter."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(n_params, dtype=np.float32)
        self.v = np.zeros(n_params, dtype=np.float32)
        self.t = 0


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """Bias-corrected Adam update, in place on ``params``.

    A NaN anywhere in ``grads`` aborts the update (parameters and moments
    untouched, step counter not incremented).
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}"
        )
    if not np.isfinite(grads).all():
        bad = int(np.size(grads) - np.isfinite(grads).sum())
        raise FloatingPointError(f"adam_step: {bad} non-finite gradient entries")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m += (1.0 - b1) * (grads - state.m)
    state.v += (1.0 - b2) * (grads * grads - state.v)
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    params -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype)
    return params
