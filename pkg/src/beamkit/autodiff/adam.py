"""Adam with bias correction, applied to the real parameterization of each tensor."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from ..errors import ShapeError, TrainingAbort
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    # moments are stored re + 1j*im for complex parameters
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        state = cls(**kw)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def _split_square(g: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(g):
        return g.real ** 2 + 1j * g.imag ** 2
    return g * g


def _ratio(m_hat: np.ndarray, v_hat: np.ndarray, eps: float) -> np.ndarray:
    if np.iscomplexobj(m_hat):
        return (m_hat.real / (np.sqrt(v_hat.real) + eps)
                + 1j * (m_hat.imag / (np.sqrt(v_hat.imag) + eps)))
    return m_hat / (np.sqrt(v_hat) + eps)


def adam_step(params: Sequence[Tensor], grads, state: AdamState,
              batch_index: Optional[int] = None) -> AdamState:
    """Update ``params`` in place from ``grads`` (a mapping or a parallel list)."""
    if isinstance(grads, Mapping):
        grads = [grads[p] for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"non-finite gradient for {p.name or 'parameter'}",
                                batch_index=batch_index)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * _split_square(g)
        p.data = p.data - state.lr * _ratio(state.m[i] / c1, state.v[i] / c2, state.eps)
    return state


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads, batch_index: Optional[int] = None):
        adam_step(self.params, grads, self.state, batch_index)
