"""Bias-corrected Adam over named rank-4 parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def moments_for(self, name: str, like: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
        m, v = self.m[name], self.v[name]
        if m.shape != like.shape:
            raise ValueError(f"moment buffer for {name!r} has shape {m.shape}, parameter has {like.shape}")
        return m, v


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Apply one Adam update in place using each parameter's ``.grad``.

    Parameters without a gradient are treated as having a zero gradient, so
    their moments still decay; ``state.t`` advances by exactly one.
    """
    for name, p in params.items():
        g = p.grad
        if g is not None and g.shape != p.dims:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.dims}")

    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, p in params.items():
        m, v = state.moments_for(name, p.data)
        g = p.grad
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
        if state.lr == 0.0:
            continue
        m_hat = m / correction1
        v_hat = v / correction2
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.data[...] -= update.astype(p.data.dtype)
