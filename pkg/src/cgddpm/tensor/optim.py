"""AdamW: Adam moments with weight decay decoupled from the adaptive step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ShapeError, Tensor


@dataclass
class OptimizerState:
    lr: float = 4e-5
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """Update ``params`` in place from ``grads``; advances ``state.step``.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)

    Parameters without a gradient entry are treated as having zero gradient,
    so they still receive weight decay.
    """
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeError(f"optimizer moment for '{name}' has shape {m.shape}, parameter has {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data = (p.data - state.lr * update).astype(p.dtype, copy=False)


class AdamW:
    """Thin stateful wrapper pairing a parameter dict with its OptimizerState."""

    def __init__(self, params: dict[str, Tensor], lr=4e-5, weight_decay=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state)
