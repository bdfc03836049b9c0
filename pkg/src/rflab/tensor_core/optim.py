"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rflab.errors import DimensionError
from rflab.tensor_core.layers import LayerParams


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: LayerParams) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``."""
    sq = 0.0
    for k in sorted(grads):
        g = grads[k].astype(np.float64)
        sq += float(np.dot(g.ravel(), g.ravel()))
    norm = float(np.sqrt(sq))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


def adam_step(params: LayerParams, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One Adam update. Parameters missing from ``grads`` are left untouched.

    Returns ``(params, state)``; parameter arrays are replaced, not mutated.
    """
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise DimensionError(f"adam: shape mismatch for '{name}': param {p.shape}, "
                                 f"grad {g.shape}, state {state.m[name].shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return params, state
