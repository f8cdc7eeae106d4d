"""AdamW with decoupled weight decay, plus global-norm gradient clipping.

The optimizer works on named parameter dictionaries (name -> Tensor) so
moment buffers can round-trip through checkpoints by name.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor


class OptimizerError(RuntimeError):
    """Raised when a step is rejected (e.g. non-finite gradients)."""


class AdamWState:
    """Per-parameter first/second moments and the shared step counter.

    beta1/beta2/eps default to the standard values; the weight-decay term is
    applied directly to the parameter, decoupled from the adaptive step.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 weight_decay: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adamw_step(state: AdamWState, params: Mapping[str, Tensor],
               grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
    """One AdamW update in place.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta,
    with bias-corrected moments.  If any gradient contains NaN/Inf the step
    is rejected before any state is touched.
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise OptimizerError(f"adamw_step: lr must be non-negative, got {lr}")
    # lr == 0 is a frozen step: moments advance, parameters stay bitwise equal
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise OptimizerError(f"adamw_step: non-finite gradient for {name!r}; step rejected")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            update = update + (lr * state.weight_decay) * p.data
        p.data = p.data - update.astype(p.data.dtype, copy=False)


def clip_grad_global_norm(grads: Mapping[str, np.ndarray],
                          max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds
    max_norm; otherwise return them unchanged.  Returns (grads, pre-clip norm).

    Norm accumulation and scaling run in float64, which keeps the post-clip
    norm within 1e-9 of max_norm regardless of the training dtype.
    """
    if max_norm <= 0:
        raise ValueError(f"clip_grad_global_norm: max_norm must be positive, got {max_norm}")
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: (np.asarray(g, dtype=np.float64) * scale if g is not None else None)
            for name, g in grads.items()}, norm
