"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def gradient_check(f: Callable[[Tensor], Tensor], x: np.ndarray,
                   h: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f`` maps one tensor to a scalar tensor and is evaluated in float64.
    Per element the error is |a - n| / max(1, |a|, |n|); the max over all
    elements is returned.
    """
    x64 = np.asarray(x, dtype=np.float64)

    leaf = Tensor(x64.copy(), requires_grad=True)
    loss = f(leaf)
    backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x64)

    numeric = np.zeros_like(x64)
    flat = x64.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x64.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x64.copy())).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def spread_values(rng: np.random.Generator, shape: tuple[int, ...],
                  lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    """Random values with pairwise gaps far above the finite-difference step.

    A shuffled permutation of an even grid over [lo, hi]: all entries are
    distinct with separation (hi-lo)/n, keeping arg-extremum routing in the
    pooling ops away from ties during +-h probing.
    """
    n = int(np.prod(shape))
    vals = lo + (hi - lo) * (np.arange(n, dtype=np.float64) + 0.5) / n
    rng.shuffle(vals)
    return vals.reshape(shape)
