"""Composite training objective: Dice + peripherally weighted BCE +
centerline Dice on soft skeletons, with deep supervision over the branch
heads.

All losses take probabilities ``p`` on the tape plus constant targets
(numpy arrays or detached tensors).  4-D inputs are treated as a batch
[N,C,H,W]: every term reduces per sample first and then averages over the
batch, which keeps per-image difficulty well-defined for the hard-example
miner.  Lower-rank inputs are a single sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import LossConfig
from .engine import (
    Tensor,
    add,
    clamp,
    div,
    log,
    mul,
    pool2d,
    relu,
    sigmoid,
    sub,
    sum_per_sample,
    tmean,
    tsum,
)
from .engine.nnops import bilinear_resize_array

PROB_CLAMP = 1e-12


def _as_const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_match(p: Tensor, other: Tensor, op: str) -> None:
    if p.data.shape != other.data.shape:
        raise ValueError(f"{op}: shape mismatch {p.data.shape} vs {other.data.shape}")


def _per_sample_sum(x: Tensor) -> Tensor:
    """Per-sample sums [N] for 4-D tensors, a scalar otherwise."""
    if x.data.ndim == 4:
        return sum_per_sample(x)
    return tsum(x)


def dice_loss(p: Tensor, g, eps: float = 1.0) -> Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), batch-averaged."""
    g = _as_const(g, p)
    _check_match(p, g, "dice_loss")
    inter = _per_sample_sum(mul(p, g))
    denom = add(_per_sample_sum(p), _per_sample_sum(g))
    frac = div(inter * 2.0 + eps, denom + eps)
    return tmean(1.0 - frac)


def weighted_bce(p: Tensor, g, weight_map=None, smoothing: float = 0.05) -> Tensor:
    """Label-smoothed cross-entropy with a per-pixel weight map.

    gs = (1 - smoothing) * g + smoothing / 2; probabilities are clamped to
    [1e-12, 1 - 1e-12] before the logs.  ``weight_map=None`` means uniform
    weight 1.
    """
    g = _as_const(g, p)
    _check_match(p, g, "weighted_bce")
    gs_data = (1.0 - smoothing) * g.data + smoothing / 2.0
    gs = Tensor(gs_data.astype(p.data.dtype, copy=False))
    one_minus_gs = Tensor((1.0 - gs_data).astype(p.data.dtype, copy=False))
    pc = clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    term = add(mul(gs, log(pc)), mul(one_minus_gs, log(1.0 - pc)))
    if weight_map is not None:
        w = _as_const(weight_map, p)
        _check_match(p, w, "weighted_bce")
        term = mul(w, term)
    return -tmean(term)


def _erode(m: Tensor) -> Tensor:
    return pool2d(m, "min", 3, stride=1, replicate_pad=True)


def _dilate(m: Tensor) -> Tensor:
    return pool2d(m, "max", 3, stride=1, replicate_pad=True)


def _open(m: Tensor) -> Tensor:
    return _dilate(_erode(m))


def soft_skeletonize(m: Tensor, iterations: int = 5) -> Tensor:
    """Differentiable thinning by iterated morphological erosion/opening.

    The residual of the first opening seeds the skeleton; each round erodes
    the map and folds in the newly exposed residual:
        s <- s + relu(delta - s * delta),  delta = relu(m - open(m)).
    Erosion/dilation are 3x3 min/max pools (stride 1, replicate padding),
    so vessels touching the border are not artificially eaten.
    """
    if iterations < 1:
        raise ValueError("soft_skeletonize: iterations must be >= 1")
    if m.data.ndim not in (2, 3, 4):
        raise ValueError(f"soft_skeletonize: unsupported rank {m.data.ndim}")
    squeeze_to = m.data.ndim
    work = m
    if m.data.ndim != 4:
        # lift to [1,1,H,W] (or [1,C,H,W]) for the pooling ops
        data = m.data.reshape((1,) * (4 - m.data.ndim) + m.data.shape)
        work = Tensor(data, _parents=(m,))

        def lift_bwd():
            m._accumulate(work.grad.reshape(m.data.shape))

        work._backward = lift_bwd

    skel = relu(sub(work, _open(work)))
    cur = work
    for _ in range(iterations):
        cur = _erode(cur)
        delta = relu(sub(cur, _open(cur)))
        skel = add(skel, relu(sub(delta, mul(skel, delta))))

    if squeeze_to == 4:
        return skel
    out = Tensor(skel.data.reshape(m.data.shape), _parents=(skel,))

    def squeeze_bwd():
        skel._accumulate(out.grad.reshape(skel.data.shape))

    out._backward = squeeze_bwd
    return out


def soft_skeleton_np(m: np.ndarray, iterations: int = 5) -> np.ndarray:
    """Plain-numpy twin of `soft_skeletonize` for constant (target) masks."""
    def erode(a):
        return ndimage.minimum_filter(a, size=3, mode="nearest", axes=(-2, -1))

    def dilate(a):
        return ndimage.maximum_filter(a, size=3, mode="nearest", axes=(-2, -1))

    cur = np.asarray(m, dtype=np.float64)
    skel = np.maximum(cur - dilate(erode(cur)), 0.0)
    for _ in range(iterations):
        cur = erode(cur)
        delta = np.maximum(cur - dilate(erode(cur)), 0.0)
        skel = skel + np.maximum(delta - skel * delta, 0.0)
    return skel


def cldice_loss(p: Tensor, g, iterations: int = 5, eps: float = 1e-6,
                product_denominator: bool = False) -> Tensor:
    """Centerline Dice on soft skeletons.

    T_prec = (sum(skel(p) * g) + eps) / (sum(skel(p)) + eps)
    T_sens = (sum(skel(g) * p) + eps) / (sum(skel(g)) + eps)
    loss   = 1 - 2 * T_prec * T_sens / (T_prec + T_sens)

    ``product_denominator=True`` swaps in ``T_prec * T_sens + eps`` as the
    denominator.  That variant drives the loss to about -1 for any good
    prediction and exists only so tests can demonstrate why the harmonic
    mean is the usable form.
    """
    g = _as_const(g, p)
    _check_match(p, g, "cldice_loss")
    skel_p = soft_skeletonize(p, iterations)
    skel_g = soft_skeleton_np(g.data, iterations).astype(p.data.dtype)
    skel_g_t = Tensor(skel_g)

    if skel_g.ndim == 4:
        skel_g_sum = skel_g.sum(axis=(1, 2, 3))
    else:
        skel_g_sum = np.asarray(skel_g.sum(), dtype=skel_g.dtype)
    t_prec = div(_per_sample_sum(mul(skel_p, g)) + eps,
                 _per_sample_sum(skel_p) + eps)
    t_sens = div(_per_sample_sum(mul(skel_g_t, p)) + eps,
                 Tensor(skel_g_sum) + eps)
    num = mul(t_prec, t_sens) * 2.0
    if product_denominator:
        denom = mul(t_prec, t_sens) + eps
    else:
        denom = add(t_prec, t_sens)
    return tmean(1.0 - div(num, denom))


@dataclass
class CompositeTerms:
    total: Tensor
    dice: Tensor
    bce: Tensor
    cldice: Tensor


def composite_terms(p: Tensor, g, weight_map, cfg: LossConfig,
                    soft_target: bool = False) -> CompositeTerms:
    """The weighted three-term objective, with each term exposed.

    When ``soft_target`` is set (mixup batches), the centerline term is
    dropped and the remaining weights are renormalized to sum to one
    (skeletons of blended masks are not meaningful).
    """
    wd, wb, wc = cfg.dice_weight, cfg.bce_weight, cfg.cldice_weight
    if soft_target and wc > 0.0:
        rest = wd + wb
        wd, wb, wc = wd / rest, wb / rest, 0.0
    d = dice_loss(p, g, cfg.dice_eps)
    b = weighted_bce(p, g, weight_map, cfg.label_smoothing)
    if wc > 0.0:
        c = cldice_loss(p, g, cfg.skeleton_iterations, cfg.cldice_eps,
                        cfg.cldice_product_denominator)
        total = d * wd + b * wb + c * wc
    else:
        c = Tensor(np.zeros((), dtype=p.data.dtype))
        total = d * wd + b * wb
    return CompositeTerms(total=total, dice=d, bce=b, cldice=c)


def composite_loss(p: Tensor, g, weight_map, cfg: LossConfig,
                   soft_target: bool = False) -> Tensor:
    return composite_terms(p, g, weight_map, cfg, soft_target).total


def downsample_mask(g: np.ndarray, out_h: int, out_w: int,
                    soft: bool = False) -> np.ndarray:
    """Bilinear resize of a target mask; hard targets re-threshold at 0.5."""
    resized = bilinear_resize_array(np.asarray(g, dtype=np.float64), out_h, out_w)
    if soft:
        return resized
    return (resized >= 0.5).astype(np.float64)


def deep_supervised_total(outputs, g_full: np.ndarray, w_full: np.ndarray,
                          cfg: LossConfig, soft_target: bool = False) -> CompositeTerms:
    """Supervision of the fused map plus the three coarser branch heads.

    The finest branch is covered only through the fused term.  Targets are
    bilinearly downsampled to each head's resolution (re-thresholded at 0.5
    unless the batch carries soft mixup targets); the weight map is
    downsampled continuously.
    """
    if len(outputs.branch_logits) != 4:
        raise ValueError("deep_supervised_total: expected four branch logit maps")
    weights = cfg.deep_supervision
    fused_terms = composite_terms(sigmoid(outputs.fused), g_full, w_full, cfg, soft_target)
    total = fused_terms.total * weights[0]
    dice_t = fused_terms.dice * weights[0]
    bce_t = fused_terms.bce * weights[0]
    cl_t = fused_terms.cldice * weights[0]
    for j, logit in enumerate(outputs.branch_logits[1:], start=1):
        h, w = logit.data.shape[-2], logit.data.shape[-1]
        g_k = downsample_mask(g_full, h, w, soft=soft_target)
        w_k = bilinear_resize_array(np.asarray(w_full, dtype=np.float64), h, w)
        terms = composite_terms(sigmoid(logit), g_k, w_k, cfg, soft_target)
        total = add(total, terms.total * weights[j])
        dice_t = add(dice_t, terms.dice * weights[j])
        bce_t = add(bce_t, terms.bce * weights[j])
        cl_t = add(cl_t, terms.cldice * weights[j])
    return CompositeTerms(total=total, dice=dice_t, bce=bce_t, cldice=cl_t)
