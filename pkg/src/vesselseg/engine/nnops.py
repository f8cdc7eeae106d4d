"""Structured differentiable ops: convolution, pooling, bilinear resize,
batch normalization, channel dropout, concatenation, and the gating /
fusion multiplies the model needs.

Conventions shared by all ops here:
  * tensors are [N, C, H, W] unless stated otherwise;
  * shape violations raise ValueError with the offending shapes;
  * output dtype equals input dtype (float32 training / float64 checking).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make

# Column-buffer cap for the chunked im2col convolution.  Keeps peak memory
# bounded for full-resolution forwards without touching small-map speed.
_COL_BUDGET_BYTES = 64 * 1024 * 1024

# Cache of bilinear interpolation index/weight tables keyed by
# (in_size, out_size): recomputing them per call would dominate small ops.
_LERP_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _conv_out_size(size: int, k: int, padding: int, stride: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv2d: input size {size} with kernel {k}, padding {padding}, "
            f"stride {stride} does not produce an integral output size"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0,
           stride: int = 1) -> Tensor:
    """2-D cross-correlation of [N,C,H,W] with [O,C,kh,kw] plus bias [O].

    Forward and backward run as chunked im2col + GEMM; output row blocks are
    sized so the column buffer stays under a fixed byte budget.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D, got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-D, got shape {weight.data.shape}")
    n, c, h, w = x.data.shape
    o, ck, kh, kw = weight.data.shape
    if ck != c:
        raise ValueError(f"conv2d: kernel expects {ck} input channels, input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if bias.data.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({o},)")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d: padding must be >= 0 and stride >= 1")
    hout = _conv_out_size(h, kh, padding, stride)
    wout = _conv_out_size(w, kw, padding, stride)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    k = c * kh * kw
    itemsize = x.data.itemsize
    rows_per_chunk = max(1, _COL_BUDGET_BYTES // max(1, n * wout * k * itemsize))

    w_mat = weight.data.reshape(o, k)
    out_data = np.empty((n, o, hout, wout), dtype=x.data.dtype)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [N,C,hout,wout,kh,kw] view

    for r0 in range(0, hout, rows_per_chunk):
        r1 = min(hout, r0 + rows_per_chunk)
        # [N, rows, wout, C*kh*kw] contiguous copy of the receptive fields
        cols = np.ascontiguousarray(
            windows[:, :, r0:r1].transpose(0, 2, 3, 1, 4, 5)
        ).reshape(n, (r1 - r0) * wout, k)
        prod = cols @ w_mat.T  # [N, rows*wout, O]
        out_data[:, :, r0:r1] = prod.transpose(0, 2, 1).reshape(n, o, r1 - r0, wout)
    out_data += bias.data.reshape(1, o, 1, 1)

    out = _make(out_data, (x, weight, bias), None)

    def bwd():
        g = out.grad  # [N,O,hout,wout]
        bias._accumulate(g.sum(axis=(0, 2, 3)))
        dw = np.zeros((o, k), dtype=x.data.dtype)
        dxp = np.zeros_like(xp)
        for r0 in range(0, hout, rows_per_chunk):
            r1 = min(hout, r0 + rows_per_chunk)
            cols = np.ascontiguousarray(
                windows[:, :, r0:r1].transpose(0, 2, 3, 1, 4, 5)
            ).reshape(n, (r1 - r0) * wout, k)
            g_chunk = g[:, :, r0:r1].reshape(n, o, -1)  # [N,O,rows*wout]
            for i in range(n):
                dw += g_chunk[i] @ cols[i]
            dcols = np.einsum("nop,ok->npk", g_chunk, w_mat, optimize=True)
            dcols = dcols.reshape(n, r1 - r0, wout, c, kh, kw)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, r0 * stride + u:(r1 - 1) * stride + u + 1:stride,
                        v:v + stride * wout:stride] += dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        if padding:
            x._accumulate(dxp[:, :, padding:padding + h, padding:padding + w])
        else:
            x._accumulate(dxp)
        weight._accumulate(dw.reshape(o, c, kh, kw))

    out._backward = bwd
    return out


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                     padding: int = 0, stride: int = 1) -> np.ndarray:
    """Nested-loop direct convolution; the independent oracle for conv2d.

    Accumulates each output element with a per-pixel triple loop over
    (channel, kernel row, kernel col) in row-major order.
    """
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, hout, wout), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for i in range(hout):
                for j in range(wout):
                    acc = x.dtype.type(0)
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, i * stride + u, j * stride + v] * weight[oi, ci, u, v]
                    out[ni, oi, i, j] = acc + bias[oi]
    return out


def pool2d(x: Tensor, mode: str, k: int, stride: int | None = None,
           replicate_pad: bool = False) -> Tensor:
    """Max / min pooling over k x k windows.

    ``replicate_pad=True`` pads (k-1)//2 on each side with edge values, which
    is the stride-1 morphological erosion/dilation configuration.  Gradients
    route to the window's arg-extremum; ties resolve to the first element in
    row-major window order, and gradients landing on replicated border cells
    flow to the edge pixel they mirror.
    """
    if k <= 0:
        raise ValueError(f"pool2d: kernel size must be positive, got {k}")
    if mode not in ("max", "min"):
        raise ValueError(f"pool2d: mode must be 'max' or 'min', got {mode!r}")
    if x.data.ndim != 4:
        raise ValueError(f"pool2d: input must be 4-D, got shape {x.data.shape}")
    stride = k if stride is None else stride
    n, c, h, w = x.data.shape

    if replicate_pad:
        if k % 2 == 0:
            raise ValueError("pool2d: replicate padding requires an odd kernel")
        pad = (k - 1) // 2
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    else:
        pad = 0
        if k == stride and (h % k or w % k):
            raise ValueError(f"pool2d: size {h}x{w} not divisible by window {k}")
        xp = x.data

    hp, wp = xp.shape[2], xp.shape[3]
    hout = (hp - k) // stride + 1
    wout = (wp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(n, c, hout, wout, k * k)
    if mode == "max":
        idx = win.argmax(axis=-1)
    else:
        idx = win.argmin(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = _make(np.ascontiguousarray(out_data), (x,), None)

    def bwd():
        g = out.grad
        # Window-local flat index -> source pixel in the unpadded input.
        base_i = (np.arange(hout) * stride)[None, None, :, None]
        base_j = (np.arange(wout) * stride)[None, None, None, :]
        rows = np.clip(base_i + idx // k - pad, 0, h - 1)
        cols = np.clip(base_j + idx % k - pad, 0, w - 1)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        dx = np.zeros_like(x.data)
        np.add.at(dx, (np.broadcast_to(ni, idx.shape), np.broadcast_to(ci, idx.shape), rows, cols), g)
        x._accumulate(dx)

    out._backward = bwd
    return out


def _lerp_table(in_size: int, out_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source indices (lo, hi) and fractions for 1-D resize."""
    key = (in_size, out_size)
    cached = _LERP_CACHE.get(key)
    if cached is not None:
        return cached
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    _LERP_CACHE[key] = (lo, hi, frac)
    return lo, hi, frac


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers and edge clamping.

    Implemented as two 1-D lerps ``a + f*(b - a)``, which maps constant
    inputs to the identical constant bit-for-bit.  Works for down-scaling
    too (same sampling rule).
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("upsample_bilinear: target size must be >= 1")
    if x.data.ndim != 4:
        raise ValueError(f"upsample_bilinear: input must be 4-D, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    i0, i1, fh = _lerp_table(h, out_h)
    j0, j1, fw = _lerp_table(w, out_w)
    fh_c = fh.astype(x.data.dtype)[:, None]
    fw_c = fw.astype(x.data.dtype)

    a = x.data[:, :, :, j0]
    t = a + fw_c * (x.data[:, :, :, j1] - a)
    a2 = t[:, :, i0, :]
    out_data = a2 + fh_c * (t[:, :, i1, :] - a2)
    out = _make(out_data, (x,), None)

    def bwd():
        g = out.grad
        dt = np.zeros((n, c, h, out_w), dtype=x.data.dtype)
        gh = np.swapaxes(g, 0, 2)  # rows first for 1-D scatter
        dth = np.swapaxes(dt, 0, 2)
        np.add.at(dth, i0, (1.0 - fh)[:, None, None, None].astype(x.data.dtype) * gh)
        np.add.at(dth, i1, fh[:, None, None, None].astype(x.data.dtype) * gh)
        dx = np.zeros_like(x.data)
        gw = np.swapaxes(dt, 0, 3)
        dxw = np.swapaxes(dx, 0, 3)
        np.add.at(dxw, j0, (1.0 - fw)[:, None, None, None].astype(x.data.dtype) * gw)
        np.add.at(dxw, j1, fw[:, None, None, None].astype(x.data.dtype) * gw)
        x._accumulate(dx)

    out._backward = bwd
    return out


def bilinear_resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy bilinear resize over the trailing two axes.

    Same half-pixel-center / edge-clamp convention as `upsample_bilinear`,
    for data-pipeline use outside the tape.
    """
    h, w = arr.shape[-2], arr.shape[-1]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    i0, i1, fh = _lerp_table(h, out_h)
    j0, j1, fw = _lerp_table(w, out_w)
    a = arr[..., :, j0]
    t = a + fw * (arr[..., :, j1] - a)
    a2 = t[..., i0, :]
    return a2 + fh[:, None] * (t[..., i1, :] - a2)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place (unbiased variance, standard
    exponential-average convention).  Eval mode applies the affine map from
    the running buffers.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d: input must be 4-D, got shape {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"batchnorm2d: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match {c} channels"
        )
    gshape = (1, c, 1, 1)
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        # Stats accumulate in float64 regardless of training dtype.
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64).astype(x.data.dtype)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64).astype(x.data.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * var * (m / (m - 1) if m > 1 else 1.0)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        inv_std = (1.0 / np.sqrt(var.astype(np.float64) + eps)).astype(x.data.dtype)
        xhat = (x.data - mean.reshape(gshape)) * inv_std.reshape(gshape)
        out_data = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)
        out = _make(out_data.astype(x.data.dtype, copy=False), (x, gamma, beta), None)

        def bwd():
            g = out.grad
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            beta._accumulate(g.sum(axis=(0, 2, 3)))
            # Standard batchnorm input gradient through the batch statistics.
            dxhat = g * gamma.data.reshape(gshape)
            sum_dxhat = dxhat.sum(axis=(0, 2, 3)).reshape(gshape)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(gshape)
            dx = (inv_std.reshape(gshape) / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
            x._accumulate(dx.astype(x.data.dtype, copy=False))

        out._backward = bwd
        return out

    inv_std = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma.data * inv_std).reshape(gshape)
    shift = (beta.data - gamma.data * running_mean * inv_std).reshape(gshape)
    out = _make((x.data * scale + shift).astype(x.data.dtype, copy=False), (x, gamma, beta), None)

    def bwd_eval():
        g = out.grad
        x._accumulate(g * scale)
        gamma._accumulate((g * ((x.data - running_mean.reshape(gshape)) * inv_std.reshape(gshape))).sum(axis=(0, 2, 3)))
        beta._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = bwd_eval
    return out


def dropout_channels(x: Tensor, rate: float, rng: np.random.Generator,
                     training: bool) -> Tensor:
    """Spatial (whole-channel) dropout with inverted scaling; identity in eval."""
    if not training or rate <= 0.0:
        return x
    n, c = x.data.shape[:2]
    keep = (rng.random((n, c, 1, 1)) >= rate).astype(x.data.dtype)
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep * scale
    out = _make(x.data * mask, (x,), None)

    def bwd():
        x._accumulate(out.grad * mask)

    out._backward = bwd
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out = _make(np.concatenate([a.data, b.data], axis=1), (a, b), None)

    def bwd():
        a._accumulate(out.grad[:, :ca])
        b._accumulate(out.grad[:, ca:])

    out._backward = bwd
    return out


def scale_spatial(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply [N,C,H,W] by a single-channel spatial gate [N,1,H,W]."""
    if alpha.data.shape[1] != 1 or alpha.data.shape[0] != x.data.shape[0] \
            or alpha.data.shape[2:] != x.data.shape[2:]:
        raise ValueError(f"scale_spatial: gate shape {alpha.data.shape} does not match {x.data.shape}")
    out = _make(x.data * alpha.data, (x, alpha), None)

    def bwd():
        x._accumulate(out.grad * alpha.data)
        alpha._accumulate((out.grad * x.data).sum(axis=1, keepdims=True))

    out._backward = bwd
    return out


def scale_by_index(x: Tensor, weights: Tensor, index: int) -> Tensor:
    """Multiply a map by element ``index`` of a 1-D weight vector."""
    if weights.data.ndim != 1:
        raise ValueError("scale_by_index: weights must be 1-D")
    wk = weights.data[index]
    out = _make(x.data * wk, (x, weights), None)

    def bwd():
        x._accumulate(out.grad * wk)
        dw = np.zeros_like(weights.data)
        dw[index] = (out.grad * x.data).sum()
        weights._accumulate(dw)

    out._backward = bwd
    return out
