"""Spatial operators: convolution, pooling, channel softmax, Sobel.

All operators accept a single image ``[C, H, W]`` or a batch
``[N, C, H, W]`` and return the same rank they were given.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, add, mul, pad2d, sqrt, tsum

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()
SOBEL_DELTA = 1e-12


def _batched(t: Tensor, name: str) -> tuple[np.ndarray, bool]:
    if t.ndim == 3:
        return t.data[None], True
    if t.ndim == 4:
        return t.data, False
    raise DimensionError(f"{name}: expected [C,H,W] or [N,C,H,W], got {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation."""
    xd, squeeze = _batched(x, "conv2d")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be [C_out,C_in,kh,kw], got {weight.shape}")
    n, c, h, w = xd.shape
    o, c_w, kh, kw = weight.shape
    if c_w != c:
        raise DimensionError(f"conv2d: input channels (axis {x.ndim - 3}) = {c} but weight C_in (axis 1) = {c_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise DimensionError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise DimensionError("conv2d: padding must be non-negative")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match C_out={o}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: output would be empty for input {h}x{w} and kernel {kh}x{kw}")

    wmat = weight.data.reshape(o, c * kh * kw)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.reshape(n, c, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)
    if squeeze:
        out = out[0]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(n, o, ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm)
            if pointwise:
                gx = gcols.reshape(n, c, h, w)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w]
            if squeeze:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._result(out, parents, backward, "conv2d")


def channel_mix(x: Tensor, matrix: np.ndarray, offset: np.ndarray | None = None) -> Tensor:
    """Per-pixel linear map over the channel axis: ``out[k] = sum_c M[k,c] x[c] + offset[k]``."""
    matrix = np.asarray(matrix, dtype=x.dtype)
    weight = Tensor(matrix.reshape(matrix.shape + (1, 1)))
    bias = None if offset is None else Tensor(np.asarray(offset, dtype=x.dtype))
    return conv2d(x, weight, bias)


def separable_filter_valid(x: Tensor, taps) -> Tensor:
    """Valid correlation with the separable kernel ``outer(taps, taps)``.

    Same result as ``conv2d`` with that 2-D kernel applied per channel, at a
    fraction of the cost for wide windows.
    """
    xd = x.data
    if x.ndim < 2:
        raise DimensionError(f"separable_filter_valid: need at least 2 axes, got {x.shape}")
    taps = np.asarray(taps, dtype=xd.dtype).ravel()
    k = taps.size
    if k % 2 == 0:
        raise DimensionError(f"separable_filter_valid: tap count must be odd, got {k}")
    h, w = xd.shape[-2:]
    ho, wo = h - k + 1, w - k + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"separable_filter_valid: {k} taps do not fit a {h}x{w} image")
    tmp = taps[0] * xd[..., 0:ho, :]
    for i in range(1, k):
        tmp += taps[i] * xd[..., i:i + ho, :]
    out = taps[0] * tmp[..., 0:wo]
    for j in range(1, k):
        out += taps[j] * tmp[..., j:j + wo]

    def backward(g):
        gtmp = np.zeros(xd.shape[:-2] + (ho, w), dtype=xd.dtype)
        for j in range(k):
            gtmp[..., j:j + wo] += taps[j] * g
        gx = np.zeros_like(xd)
        for i in range(k):
            gx[..., i:i + ho, :] += taps[i] * gtmp
        return (gx,)

    return Tensor._result(out, (x,), backward, "separable_filter")


def softmax_channel(logits: Tensor) -> Tensor:
    """Softmax across the channel axis, stabilised by max subtraction."""
    if logits.ndim not in (3, 4):
        raise DimensionError(f"softmax_channel: expected [n,H,W] or [N,n,H,W], got {logits.shape}")
    ax = logits.ndim - 3
    if logits.shape[ax] < 2:
        raise DimensionError("softmax_channel: need at least 2 channels")
    z = logits.data - logits.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=ax, keepdims=True)),)

    return Tensor._result(p, (logits,), backward, "softmax")


def avgpool2x(x: Tensor) -> Tensor:
    """Exact 2x2 mean pooling with stride 2."""
    xd, squeeze = _batched(x, "avgpool2x")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2x: spatial extents must be even, got {h}x{w}")
    out = xd.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    if squeeze:
        out = out[0]

    def backward(g):
        gq = np.repeat(np.repeat(g * 0.25, 2, axis=-2), 2, axis=-1)
        return (gq.astype(xd.dtype, copy=False),)

    return Tensor._result(out, (x,), backward, "avgpool2x")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """2x nearest-neighbour replication of the spatial axes."""
    _batched(x, "upsample_nearest2x")
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    h, w = x.shape[-2:]

    def backward(g):
        return (g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return Tensor._result(out, (x,), backward, "upsample_nearest2x")


def sobel(x: Tensor) -> Tensor:
    """Gradient magnitude ``sqrt(Gx^2 + Gy^2 + delta)`` of a one-channel image.

    Borders use replicate padding so flat regions touching the edge stay flat.
    """
    if x.ndim not in (3, 4) or x.shape[-3] != 1:
        raise DimensionError(f"sobel: expects a single-channel [1,H,W] or [N,1,H,W] input, got {x.shape}")
    kernels = Tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None].astype(x.dtype))
    g = conv2d(pad2d(x, 1, mode="edge"), kernels)
    sq = tsum(mul(g, g), axis=x.ndim - 3, keepdims=True)
    return sqrt(add(sq, SOBEL_DELTA))
