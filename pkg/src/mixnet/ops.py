"""Differentiable operations on graph nodes.

All image-like values use channels-last layout ``(N, H, W, C)`` and
convolution kernels use ``(kh, kw, c_in, c_out)``.  Convolutions are
cross-correlations (no kernel flip), stride 1, with zero padding chosen
so the spatial size is preserved for any kernel size and dilation
(total pad ``(k - 1) * d``, split floor-left / ceil-right).

Pooling ops use 2x2 windows with stride 2 and ceil-mode output sizes:
a ragged bottom/right edge still produces an output cell, fed by the
in-bounds values only.

Everything is dtype-generic: float64 inputs stay float64 end to end,
which is what the finite-difference checker relies on.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .autodiff import Node
from .errors import DataError, ParameterError, ShapeError
from .tensor import Tensor


def _as_pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ParameterError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def same_padding(k: int, d: int) -> tuple[int, int]:
    """Left/right zero padding that keeps the spatial size under a
    stride-1 dilated window: total (k - 1) * d, extra pixel on the right."""
    total = (k - 1) * d
    left = total // 2
    return left, total - left


# ---------------------------------------------------------------------------
# elementwise / structural ops


def relu(x: Node, name: str = "relu") -> Node:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0), dtype=x.dtype)

    def bwd(g):
        return (np.where(mask, g, 0),)

    return Node(out, (x,), bwd, name=name)


def add(a: Node, b: Node, name: str = "add") -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"add needs matching shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return g, g

    return Node(out, (a, b), bwd, name=name)


def mul(a: Node, b: Node, name: str = "mul") -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs matching shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return Node(out, (a, b), bwd, name=name)


def scale(x: Node, s: float, name: str = "scale") -> Node:
    s = float(s)
    out = Tensor(x.data * x.dtype.type(s))

    def bwd(g):
        return (g * s,)

    return Node(out, (x,), bwd, name=name)


def reduce_sum(x: Node, name: str = "sum") -> Node:
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(()))
    shp, dt = x.shape, x.dtype

    def bwd(g):
        return (np.broadcast_to(g.reshape(()), shp).astype(dt, copy=True),)

    return Node(out, (x,), bwd, name=name)


def reduce_mean(x: Node, name: str = "mean") -> Node:
    n = x.value.size
    out = Tensor(np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype).reshape(()))
    shp, dt = x.shape, x.dtype

    def bwd(g):
        return (np.broadcast_to(g.reshape(()) / n, shp).astype(dt, copy=True),)

    return Node(out, (x,), bwd, name=name)


def concat_channels(parts: Sequence[Node], name: str = "concat") -> Node:
    if not parts:
        raise ParameterError("concat_channels needs at least one input")
    base = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != base:
            raise ShapeError(f"concat_channels spatial mismatch: {p.shape} vs {base + ('C',)}")
    widths = [p.shape[-1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=-1))

    return Node(out, tuple(parts), bwd, name=name)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Node, w: Node, b: Optional[Node] = None, dilation=1,
           name: str = "conv") -> Node:
    """Stride-1 dilated cross-correlation with size-preserving zero padding.

    x: (N, H, W, Cin), w: (kh, kw, Cin, Cout), b: (Cout,) or None.
    Runs as a loop over kernel taps: each tap is a shifted view of the
    padded input hit with a (Cin, Cout) matmul.  This keeps peak memory at
    one padded copy of the input instead of a full patch matrix.
    """
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d input must be (N,H,W,C), got {x.shape}")
    if w.value.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (kh,kw,cin,cout), got {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"kernel expects {wcin} input channels, tensor has {cin}")
    dh, dw = _as_pair(dilation)
    if dh < 1 or dw < 1:
        raise ParameterError(f"dilation must be >= 1, got {(dh, dw)}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias must be ({cout},), got {b.shape}")

    pt, pb = same_padding(kh, dh)
    pl, pr = same_padding(kw, dw)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    wd_ = w.data

    out = np.zeros((n, h, wd, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i * dh:i * dh + h, j * dw:j * dw + wd, :]
            out += patch @ wd_[i, j]
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gw = np.zeros_like(wd_)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i * dh:i * dh + h, j * dw:j * dw + wd, :]
                gw[i, j] = np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
                gxp[:, i * dh:i * dh + h, j * dw:j * dw + wd, :] += g @ wd_[i, j].T
        gx = gxp[:, pt:pt + h, pl:pl + wd, :]
        if b is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 1, 2))

    return Node(Tensor(out), parents, bwd, name=name)


# ---------------------------------------------------------------------------
# pooling


def _window_view(xp: np.ndarray) -> np.ndarray:
    """(N, Hp, Wp, C) with even Hp, Wp -> (N, Hp/2, Wp/2, C, 4) window copy."""
    n, hp, wp, c = xp.shape
    v = xp.reshape(n, hp // 2, 2, wp // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    return v.reshape(n, hp // 2, wp // 2, c, 4)


def _unwindow(win: np.ndarray, hp: int, wp: int) -> np.ndarray:
    n, ho, wo, c, _ = win.shape
    v = win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return v.reshape(n, hp, wp, c)


def maxpool2x2(x: Node, name: str = "maxpool") -> Node:
    """2x2 stride-2 max pool, ceil mode.  Ties route the gradient to the
    first maximum in window scan order, so backward is deterministic."""
    if x.value.ndim != 4:
        raise ShapeError(f"maxpool2x2 input must be (N,H,W,C), got {x.shape}")
    n, h, w, c = x.shape
    hp, wp = -(-h // 2) * 2, -(-w // 2) * 2
    fill = np.finfo(x.dtype).min if np.issubdtype(x.dtype, np.floating) else np.iinfo(x.dtype).min
    xp = np.pad(x.data, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)),
                constant_values=fill)
    win = _window_view(xp)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        scatter = np.zeros_like(win)
        np.put_along_axis(scatter, idx[..., None], g[..., None], axis=-1)
        return (np.ascontiguousarray(_unwindow(scatter, hp, wp)[:, :h, :w, :]),)

    return Node(Tensor(out), (x,), bwd, name=name)


def avgpool2x2(x: Node, name: str = "avgpool") -> Node:
    """2x2 stride-2 average pool, ceil mode; ragged edge cells average
    the in-bounds values only."""
    if x.value.ndim != 4:
        raise ShapeError(f"avgpool2x2 input must be (N,H,W,C), got {x.shape}")
    n, h, w, c = x.shape
    hp, wp = -(-h // 2) * 2, -(-w // 2) * 2
    xp = np.pad(x.data, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    ones = np.pad(np.ones((1, h, w, 1), dtype=x.dtype),
                  ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    counts = _window_view(ones).sum(axis=-1)
    out = _window_view(xp).sum(axis=-1) / counts

    def bwd(g):
        per_cell = (g / counts)[..., None]
        scatter = np.broadcast_to(per_cell, g.shape + (4,)).astype(g.dtype, copy=True)
        return (np.ascontiguousarray(_unwindow(scatter, hp, wp)[:, :h, :w, :]),)

    return Node(Tensor(out), (x,), bwd, name=name)


def avgpool_region(x: Node, bins: int, name: str = "regionpool") -> Node:
    """Adaptive average pooling onto a bins x bins grid.

    Region r along an axis of length L covers [r*L//bins, (r+1)*L//bins),
    so region sizes differ by at most one pixel.  Region means are
    accumulated in float64 and cast back to the input dtype.
    """
    if x.value.ndim != 4:
        raise ShapeError(f"avgpool_region input must be (N,H,W,C), got {x.shape}")
    bins = int(bins)
    n, h, w, c = x.shape
    if bins < 1:
        raise ParameterError(f"bins must be >= 1, got {bins}")
    if h < bins or w < bins:
        raise ShapeError(f"avgpool_region with {bins} bins needs spatial size "
                         f">= {bins}, got {h}x{w}")
    he = [i * h // bins for i in range(bins + 1)]
    we = [i * w // bins for i in range(bins + 1)]
    out = np.empty((n, bins, bins, c), dtype=x.dtype)
    for r in range(bins):
        for s in range(bins):
            region = x.data[:, he[r]:he[r + 1], we[s]:we[s + 1], :]
            out[:, r, s, :] = region.mean(axis=(1, 2), dtype=np.float64)
    shp, dt = x.shape, x.dtype

    def bwd(g):
        gx = np.zeros(shp, dtype=dt)
        for r in range(bins):
            for s in range(bins):
                area = (he[r + 1] - he[r]) * (we[s + 1] - we[s])
                gx[:, he[r]:he[r + 1], we[s]:we[s + 1], :] += \
                    g[:, r:r + 1, s:s + 1, :] / area
        return (gx,)

    return Node(Tensor(out), (x,), bwd, name=name)


# ---------------------------------------------------------------------------
# bilinear resize


_AXIS_CACHE: dict = {}


def _resize_axis(in_size: int, out_size: int, dtype) -> tuple:
    """Gather indices and weights for one axis, half-pixel-center mapping
    (align_corners false): src = (i + 0.5) * in/out - 0.5, clamped."""
    key = (in_size, out_size, np.dtype(dtype).str)
    hit = _AXIS_CACHE.get(key)
    if hit is not None:
        return hit
    i = np.arange(out_size, dtype=np.float64)
    src = (i + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    wgt = (src - i0).astype(dtype)
    # dense (out, in) matrix used by the backward pass
    mat = np.zeros((out_size, in_size), dtype=dtype)
    rows = np.arange(out_size)
    np.add.at(mat, (rows, i0), 1 - wgt.astype(np.float64))
    np.add.at(mat, (rows, i1), wgt.astype(np.float64))
    entry = (i0, i1, wgt, mat)
    _AXIS_CACHE[key] = entry
    return entry


def bilinear_resize(x: Node, out_h: int, out_w: int, name: str = "resize") -> Node:
    """Bilinear resampling to (out_h, out_w) with half-pixel centers.

    Forward interpolates as x0 + w * (x1 - x0), which reproduces constant
    inputs exactly.  Backward applies the transposed interpolation
    matrices.
    """
    if x.value.ndim != 4:
        raise ShapeError(f"bilinear_resize input must be (N,H,W,C), got {x.shape}")
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target size must be positive, got {(out_h, out_w)}")
    n, h, w, c = x.shape
    h0, h1, hw, hmat = _resize_axis(h, out_h, x.dtype)
    w0, w1, ww, wmat = _resize_axis(w, out_w, x.dtype)

    xa = np.take(x.data, h0, axis=1)
    xb = np.take(x.data, h1, axis=1)
    xh = xa + hw[None, :, None, None] * (xb - xa)
    ya = np.take(xh, w0, axis=2)
    yb = np.take(xh, w1, axis=2)
    out = ya + ww[None, None, :, None] * (yb - ya)

    def bwd(g):
        # (N, oh, ow, C) -> undo the W interpolation -> (N, oh, W, C)
        gh = np.moveaxis(np.tensordot(g, wmat, axes=([2], [0])), 3, 2)
        gx = np.moveaxis(np.tensordot(gh, hmat, axes=([1], [0])), 3, 1)
        return (np.ascontiguousarray(gx),)

    return Node(Tensor(out), (x,), bwd, name=name)


# ---------------------------------------------------------------------------
# classification loss


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax over ``axis`` (plain ndarray helper)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Node, labels: np.ndarray,
                          reduction: str = "sum",
                          name: str = "xent") -> Node:
    """Cross entropy between per-pixel logits (..., K) and integer labels.

    ``reduction="sum"`` adds the per-pixel losses; ``"mean"`` divides by
    the pixel count, which keeps gradient magnitudes independent of patch
    size.  Labels must lie in [0, K).
    """
    if reduction not in ("sum", "mean"):
        raise ParameterError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match "
                         f"logit positions {logits.shape[:-1]}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range "
                        f"[{labels.min()}, {labels.max()}]")

    flat = logits.data.reshape(-1, k)
    lab = labels.reshape(-1)
    m = flat.max(axis=1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=1, dtype=np.float64)) + m[:, 0]
    picked = flat[np.arange(flat.shape[0]), lab]
    per_pixel = lse - picked
    count = flat.shape[0]
    total = per_pixel.sum(dtype=np.float64)
    if reduction == "mean":
        total = total / count
    if T.CHECK_FINITE and not np.isfinite(total):
        raise DataError("cross entropy produced a non-finite value")
    out = Tensor(np.asarray(total, dtype=logits.dtype).reshape(()))

    probs = softmax(flat, axis=1)
    shp, dt = logits.shape, logits.dtype

    def bwd(g):
        gflat = probs.astype(dt, copy=True)
        gflat[np.arange(count), lab] -= 1
        gflat *= g.reshape(())
        if reduction == "mean":
            gflat /= count
        return (gflat.reshape(shp),)

    return Node(out, (logits,), bwd, name=name)
