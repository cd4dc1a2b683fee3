"""Differentiable primitives over NHWC arrays.

Convolution weights are laid out ``(kh, kw, c_in, c_out)``. Transposed
convolution uses the same layout (``c_in`` is the transposed conv's input).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import ShapeError, Tensor, make_node

LOG_FLOOR = 1e-12


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _check_rank4(op: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(op, f"expected rank-4 NHWC input, got shape {x.shape}")


# -- convolution kernels (plain numpy, shared by conv and transposed conv) --

def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _windows(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return v[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _conv_forward(x: np.ndarray, w: np.ndarray, s: int, ph: int, pw: int) -> np.ndarray:
    kh, kw = w.shape[:2]
    ho = _conv_out(x.shape[1], kh, s, ph)
    wo = _conv_out(x.shape[2], kw, s, pw)
    win = _windows(_pad(x, ph, pw), kh, kw, s, ho, wo)
    return np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1]))


def _conv_grad_input(gy: np.ndarray, w: np.ndarray, x_shape, s: int, ph: int, pw: int) -> np.ndarray:
    kh, kw = w.shape[:2]
    b, ho, wo, _ = gy.shape
    _, h, wd, cin = x_shape
    cols = np.tensordot(gy, w, axes=([3], [3]))  # (b, ho, wo, kh, kw, cin)
    gxp = np.zeros((b, h + 2 * ph, wd + 2 * pw, cin), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += cols[:, :, :, i, j, :]
    return gxp[:, ph : ph + h, pw : pw + wd, :]


def _conv_grad_weight(x: np.ndarray, gy: np.ndarray, w_shape, s: int, ph: int, pw: int) -> np.ndarray:
    kh, kw = w_shape[:2]
    ho, wo = gy.shape[1:3]
    win = _windows(_pad(x, ph, pw), kh, kw, s, ho, wo)
    gw = np.tensordot(win, gy, axes=([0, 1, 2], [0, 1, 2]))  # (cin, kh, kw, cout)
    return gw.transpose(1, 2, 0, 3)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    _check_rank4("conv2d", x)
    if w.data.ndim != 4:
        raise ShapeError("conv2d", f"weight must be (kh, kw, c_in, c_out), got {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeError("conv2d", f"input has {x.shape[3]} channels, weight expects {cin}")
    s = int(stride)
    ph, pw = _pair(padding)
    if s < 1:
        raise ShapeError("conv2d", f"stride must be >= 1, got {s}")
    hp, wp = x.shape[1] + 2 * ph, x.shape[2] + 2 * pw
    if kh > hp or kw > wp or s > max(hp, wp):
        raise ShapeError("conv2d", f"kernel {kh}x{kw}/stride {s} exceeds padded input {hp}x{wp}")
    xd, wd = x.data, w.data
    y = _conv_forward(xd, wd, s, ph, pw)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError("conv2d", f"bias shape {b.shape} != ({cout},)")
        y = y + b.data

    def back(g):
        gx = _conv_grad_input(g, wd, xd.shape, s, ph, pw) if x.requires_grad else None
        gw = _conv_grad_weight(xd, g, wd.shape, s, ph, pw) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    parents = (x, w) if b is None else (x, w, b)
    return make_node("conv2d", y, parents, back)


def transpose_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding=0, output_padding=0) -> Tensor:
    """Adjoint of ``conv2d``: out = (in - 1) * stride - 2 * padding + k + output_padding."""
    _check_rank4("transpose_conv2d", x)
    if w.data.ndim != 4:
        raise ShapeError("transpose_conv2d", f"weight must be (kh, kw, c_in, c_out), got {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeError("transpose_conv2d", f"input has {x.shape[3]} channels, weight expects {cin}")
    s = int(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    if oph >= s or opw >= s:
        raise ShapeError("transpose_conv2d", "output_padding must be smaller than stride")
    bsz, h, wd_, _ = x.shape
    ho = (h - 1) * s - 2 * ph + kh + oph
    wo = (wd_ - 1) * s - 2 * pw + kw + opw
    if ho < 1 or wo < 1:
        raise ShapeError("transpose_conv2d", f"non-positive output size {ho}x{wo}")
    wc = w.data.transpose(0, 1, 3, 2)  # conv weight mapping cout -> cin
    xd = x.data
    y = _conv_grad_input(xd, wc, (bsz, ho, wo, cout), s, ph, pw)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError("transpose_conv2d", f"bias shape {b.shape} != ({cout},)")
        y = y + b.data

    def back(g):
        gx = _conv_forward(g, wc, s, ph, pw) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = _conv_grad_weight(g, xd, wc.shape, s, ph, pw).transpose(0, 1, 3, 2)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    parents = (x, w) if b is None else (x, w, b)
    return make_node("transpose_conv2d", y, parents, back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: dict | None = None,
               training: bool = True, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (batch, height, width).

    In training mode ``running['mean']``/``running['var']`` are updated in place
    as ``momentum * running + (1 - momentum) * batch``.
    """
    _check_rank4("batch_norm", x)
    c = x.shape[3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", f"affine params must have shape ({c},)")
    xd = x.data
    if training:
        n = xd.shape[0] * xd.shape[1] * xd.shape[2]
        mean = xd.mean(axis=(0, 1, 2))
        xc = xd - mean
        var = (xc * xc).mean(axis=(0, 1, 2))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if running is not None:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running["mean"][...] = momentum * running["mean"] + (1 - momentum) * mean
            running["var"][...] = momentum * running["var"] + (1 - momentum) * unbiased
    else:
        if running is None:
            raise ValueError("batch_norm: inference mode needs running statistics")
        inv = 1.0 / np.sqrt(running["var"] + eps)
        xhat = (xd - running["mean"]) * inv
    gd = gamma.data
    y = xhat * gd + beta.data

    def back(g):
        gg = (g * xhat).sum(axis=(0, 1, 2))
        gb = g.sum(axis=(0, 1, 2))
        gxh = g * gd
        if training:
            m = gxh.mean(axis=(0, 1, 2))
            mx = (gxh * xhat).mean(axis=(0, 1, 2))
            gx = inv * (gxh - m - xhat * mx)
        else:
            gx = gxh * inv
        return gx, gg, gb

    return make_node("batch_norm", y, (x, gamma, beta), back)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return make_node("relu", np.where(mask, xd, 0).astype(xd.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    k = np.where(xd > 0, 1.0, slope).astype(xd.dtype)
    return make_node("leaky_relu", xd * k, (x,), lambda g: (g * k,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make_node("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument clamped from below at ``floor``."""
    xd = x.data
    live = xd > floor
    safe = np.where(live, xd, floor)
    return make_node("log", np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0).astype(xd.dtype),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_node("exp", y, (x,), lambda g: (g * y,))


def scale(x: Tensor, factor: float, offset: float = 0.0) -> Tensor:
    """``factor * x + offset`` for constant scalars."""
    y = x.data * factor
    if offset:
        y = y + offset
    return make_node("scale", y, (x,), lambda g: (g * factor,))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        y = a.data + b.data
    except ValueError as exc:
        raise ShapeError("add", f"cannot broadcast {a.shape} with {b.shape}") from exc
    return make_node("add", y, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


elementwise_add = add


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        y = a.data - b.data
    except ValueError as exc:
        raise ShapeError("sub", f"cannot broadcast {a.shape} with {b.shape}") from exc
    return make_node("sub", y, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        y = a.data * b.data
    except ValueError as exc:
        raise ShapeError("mul", f"cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data
    return make_node("mul", y, (a, b),
                     lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_node("square", xd * xd, (x,), lambda g: (2 * g * xd,))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    y = np.asarray(xd.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).astype(xd.dtype, copy=True),)

    return make_node("reduce_sum", y, (x,), back)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    y = np.asarray(xd.mean(axis=axis, keepdims=keepdims))
    count = xd.size // max(y.size, 1) if axis is not None else xd.size

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, xd.shape).astype(xd.dtype, copy=True),)

    return make_node("reduce_mean", y, (x,), back)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    for t in xs:
        _check_rank4("concat_channels", t)
    lead = xs[0].shape[:3]
    for t in xs[1:]:
        if t.shape[:3] != lead:
            raise ShapeError("concat_channels", f"leading dims {t.shape[:3]} != {lead}")
    sizes = [t.shape[3] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in xs], axis=3)
    return make_node("concat_channels", y, tuple(xs), lambda g: tuple(np.split(g, splits, axis=3)))


def pad_spatial(x: Tensor, pads: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad ``(top, bottom, left, right)``."""
    _check_rank4("pad_spatial", x)
    t, b_, l, r = (int(p) for p in pads)
    if min(t, b_, l, r) < 0:
        raise ShapeError("pad_spatial", f"negative padding {pads}")
    y = np.pad(x.data, ((0, 0), (t, b_), (l, r), (0, 0)))
    h, w = x.shape[1:3]
    return make_node("pad_spatial", y, (x,), lambda g: (g[:, t : t + h, l : l + w, :],))


def crop_spatial(x: Tensor, crops: tuple[int, int, int, int]) -> Tensor:
    """Remove ``(top, bottom, left, right)`` rows/columns."""
    _check_rank4("crop_spatial", x)
    t, b_, l, r = (int(c) for c in crops)
    h, w = x.shape[1:3]
    if min(t, b_, l, r) < 0 or t + b_ >= h or l + r >= w:
        raise ShapeError("crop_spatial", f"crop {crops} invalid for spatial size {h}x{w}")
    y = x.data[:, t : h - b_, l : w - r, :]
    pads = ((0, 0), (t, b_), (l, r), (0, 0))
    return make_node("crop_spatial", y, (x,), lambda g: (np.pad(g, pads),))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check_rank4("upsample_nearest", x)
    f = int(factor)
    b, h, w, c = x.shape
    y = np.repeat(np.repeat(x.data, f, axis=1), f, axis=2)
    return make_node("upsample_nearest", y, (x,),
                     lambda g: (g.reshape(b, h, f, w, f, c).sum(axis=(2, 4)),))
