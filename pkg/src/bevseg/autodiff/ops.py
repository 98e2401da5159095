"""Differentiable operations.

Every function here takes :class:`~bevseg.autodiff.tensor.Tensor` inputs
(plus python scalars / numpy constants), computes the forward value with
numpy, and registers an adjoint rule on the active tape via ``record_op``.
Backward closures only compute gradients for inputs that asked for them,
so e.g. a convolution over constant input data never pays for the
data-gradient scatter.

Elementwise binary ops broadcast with numpy semantics; their adjoints are
summed back onto the original operand shapes (``_unbroadcast``).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from bevseg.autodiff.tensor import Tensor, record_op


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data)
    return record_op(out, (a, b), lambda d: (
        _unbroadcast(d, a.shape) if a.requires_grad else None,
        _unbroadcast(d, b.shape) if b.requires_grad else None,
    ), "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data - b.data)
    return record_op(out, (a, b), lambda d: (
        _unbroadcast(d, a.shape) if a.requires_grad else None,
        _unbroadcast(-d, b.shape) if b.requires_grad else None,
    ), "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data)
    return record_op(out, (a, b), lambda d: (
        _unbroadcast(d * b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(d * a.data, b.shape) if b.requires_grad else None,
    ), "mul")


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data / b.data)
    return record_op(out, (a, b), lambda d: (
        _unbroadcast(d / b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(-d * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
    ), "div")


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return record_op(out, (a,), lambda d: (-d,), "neg")


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    out = Tensor(a.data ** e)
    return record_op(out, (a,), lambda d: (d * e * a.data ** (e - 1.0),), "pow")


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return record_op(out, (a,), lambda d: (d / a.data,), "log")


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    y = out.data
    return record_op(out, (a,), lambda d: (d * y,), "exp")


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi))
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return record_op(out, (a,), lambda d: (d * mask,), "clamp")


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return record_op(out, (a,), lambda d: (d * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # Stable two-branch logistic.
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return record_op(out, (a,), lambda d: (d * y * (1.0 - y),), "sigmoid")


# ---------------------------------------------------------------------------
# reductions and shaping


def _norm_axes(axis, ndim) -> tuple:
    ax = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(x % ndim for x in ax))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(d):
        dd = d
        if axis is not None and not keepdims:
            for x in _norm_axes(axis, a.ndim):
                dd = np.expand_dims(dd, x)
        return (np.broadcast_to(dd, a.shape).copy(),)

    return record_op(out, (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[x] for x in _norm_axes(axis, a.ndim)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return record_op(out, (a,), lambda d: (d.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return record_op(out, (a,), lambda d: (d.transpose(inv),), "transpose")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis 1 of NCHW)."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects rank-4 NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"incompatible shapes for channel concat: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return record_op(out, (a, b), lambda d: (
        d[:, :ca] if a.requires_grad else None,
        d[:, ca:] if b.requires_grad else None,
    ), "concat")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(d):
        dot = (d * y).sum(axis=axis, keepdims=True)
        return (y * (d - dot),)

    return record_op(out, (a,), bwd, "softmax")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects rank >= 2 operands")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(d):
        swap = lambda m: np.swapaxes(m, -1, -2)
        ga = _unbroadcast(np.matmul(d, swap(b.data)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(swap(a.data), d), b.shape) if b.requires_grad else None
        return (ga, gb)

    return record_op(out, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ w (+ b)`` for 2-D ``x`` of shape (rows, in) and ``w`` (in, out)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError("linear expects 2-D input and weight")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(d):
        gx = d @ w.data.T if x.requires_grad else None
        gw = x.data.T @ d if w.requires_grad else None
        if b is None:
            return (gx, gw)
        gb = d.sum(axis=0) if b.requires_grad else None
        return (gx, gw, gb)

    return record_op(out, inputs, bwd, "linear")


# ---------------------------------------------------------------------------
# convolution and friends


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, ho*wo), rows ordered (c, i, j) row-major."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho * wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, :, i, j, :] = patch.reshape(n, c, ho * wo)
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int,
            ho: int, wo: int, pad: int) -> np.ndarray:
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    view = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += view[:, :, i, j]
    if pad:
        dxp = dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW convolution (cross-correlation), weight (out_c, in_c, kh, kw).

    The output extent must come out exact: ``(H + 2*padding - kh)`` has to be
    divisible by ``stride``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weight")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if ic != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ic}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ValueError("kernel does not fit the padded input")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if (h + 2 * padding - kh) % stride or (wd + 2 * padding - kw) % stride:
        raise ValueError("conv2d output extent is not an integer for these parameters")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)          # (N, C*kh*kw, L)
    wm = w.data.reshape(oc, -1)                          # (O, C*kh*kw)
    y = np.matmul(wm, cols)                              # (N, O, L)
    if b is not None:
        y = y + b.data[:, None]
    out = Tensor(np.ascontiguousarray(y.reshape(n, oc, ho, wo)))
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(d):
        dflat = d.reshape(n, oc, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(dflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            dcols = np.matmul(wm.T, dflat)
            gx = _col2im(dcols, x.shape, kh, kw, stride, ho, wo, padding)
        if b is None:
            return (gx, gw)
        if b.requires_grad:
            gb = dflat.sum(axis=(0, 2))
        return (gx, gw, gb)

    return record_op(out, inputs, bwd, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2,
                     output_padding: int = 0) -> Tensor:
    """Transposed convolution, weight (in_c, out_c, kh, kw).

    Output extent is ``(H - 1) * stride + kh + output_padding``; the extra
    ``output_padding`` rows/cols (bottom/right) stay zero and exist so that an
    upsample can exactly match a skip connection whose pooled extent was odd.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv_transpose2d expects NCHW input and IOHW weight")
    n, c, h, wd = x.shape
    ic, oc, kh, kw = w.shape
    if ic != c:
        raise ValueError(f"conv_transpose2d channel mismatch: input has {c}, weight expects {ic}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if output_padding < 0 or output_padding >= stride:
        raise ValueError("output_padding must be in [0, stride)")
    ho = (h - 1) * stride + kh + output_padding
    wo = (wd - 1) * stride + kw + output_padding

    wm = w.data.reshape(c, oc * kh * kw)
    xflat = x.data.reshape(n, c, h * wd)
    tmp = np.matmul(wm.T, xflat).reshape(n, oc, kh, kw, h, wd)
    y = np.zeros((n, oc, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y[:, :, i:i + stride * (h - 1) + 1:stride, j:j + stride * (wd - 1) + 1:stride] += tmp[:, :, i, j]
    if b is not None:
        y += b.data[None, :, None, None]
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(d):
        # Gather the strided windows back into (N, O*kh*kw, H*W) columns.
        dcols = np.empty((n, oc, kh, kw, h * wd), dtype=d.dtype)
        for i in range(kh):
            for j in range(kw):
                dcols[:, :, i, j, :] = d[:, :, i:i + stride * (h - 1) + 1:stride,
                                         j:j + stride * (wd - 1) + 1:stride].reshape(n, oc, h * wd)
        dcols = dcols.reshape(n, oc * kh * kw, h * wd)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wm, dcols).reshape(x.shape)
        if w.requires_grad:
            gw = np.matmul(xflat, dcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is None:
            return (gx, gw)
        if b.requires_grad:
            gb = d.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return record_op(out, inputs, bwd, "conv_transpose2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2, floor_odd: bool = False) -> Tensor:
    """Non-overlapping max pooling (window == stride).

    Ties within a window route the gradient to the first occurrence in
    row-major window order.  Odd trailing rows/cols either raise or, with
    ``floor_odd=True``, are cropped off before pooling.
    """
    if x.ndim != 4:
        raise ValueError("maxpool2d expects an NCHW tensor")
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    n, c, h, w = x.shape
    hc, wc = h - h % window, w - w % window
    if (hc != h or wc != w) and not floor_odd:
        raise ValueError(f"extent {h}x{w} is not divisible by the {window}x{window} window")
    ho, wo = hc // window, wc // window
    xv = x.data[:, :, :hc, :wc]
    win = xv.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)
    amax = win.argmax(axis=-1)  # first occurrence on ties, row-major window order
    y = np.take_along_axis(win, amax[..., None], axis=-1)[..., 0]
    out = Tensor(np.ascontiguousarray(y))

    def bwd(d):
        dwin = np.zeros((n, c, ho, wo, window * window), dtype=d.dtype)
        np.put_along_axis(dwin, amax[..., None], d[..., None], axis=-1)
        dx_core = dwin.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hc, wc)
        if hc == h and wc == w:
            return (np.ascontiguousarray(dx_core),)
        dx = np.zeros(x.shape, dtype=d.dtype)
        dx[:, :, :hc, :wc] = dx_core
        return (dx,)

    return record_op(out, (x,), bwd, "maxpool2d")


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix (half-pixel centers)."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m.astype(dtype_name)


def bilinear_resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Numpy-only bilinear resize of the two trailing axes (no tape)."""
    mh = _resize_matrix(a.shape[-2], out_h, a.dtype.name if a.dtype in (np.float32, np.float64) else "float64")
    mw = _resize_matrix(a.shape[-1], out_w, mh.dtype.name)
    return np.matmul(np.matmul(mh, a.astype(mh.dtype)), mw.T)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of the two trailing axes.

    Half-pixel source centers, edges clamped; a constant image stays exactly
    constant.  Implemented as two cached separable matrices, so the adjoint
    is their exact transpose.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("resize target extents must be positive")
    mh = _resize_matrix(x.shape[-2], out_h, x.dtype.name)
    mw = _resize_matrix(x.shape[-1], out_w, x.dtype.name)
    y = np.matmul(np.matmul(mh, x.data), mw.T)
    out = Tensor(np.ascontiguousarray(y))

    def bwd(d):
        return (np.matmul(np.matmul(mh.T, d), mw),)

    return record_op(out, (x,), bwd, "bilinear_resize")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch is normalized with its own biased-variance
    statistics and the running arrays are updated in place (unbiased variance,
    factor ``momentum`` on the new value).  In eval mode the running
    statistics are used and no state changes.
    """
    if x.ndim != 4:
        raise ValueError("batchnorm2d expects an NCHW tensor")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("gamma/beta must have shape (channels,)")
    red = (0, 2, 3)
    cnt = n * h * w
    if training:
        mu = x.data.mean(axis=red)
        var = x.data.var(axis=red)  # biased
        istd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * istd[None, :, None, None]
        unbiased = var * (cnt / (cnt - 1)) if cnt > 1 else var
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
    else:
        istd = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * istd[None, :, None, None]
    xhat = xhat.astype(x.dtype)
    istd = istd.astype(x.dtype)
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(y)

    def bwd(d):
        gg = (d * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = d.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            if training:
                ds = d.sum(axis=red)
                dxs = (d * xhat).sum(axis=red)
                gx = (gamma.data * istd)[None, :, None, None] * (
                    d - (ds / cnt)[None, :, None, None] - xhat * (dxs / cnt)[None, :, None, None])
            else:
                gx = d * (gamma.data * istd)[None, :, None, None]
        return (gx, gg, gb)

    return record_op(out, (x, gamma, beta), bwd, "batchnorm2d")


def grid_sample(feat: Tensor, points: Tensor) -> Tensor:
    """Bilinearly sample ``feat`` (C, H, W) at ``points`` (S, 2) = (x, y) pixels.

    Zero padding outside the feature extent; the sample fades linearly to
    zero as a point crosses the border, so gradients with respect to both the
    features and the point coordinates are well defined almost everywhere.
    Returns (S, C).
    """
    if feat.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("grid_sample expects feat (C, H, W) and points (S, 2)")
    c, h, w = feat.shape
    px = points.data[:, 0]
    py = points.data[:, 1]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = (px - x0).astype(feat.dtype)
    fy = (py - y0).astype(feat.dtype)
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1

    def gather(yi, xi):
        valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).astype(feat.dtype)
        v = feat.data[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]  # (C, S)
        return v * valid, valid

    v00, m00 = gather(y0, x0)
    v01, m01 = gather(y0, x1)
    v10, m10 = gather(y1, x0)
    v11, m11 = gather(y1, x1)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    y = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).T  # (S, C)
    out = Tensor(np.ascontiguousarray(y))

    def bwd(d):
        dt = d.T  # (C, S)
        gfeat = gpts = None
        if feat.requires_grad:
            gfeat = np.zeros(feat.shape, dtype=feat.dtype)
            for yi, xi, wgt, msk in ((y0, x0, w00, m00), (y0, x1, w01, m01),
                                     (y1, x0, w10, m10), (y1, x1, w11, m11)):
                np.add.at(gfeat, (slice(None), np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)),
                          dt * (wgt * msk)[None, :])
        if points.requires_grad:
            gx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy   # d out / d px, (C, S)
            gy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
            gpts = np.stack([(dt * gx).sum(axis=0), (dt * gy).sum(axis=0)], axis=1)
        return (gfeat, gpts)

    return record_op(out, (feat, points), bwd, "grid_sample")


# ---------------------------------------------------------------------------
# operator sugar on Tensor

def _swap(fn):
    return lambda a, b: fn(_as_tensor(b, a), a)


Tensor.__add__ = add
Tensor.__radd__ = lambda a, b: add(a, b)
Tensor.__sub__ = sub
Tensor.__rsub__ = _swap(sub)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda a, b: mul(a, b)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = _swap(div)
Tensor.__neg__ = neg
Tensor.__pow__ = pow_scalar
