"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy and records a closure for the
vector-Jacobian product. Ops registered with ``@differentiable`` are
enumerated by the gradient harness in :mod:`.gradcheck`.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, NumericError
from .tensor import Tensor, as_tensor, differentiable, make_node


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        # python scalars follow the tensor operand
        if a.size == 1 and not a.requires_grad:
            a = Tensor(a.data.astype(b.dtype))
        elif b.size == 1 and not b.requires_grad:
            b = Tensor(b.data.astype(a.dtype))
    return a, b


# -- elementwise binary ---------------------------------------------------

@differentiable("add")
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node("add", a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


@differentiable("sub")
def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node("sub", a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


@differentiable("mul")
def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node("mul", a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


@differentiable("div")
def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def grad(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node("div", out, (a, b), grad)


# -- elementwise unary ----------------------------------------------------

@differentiable("neg")
def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node("neg", -a.data, (a,), lambda g: (-g,))


@differentiable("power")
def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return make_node("power", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


@differentiable("exp")
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node("exp", out, (a,), lambda g: (g * out,))


@differentiable("log")
def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node("log", np.log(a.data), (a,), lambda g: (g / a.data,))


@differentiable("sqrt")
def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


@differentiable("abs")
def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make_node("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


@differentiable("tanh")
def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


@differentiable("sigmoid")
def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return make_node("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


@differentiable("silu")
def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    out = a.data * s
    return make_node("silu", out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


@differentiable("relu")
def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node("relu", a.data * mask, (a,), lambda g: (g * mask,))


@differentiable("clamp")
def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values; the gradient passes only where the input is inside (lo, hi)."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return make_node("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# -- reductions and shape -------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


@differentiable("sum")
def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node("sum", np.asarray(out), (a,), grad)


@differentiable("mean")
def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_node("mean", np.asarray(out), (a,), grad)


@differentiable("reshape")
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


@differentiable("transpose")
def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_node("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                     lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


@differentiable("getitem")
def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def grad(g):
        full = np.zeros_like(a.data)
        if _is_basic_index(idx):
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_node("getitem", np.array(out), (a,), grad)


@differentiable("concat")
def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))]

    return make_node("concat", out, tensors, grad)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


@differentiable("broadcast_to")
def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,),
                     lambda g: (_unbroadcast(g, a.shape),))


# -- linear algebra -------------------------------------------------------

@differentiable("matmul")
def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node("matmul", out, (a, b), grad)


@differentiable("softmax")
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node("softmax", out, (x,), grad)


@differentiable("log_softmax")
def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return make_node("log_softmax", out, (x,),
                     lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


@differentiable("layer_norm")
def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    def grad(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return make_node("layer_norm", out, (x, gamma, beta), grad)


# -- images ---------------------------------------------------------------

def _batched(x: np.ndarray, rank: int):
    """Add a leading batch axis if ``x`` has ``rank`` axes."""
    return (x[None], True) if x.ndim == rank else (x, False)


def _conv_forward(xd: np.ndarray, wd: np.ndarray, stride: int, pad: int):
    """Channels-last im2col convolution. Returns (out [N,Ho,Wo,Cout], cols, wmat)."""
    n, cin, h, w = xd.shape
    cout, _, k, _ = wd.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xh = xd.transpose(0, 2, 3, 1)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xh, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    # rows are output pixels, columns (ky, kx, cin)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * cin)
    wmat = wd.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    return (cols @ wmat.T).reshape(n, ho, wo, cout), cols, wmat


@differentiable("conv2d")
def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,Cin,H,W] (or [Cin,H,W]) with ``w`` [Cout,Cin,k,k]."""
    x, w = as_tensor(x), as_tensor(w)
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    xd, squeeze = _batched(x.data, 3)
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects [N,C,H,W] and [Cout,Cin,k,k], got {x.shape} and {w.shape}")
    n, cin, h, wd = xd.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w or k != k2:
        raise DimensionError(f"conv2d channel/kernel mismatch: input {x.shape}, weight {w.shape}")
    if k % 2 == 0:
        raise DimensionError(f"conv2d kernel size must be odd, got {k}")
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise DimensionError(f"conv2d kernel {k}x{k} larger than padded input {(h + 2 * pad, wd + 2 * pad)}")
    out, cols, wmat = _conv_forward(xd, w.data, stride, pad)
    ho, wo = out.shape[1:3]
    if b is not None:
        out = out + parents[2].data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def grad(g):
        gd = g if g.ndim == 4 else g[None]
        gmat = np.ascontiguousarray(gd.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.ascontiguousarray((gmat.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2))
        if b is not None and parents[2].requires_grad:
            gb = gd.sum(axis=(0, 2, 3))
        if x.requires_grad:
            if stride == 1:
                # full correlation with the spatially flipped, channel-swapped kernel
                wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gx = np.ascontiguousarray(_conv_forward(gd, wflip, 1, k - 1 - pad)[0].transpose(0, 3, 1, 2))
            else:
                gcols = (gmat @ wmat).reshape(n, ho, wo, k, k, cin)
                gxh = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=xd.dtype)
                for ky in range(k):
                    for kx in range(k):
                        gxh[:, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride] += \
                            gcols[:, :, :, ky, kx]
                gx = np.ascontiguousarray(gxh[:, pad:pad + h, pad:pad + wd].transpose(0, 3, 1, 2))
            if squeeze:
                gx = gx[0]
        return (gx, gw) if b is None else (gx, gw, gb)

    return make_node("conv2d", out[0] if squeeze else out, parents, grad)


@differentiable("upsample2x")
def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def grad(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return make_node("upsample2x", out, (x,), grad)


@differentiable("avg_pool")
def avg_pool(x, factor: int) -> Tensor:
    """Non-overlapping mean pooling of the last two axes."""
    x = as_tensor(x)
    s = x.shape
    if s[-2] % factor or s[-1] % factor:
        raise DimensionError(f"avg_pool factor {factor} does not divide {s[-2:]}")
    out = x.data.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor)).mean(axis=(-3, -1))

    def grad(g):
        return (np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1) / (factor * factor),)

    return make_node("avg_pool", out, (x,), grad)


def _sample_coords(flow: np.ndarray, h: int, w: int):
    """Pixel sample positions for a normalized flow, clamped to the border.

    One normalized unit spans half the image, so a displacement of ``d``
    maps to ``d * w / 2`` pixels horizontally.
    """
    gy, gx = np.meshgrid(np.arange(h, dtype=flow.dtype), np.arange(w, dtype=flow.dtype), indexing="ij")
    px = gx + flow[:, 0] * (w / 2.0)
    py = gy + flow[:, 1] * (h / 2.0)
    inside_x = (px >= 0) & (px <= w - 1)
    inside_y = (py >= 0) & (py <= h - 1)
    px = np.clip(px, 0, w - 1)
    py = np.clip(py, 0, h - 1)
    x0 = np.minimum(np.floor(px), w - 2).astype(np.int64)
    y0 = np.minimum(np.floor(py), h - 2).astype(np.int64)
    wx = px - x0
    wy = py - y0
    return x0, y0, wx, wy, inside_x, inside_y


@differentiable("grid_sample_bilinear")
def grid_sample_bilinear(src, flow) -> Tensor:
    """Backward warp: ``out[p] = bilinear(src, p + flow[p])`` with border clamping.

    ``src`` is [C,H,W] or [N,C,H,W]; ``flow`` is [2,H,W] or [N,2,H,W] in
    normalized units (channel 0 horizontal, channel 1 vertical).
    """
    src, flow = as_tensor(src), as_tensor(flow)
    sd, squeeze = _batched(src.data, 3)
    fd, _ = _batched(flow.data, 3)
    if sd.ndim != 4 or fd.ndim != 4 or fd.shape[1] != 2 or sd.shape[0] != fd.shape[0] \
            or sd.shape[2:] != fd.shape[2:]:
        raise DimensionError(f"grid_sample shape mismatch: src {src.shape}, flow {flow.shape}")
    n, c, h, w = sd.shape
    if h < 2 or w < 2:
        raise DimensionError(f"grid_sample needs at least 2x2 maps, got {(h, w)}")
    x0, y0, wx, wy, in_x, in_y = _sample_coords(fd, h, w)
    hw = h * w
    flat = sd.reshape(n, c, hw)
    i00 = (y0 * w + x0).reshape(n, 1, hw)
    i01, i10, i11 = i00 + 1, i00 + w, i00 + w + 1
    v00 = np.take_along_axis(flat, np.broadcast_to(i00, (n, c, hw)), axis=2)
    v01 = np.take_along_axis(flat, np.broadcast_to(i01, (n, c, hw)), axis=2)
    v10 = np.take_along_axis(flat, np.broadcast_to(i10, (n, c, hw)), axis=2)
    v11 = np.take_along_axis(flat, np.broadcast_to(i11, (n, c, hw)), axis=2)
    ax = wx.reshape(n, 1, hw)
    ay = wy.reshape(n, 1, hw)
    top = v00 * (1 - ax) + v01 * ax
    bot = v10 * (1 - ax) + v11 * ax
    out = (top * (1 - ay) + bot * ay).reshape(n, c, h, w)

    def grad(g):
        gd = (g if g.ndim == 4 else g[None]).reshape(n, c, hw)
        gs = gf = None
        if src.requires_grad:
            chan = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None] * hw
            idx = np.concatenate([(chan + i).ravel() for i in (i00, i01, i10, i11)])
            wts = np.concatenate([
                (gd * (1 - ax) * (1 - ay)).ravel(), (gd * ax * (1 - ay)).ravel(),
                (gd * (1 - ax) * ay).ravel(), (gd * ax * ay).ravel()])
            gs = np.bincount(idx, weights=wts, minlength=n * c * hw).astype(sd.dtype).reshape(sd.shape)
            if squeeze:
                gs = gs[0]
        if flow.requires_grad:
            dpx = ((1 - ay) * (v01 - v00) + ay * (v11 - v10)) * gd
            dpy = ((1 - ax) * (v10 - v00) + ax * (v11 - v01)) * gd
            gfx = dpx.sum(axis=1).reshape(n, h, w) * (w / 2.0) * in_x
            gfy = dpy.sum(axis=1).reshape(n, h, w) * (h / 2.0) * in_y
            gf = np.stack([gfx, gfy], axis=1).astype(fd.dtype)
            if squeeze:
                gf = gf[0]
        return gs, gf

    return make_node("grid_sample_bilinear", out[0] if squeeze else out, (src, flow), grad)


# -- losses ---------------------------------------------------------------

def mse(a, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))
