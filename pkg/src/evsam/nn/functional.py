"""Layer-level differentiable ops on single images (C x H x W, no batch axis)."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _check_finite, _log_macs, _make, add, as_tensor, matmul


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    """Output length of a strided correlation, floor convention.

    Raises when no complete window fits.
    """
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel {k} does not fit input {size} with pad {pad}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation (no kernel flip).

    ``x`` is C_in x H x W and ``w`` is C_out x (C_in/groups) x k x k.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d expects CxHxW input and 4-D weight, got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cg, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if cin % groups or cout % groups or cg != cin // groups:
        raise ValueError(f"conv2d: channels {cin}->{cout} incompatible with groups={groups}, weight {w.shape}")
    _check_finite(x, w, op="conv2d")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    og = cout // groups

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # cols: groups x (cg*k*k) x (ho*wo)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(groups, cg * k * k, ho * wo)
    wm = w.data.reshape(groups, og, cg * k * k)
    y = (wm @ cols).reshape(cout, ho, wo)
    _log_macs("conv2d", cout * cg * k * k * ho * wo)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[:, None, None]
        inputs.append(b)
    hp, wp = xp.shape[1:]

    def back(g):
        gm = g.reshape(groups, og, ho * wo)
        gw = (gm @ cols.transpose(0, 2, 1)).reshape(w.shape)
        gcols = (wm.transpose(0, 2, 1) @ gm).reshape(cin, k, k, ho, wo)
        gxp = np.zeros((cin, hp, wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return _make(y, inputs, back, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Transposed conv with stride equal to kernel size (non-overlapping).

    ``w`` is C_in x C_out x k x k; output is C_out x kH x kW.
    """
    x, w = as_tensor(x), as_tensor(w)
    cin, h, wd = x.shape
    wcin, cout, k, _ = w.shape
    if wcin != cin:
        raise ValueError(f"conv_transpose2d: input has {cin} channels, weight expects {wcin}")
    _check_finite(x, w, op="conv_transpose2d")
    xm = x.data.reshape(cin, h * wd).T                 # (hw, cin)
    wm = w.data.reshape(cin, cout * k * k)
    ym = xm @ wm                                       # (hw, cout*k*k)
    y = ym.reshape(h, wd, cout, k, k).transpose(2, 0, 3, 1, 4).reshape(cout, h * k, wd * k)
    _log_macs("conv_transpose2d", cin * cout * k * k * h * wd)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[:, None, None]
        inputs.append(b)

    def back(g):
        gm = g.reshape(cout, h, k, wd, k).transpose(1, 3, 0, 2, 4).reshape(h * wd, cout * k * k)
        gx = (gm @ wm.T).T.reshape(cin, h, wd)
        gw = (xm.T @ gm).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return _make(y, inputs, back, "conv_transpose2d")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as out x in."""
    y = matmul(x, as_tensor(w).T)
    return add(y, b) if b is not None else y


def normalize(kind: str, x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5,
              axis: int = -1, mean: np.ndarray | None = None, var: np.ndarray | None = None) -> Tensor:
    """Batch-norm (inference statistics) or layer-norm along ``axis``.

    ``scale``/``shift`` are 1-D with length ``x.shape[axis]``. For
    ``batchnorm_infer`` the running ``mean``/``var`` default to 0/1. For
    ``layernorm`` the statistics are taken over ``axis`` itself.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    axis = axis % x.ndim
    n = x.shape[axis]
    if scale.shape != (n,) or shift.shape != (n,):
        raise ValueError(f"scale/shift must have shape ({n},), got {scale.shape}, {shift.shape}")
    _check_finite(x, scale, shift, op="normalize")
    bshape = [1] * x.ndim
    bshape[axis] = n
    s = scale.data.reshape(bshape)
    t = shift.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    if kind == "batchnorm_infer":
        dt = x.data.dtype
        mu = np.zeros(n, dt) if mean is None else np.asarray(mean, dt)
        vr = np.ones(n, dt) if var is None else np.asarray(var, dt)
        inv = (1.0 / np.sqrt(vr + eps)).astype(dt).reshape(bshape)
        xhat = (x.data - mu.reshape(bshape)) * inv
        y = xhat * s + t

        def back(g):
            return g * s * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

    elif kind == "layernorm":
        mu = x.data.mean(axis=axis, keepdims=True)
        xc = x.data - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
        xhat = xc * inv
        y = xhat * s + t

        def back(g):
            gh = g * s
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
            return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    else:
        raise ValueError(f"unknown normalization {kind!r}")
    return _make(y, (x, scale, shift), back, "normalize")


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    """Nearest-neighbour 2x upsampling of a C x H x W map."""
    if mode != "nearest":
        raise ValueError(f"unsupported upsample mode {mode!r}")
    x = as_tensor(x)
    c, h, w = x.shape
    y = x.data.repeat(2, axis=1).repeat(2, axis=2)
    return _make(y, (x,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),), "upsample2x")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x, op="softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def pad_edge(x: Tensor, p: int) -> Tensor:
    """Replicate-pad the two spatial axes of a C x H x W map by ``p``."""
    x = as_tensor(x)
    if p == 0:
        return x
    c, h, w = x.shape
    ri = np.clip(np.arange(-p, h + p), 0, h - 1)
    ci = np.clip(np.arange(-p, w + p), 0, w - 1)
    y = x.data[:, ri][:, :, ci]

    def back(g):
        gr = np.zeros((c, h, w + 2 * p), g.dtype)
        np.add.at(gr, (slice(None), ri), g)
        gx = np.zeros((c, h, w), g.dtype)
        np.add.at(gx, (slice(None), slice(None), ci), gr)
        return (gx,)

    return _make(y, (x,), back, "pad_edge")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix (n_out x n_in), half-pixel centres, edge clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), np.float64)
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of a C x H x W map to C x size[0] x size[1]."""
    x = as_tensor(x)
    _, h, w = x.shape
    ry = bilinear_matrix(h, size[0]).astype(x.data.dtype)
    rx = bilinear_matrix(w, size[1]).astype(x.data.dtype)
    y = ry @ x.data @ rx.T
    return _make(y, (x,), lambda g: (ry.T @ g @ rx,), "resize_bilinear")
