"""Spatial operators on (batch, channel, height, width) tensors."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, as_tensor, make_result


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D (B, C, H, W) tensor, got shape {x.shape}")


# -- convolution --------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col and a single matmul."""
    x, weight = as_tensor(x), as_tensor(weight)
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (Co, Ci, kh, kw), got {weight.shape}")
    B, Ci, H, W = x.shape
    Co, Ci_w, kh, kw = weight.shape
    if Ci != Ci_w:
        raise ShapeError(f"conv2d: input has {Ci} channels, weight expects {Ci_w}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Co,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Co},)")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input")

    xd = x.data
    wmat = weight.data.reshape(Co, Ci * kh * kw)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = xd.transpose(0, 2, 3, 1).reshape(B * H * W, Ci)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # (B, Ci, Ho, Wo, kh, kw) -> (B, Ho, Wo, Ci, kh, kw)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Ci * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out_data = np.ascontiguousarray(out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = gmat @ wmat
            if kh == 1 and kw == 1 and stride == 1 and padding == 0:
                gx = np.ascontiguousarray(dcols.reshape(B, H, W, Ci).transpose(0, 3, 1, 2))
            else:
                dcols = dcols.reshape(B, Ho, Wo, Ci, kh, kw)
                gxp = np.zeros((B, Ci, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
                gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out_data, parents, backward)


# -- batch normalization ------------------------------------------------------

class RunningStats:
    """Per-channel running mean/variance updated by exponential moving average."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * var).astype(self.var.dtype)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
              mode: str = "train", running: RunningStats | None = None) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _require_4d(x, "batchnorm")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({C},)")
    xd = x.data
    g4 = gamma.data.reshape(1, C, 1, 1)

    if mode == "train":
        n = B * H * W
        if n < 2:
            raise ShapeError("batchnorm: train mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean.reshape(1, C, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(1, C, 1, 1)
        if running is not None:
            running.update(mean, var * n / (n - 1))
        out = xhat * g4 + beta.data.reshape(1, C, 1, 1)

        def backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                dxhat = g * g4
                gx = (inv.reshape(1, C, 1, 1) / n) * (
                    n * dxhat
                    - dxhat.sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
                )
            return gx, gg, gbeta

    elif mode == "eval":
        if running is None:
            raise ValueError("batchnorm: eval mode needs running statistics")
        inv = (1.0 / np.sqrt(running.var + eps)).astype(xd.dtype)
        xhat = (xd - running.mean.reshape(1, C, 1, 1).astype(xd.dtype)) * inv.reshape(1, C, 1, 1)
        out = xhat * g4 + beta.data.reshape(1, C, 1, 1)

        def backward(g):
            gx = g * (g4 * inv.reshape(1, C, 1, 1)) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        raise ValueError(f"batchnorm: unknown mode {mode!r}")

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


# -- pooling --------------------------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2. Ties route the gradient to the first element in
    row-major window order."""
    x = as_tensor(x)
    _require_4d(x, "maxpool2")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((B, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward)


# -- resampling -----------------------------------------------------------------

@lru_cache(maxsize=256)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centers, edge-clamped."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of input-cell overlap fractions per output cell."""
    if n_out > n_in:
        raise ShapeError("area resize only downsamples")
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = i * scale, (i + 1) * scale
        for k in range(int(np.floor(a)), min(int(np.ceil(b)), n_in)):
            m[i, k] = min(b, k + 1) - max(a, k)
    m /= scale
    m.setflags(write=False)
    return m


def _separable_resize(x: Tensor, ry: np.ndarray, rx: np.ndarray) -> Tensor:
    ry = ry.astype(x.dtype)
    rx = rx.astype(x.dtype)
    out = np.einsum("oh,bchw,pw->bcop", ry, x.data, rx, optimize=True)

    def backward(g):
        return (np.einsum("oh,bcop,pw->bchw", ry, g, rx, optimize=True),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    _require_4d(x, "resize_bilinear")
    if out_h < 1 or out_w < 1:
        raise ShapeError("resize_bilinear: output size must be >= 1")
    _, _, H, W = x.shape
    return _separable_resize(x, bilinear_matrix(H, out_h), bilinear_matrix(W, out_w))


def resize_area(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    _require_4d(x, "resize_area")
    _, _, H, W = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError("resize_area: output size must be >= 1")
    if out_h > H or out_w > W:
        raise ShapeError("resize_area: upsampling requested; use resize_bilinear")
    return _separable_resize(x, area_matrix(H, out_h), area_matrix(W, out_w))


def area_downsample(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-array area resize over the last two axes (no graph)."""
    H, W = arr.shape[-2:]
    ry = area_matrix(H, out_h).astype(arr.dtype)
    rx = area_matrix(W, out_w).astype(arr.dtype)
    return np.einsum("oh,...hw,pw->...op", ry, arr, rx, optimize=True)
