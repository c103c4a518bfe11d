"""Dense-array kernels every other module builds on.

Arrays are plain C-contiguous numpy ``float64`` ndarrays; image-like data
uses (channel, row, col) index order throughout the package.  Elementwise
algebra and reductions are numpy's own.  This module adds the vision
kernels numpy does not ship: strided max/average pooling, cross-correlation
conv2d, and border-clamped bilinear sampling.

Single precision is an opt-in for callers that down-cast afterwards; all
kernels here compute in double precision so gradient checks elsewhere keep
roughly 1e-6 of headroom.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

Array = np.ndarray


def as_f64(x, name: str = "array") -> Array:
    """Coerce to a float64 ndarray and reject non-finite entries."""
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def require_chw(x: Array, name: str = "array") -> Array:
    x = as_f64(x, name)
    if x.ndim != 3:
        raise DimensionError(f"{name} must be (C, H, W), got shape {x.shape}")
    return x


def max_pool2d(x: Array, k: int, stride: int | None = None,
               return_indices: bool = False):
    """Max-pool each channel of a (C, H, W) array over k x k windows.

    Output extents follow floor((H - k) / stride) + 1; trailing rows and
    columns that do not fill a window are dropped.  With ``return_indices``
    the flat (row * W + col) origin of each maximum is returned alongside,
    which the correlation block's backward pass uses for gradient routing.
    """
    x = require_chw(x, "max_pool2d input")
    s = k if stride is None else stride
    if k < 1 or s < 1:
        raise DimensionError(f"window {k} and stride {s} must be >= 1")
    c, h, w = x.shape
    if h < k or w < k:
        raise DimensionError(f"window {k} exceeds input extents {h}x{w}")
    windows = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    flat = windows.reshape(*windows.shape[:3], k * k)
    out = flat.max(axis=3)
    if not return_indices:
        return out
    arg = flat.argmax(axis=3)
    ho, wo = out.shape[1], out.shape[2]
    oy = (np.arange(ho) * s)[None, :, None] + arg // k
    ox = (np.arange(wo) * s)[None, None, :] + arg % k
    # absolute flat index into the (H, W) plane of each window maximum
    idx = oy * w + ox
    return out, idx


def avg_pool2d(x: Array, k: int, stride: int = 1, padding: int = 0) -> Array:
    """Average-pool a (C, H, W) array; zero padding counts in the divisor.

    The divisor is always k*k (padded zeros included), matching the
    hard-pixel weighting convention the loss module relies on.
    """
    x = require_chw(x, "avg_pool2d input")
    if k < 1 or stride < 1 or padding < 0:
        raise DimensionError("invalid pooling geometry")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    c, h, w = x.shape
    if h < k or w < k:
        raise DimensionError(f"window {k} exceeds padded extents {h}x{w}")
    windows = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return windows.sum(axis=(3, 4)) / float(k * k)


def conv2d(x: Array, kernel: Array, stride: int = 1, padding: int = 0) -> Array:
    """2D cross-correlation of (Cin, H, W) with a (Cout, Cin, kh, kw) kernel."""
    x = require_chw(x, "conv2d input")
    kernel = as_f64(kernel, "conv2d kernel")
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be (Cout, Cin, kh, kw), got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError("invalid conv geometry")
    cout, cin, kh, kw = kernel.shape
    if cin != x.shape[0]:
        raise DimensionError(f"kernel expects {cin} channels, input has {x.shape[0]}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    _, h, w = x.shape
    if h < kh or w < kw:
        raise DimensionError(f"kernel {kh}x{kw} exceeds padded extents {h}x{w}")
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.einsum("cijab,ocab->oij", windows, kernel, optimize=False)


def bilinear_sample(x: Array, coords_x: Array, coords_y: Array) -> Array:
    """Sample a (C, H, W) array at real-valued (x', y') coordinates.

    ``coords_x`` addresses columns and ``coords_y`` rows; both share an
    arbitrary output grid shape.  Out-of-bounds coordinates are clamped to
    the border, so every coordinate is valid.  Integer coordinates
    reproduce input values exactly.
    """
    x = require_chw(x, "bilinear_sample input")
    cx = as_f64(coords_x, "coords_x")
    cy = as_f64(coords_y, "coords_y")
    if cx.shape != cy.shape:
        raise DimensionError(f"coordinate grids differ: {cx.shape} vs {cy.shape}")
    _, h, w = x.shape
    cx = np.clip(cx, 0.0, w - 1.0)
    cy = np.clip(cy, 0.0, h - 1.0)
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    top = (1.0 - fx) * x[:, y0, x0] + fx * x[:, y0, x1]
    bot = (1.0 - fx) * x[:, y1, x0] + fx * x[:, y1, x1]
    return (1.0 - fy) * top + fy * bot
