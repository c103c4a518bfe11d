"""Small layers with hand-written backward passes for the toy pipeline.

Each layer's ``forward`` returns (output, cache) so Siamese weight sharing
works: caches are per-call while parameter gradients accumulate on the
layer across calls.  No autodiff; every backward is derived by hand.
"""

from __future__ import annotations

import numpy as np

from ..corr import ChannelMixer
from ..errors import DimensionError
from ..numerics import conv2d


class Conv2d:
    """Strided 2D cross-correlation with bias."""

    def __init__(self, c_in, c_out, k, stride=1, padding=0, rng=None, scale=None):
        if scale is None:
            scale = np.sqrt(2.0 / (c_in * k * k))
        if rng is None:
            self.w = np.zeros((c_out, c_in, k, k))
        else:
            self.w = rng.standard_normal((c_out, c_in, k, k)) * scale
        self.b = np.zeros(c_out)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        y = conv2d(x, self.w, self.stride, self.padding) + self.b[:, None, None]
        return y, x

    def backward(self, x, dy):
        s, p = self.stride, self.padding
        _, kh, kw = self.w.shape[1:]
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        ho, wo = dy.shape[1], dy.shape[2]
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                seg = xp[:, a:a + s * ho:s, b:b + s * wo:s]
                self.gw[:, :, a, b] += np.einsum("oij,cij->oc", dy, seg, optimize=False)
                dxp[:, a:a + s * ho:s, b:b + s * wo:s] += np.einsum(
                    "oij,oc->cij", dy, self.w[:, :, a, b], optimize=False)
        self.gb += dy.sum(axis=(1, 2))
        if p:
            return dxp[:, p:-p, p:-p]
        return dxp

    def params(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]


class ChannelMix:
    """Learnable 1x1 channel mixer (the aggregation block's projection)."""

    def __init__(self, c_in, c_out, rng, scale=None):
        if scale is None:
            scale = 1.0 / np.sqrt(c_in)
        self.w = rng.standard_normal((c_out, c_in)) * scale
        self.b = np.zeros(c_out)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def mixer(self) -> ChannelMixer:
        return ChannelMixer(self.w, self.b)

    def params(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]


class LeakyRelu:
    def __init__(self, alpha=0.1):
        self.alpha = alpha

    def forward(self, x):
        keep = x >= 0
        return np.where(keep, x, self.alpha * x), keep

    def backward(self, keep, dy):
        return np.where(keep, dy, self.alpha * dy)


class Sigmoid:
    def forward(self, x):
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y

    def backward(self, y, dy):
        return dy * y * (1.0 - y)


def upsample_nearest(x, factor: int):
    """Repeat each pixel factor x factor times along the last two axes."""
    if factor < 1:
        raise DimensionError("upsample factor must be >= 1")
    if factor == 1:
        return x
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def upsample_nearest_backward(dy, factor: int):
    """Adjoint of nearest upsampling: sum each factor x factor block."""
    if factor == 1:
        return dy
    h, w = dy.shape[-2] // factor, dy.shape[-1] // factor
    shape = dy.shape[:-2] + (h, factor, w, factor)
    return dy.reshape(shape).sum(axis=(-3, -1))
