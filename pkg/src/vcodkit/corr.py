"""Full-range correlation volumes, the aggregation block, and its pyramid.

A correlation volume pairs every reference position (x, y) with every
neighbor position (u, v) through the exponential of the feature dot
product.  Normalizing each (x, y) slice over its sum turns the volume into
convex weights, and aggregation applies those weights to a channel-mixed
copy of the neighbor features.  The backward pass is hand-derived and
verified against central finite differences in the test suite.

Index order: volumes are (H_ref, W_ref, H_nbr, W_nbr); feature maps are
(C, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CacheMismatchError, DimensionError
from .numerics import as_f64, max_pool2d, require_chw

# Per-scale max-pooling factors for the neighbor frame.  The largest factor
# is paired with the finest scale so pooled grids keep comparable extents.
DEFAULT_POOL_SCHEDULE = {2: 8, 3: 4, 4: 2}

DEFAULT_CHANNELS = 32

PYRAMID_SCALES = (2, 3, 4)


@dataclass(frozen=True)
class CorrelationVolume:
    """4D correlation scores plus the normalization state.

    ``values`` holds exp(logits); unnormalized volumes keep the raw logits
    around so normalization can run on the max-subtracted (overflow-safe)
    path, which is algebraically identical to dividing the raw
    exponentials by their slice sums.
    """

    values: np.ndarray
    normalized: bool
    logits: np.ndarray | None = None

    @property
    def ref_extent(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def nbr_extent(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]


@dataclass
class ChannelMixer:
    """Learnable 1x1 convolution mixing channels of a feature map."""

    weights: np.ndarray  # (C_out, C_in)
    bias: np.ndarray     # (C_out,)

    def __post_init__(self):
        self.weights = as_f64(self.weights, "mixer weights")
        self.bias = as_f64(self.bias, "mixer bias")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError("mixer expects (C_out, C_in) weights and (C_out,) bias")

    def apply(self, feat: np.ndarray) -> np.ndarray:
        feat = require_chw(feat, "mixer input")
        if feat.shape[0] != self.weights.shape[1]:
            raise DimensionError(
                f"mixer expects {self.weights.shape[1]} channels, got {feat.shape[0]}")
        return np.einsum("oc,chw->ohw", self.weights, feat, optimize=False) \
            + self.bias[:, None, None]


def random_mixer(rng: np.random.Generator, c_in: int, c_out: int | None = None,
                 scale: float | None = None) -> ChannelMixer:
    c_out = c_in if c_out is None else c_out
    scale = (1.0 / np.sqrt(c_in)) if scale is None else scale
    return ChannelMixer(rng.standard_normal((c_out, c_in)) * scale, np.zeros(c_out))


def _pair_logits(f_ref: np.ndarray, f_nbr: np.ndarray) -> np.ndarray:
    f_ref = require_chw(f_ref, "reference features")
    f_nbr = require_chw(f_nbr, "neighbor features")
    if f_ref.shape[0] != f_nbr.shape[0]:
        raise DimensionError(
            f"channel mismatch: reference {f_ref.shape[0]} vs neighbor {f_nbr.shape[0]}")
    return np.einsum("cxy,cuv->xyuv", f_ref, f_nbr, optimize=False)


def correlation_volume(f_ref: np.ndarray, f_nbr: np.ndarray) -> CorrelationVolume:
    """Unnormalized volume: entry (x,y,u,v) = exp(sum_c ref[c,x,y]*nbr[c,u,v]).

    Every entry is strictly positive.  The raw exponential can overflow for
    extreme feature magnitudes; the normalization path works on the logits
    and is immune to that.
    """
    logits = _pair_logits(f_ref, f_nbr)
    return CorrelationVolume(values=np.exp(logits), normalized=False, logits=logits)


def _softmax_uv(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=(2, 3), keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=(2, 3), keepdims=True)


def normalize_volume(vol: CorrelationVolume) -> CorrelationVolume:
    """Divide each (x, y) slice by its sum over the neighbor grid.

    Runs on max-subtracted exponentials when logits are available; falls
    back to dividing the stored values otherwise.  Both routes agree to
    floating-point roundoff.
    """
    if vol.normalized:
        raise ValueError("volume is already normalized")
    if vol.logits is not None:
        values = _softmax_uv(vol.logits)
    else:
        values = vol.values / vol.values.sum(axis=(2, 3), keepdims=True)
    return CorrelationVolume(values=values, normalized=True)


def aggregate(vol: CorrelationVolume, g: np.ndarray) -> np.ndarray:
    """Weight neighbor-grid features by a normalized volume.

    out[c, x, y] = sum_{u,v} vol[x, y, u, v] * g[c, u, v]; each output
    entry is a convex combination of g over the neighbor grid.
    """
    if not vol.normalized:
        raise ValueError("aggregate requires a normalized volume")
    g = require_chw(g, "aggregation features")
    if g.shape[1:] != vol.nbr_extent:
        raise DimensionError(
            f"feature extents {g.shape[1:]} do not match neighbor grid {vol.nbr_extent}")
    return np.einsum("xyuv,cuv->cxy", vol.values, g, optimize=False)


@dataclass
class CabCache:
    """Intermediates cab_forward saves for the analytic backward pass."""

    f_ref: np.ndarray
    nbr_shape: tuple[int, int, int]
    pooled: np.ndarray
    pool_idx: np.ndarray | None
    pool_k: int
    mixed: np.ndarray
    vol: np.ndarray  # normalized (x, y, u, v)
    phi: ChannelMixer


@dataclass
class CabGrads:
    d_ref: np.ndarray
    d_nbr: np.ndarray
    d_phi_weights: np.ndarray
    d_phi_bias: np.ndarray


def cab_forward(f_ref: np.ndarray, f_nbr_full: np.ndarray, pool_k: int,
                phi: ChannelMixer) -> tuple[np.ndarray, CabCache]:
    """Correlation aggregation block: pool, mix, correlate, normalize, aggregate.

    The neighbor frame is max-pooled by ``pool_k`` (1 = no pooling) while
    the reference keeps full resolution; the pooled neighbor is channel-
    mixed by ``phi`` and aggregated under the normalized correlation
    weights.  Returns the aggregated map on the reference grid plus the
    cache backward needs.
    """
    f_ref = require_chw(f_ref, "reference features")
    f_nbr_full = require_chw(f_nbr_full, "neighbor features")
    if pool_k < 1:
        raise DimensionError("pool factor must be >= 1")
    if pool_k > 1:
        pooled, pool_idx = max_pool2d(f_nbr_full, pool_k, pool_k, return_indices=True)
    else:
        pooled, pool_idx = f_nbr_full, None
    mixed = phi.apply(pooled)
    vol = _softmax_uv(_pair_logits(f_ref, pooled))
    out = np.einsum("xyuv,cuv->cxy", vol, mixed, optimize=False)
    cache = CabCache(f_ref=f_ref, nbr_shape=f_nbr_full.shape, pooled=pooled,
                     pool_idx=pool_idx, pool_k=pool_k, mixed=mixed, vol=vol, phi=phi)
    return out, cache


def cab_backward(cache: CabCache, d_out: np.ndarray) -> CabGrads:
    """Analytic gradients of the aggregation block.

    Applies the exact softmax Jacobian of the per-slice normalization and
    routes the pooled-neighbor gradient back through the recorded argmax
    positions.
    """
    d_out = as_f64(d_out, "output cotangent")
    expected = (cache.mixed.shape[0],) + cache.f_ref.shape[1:]
    if d_out.shape != expected:
        raise CacheMismatchError(
            f"cotangent shape {d_out.shape} does not match cached forward {expected}")

    vol, mixed, pooled, f_ref = cache.vol, cache.mixed, cache.pooled, cache.f_ref

    d_vol = np.einsum("cxy,cuv->xyuv", d_out, mixed, optimize=False)
    d_mixed = np.einsum("xyuv,cxy->cuv", vol, d_out, optimize=False)

    # softmax over the (u, v) axes of each slice
    inner = (d_vol * vol).sum(axis=(2, 3), keepdims=True)
    d_logits = vol * (d_vol - inner)

    d_ref = np.einsum("xyuv,cuv->cxy", d_logits, pooled, optimize=False)
    d_pooled = np.einsum("xyuv,cxy->cuv", d_logits, f_ref, optimize=False)

    # 1x1 mixer backward
    d_phi_w = np.einsum("ouv,cuv->oc", d_mixed, pooled, optimize=False)
    d_phi_b = d_mixed.sum(axis=(1, 2))
    d_pooled = d_pooled + np.einsum("oc,ouv->cuv", cache.phi.weights, d_mixed,
                                    optimize=False)

    if cache.pool_idx is None:
        d_nbr = d_pooled
    else:
        c, h, w = cache.nbr_shape
        d_nbr = np.zeros((c, h * w))
        np.add.at(d_nbr, (np.arange(c)[:, None], cache.pool_idx.reshape(c, -1)),
                  d_pooled.reshape(c, -1))
        d_nbr = d_nbr.reshape(c, h, w)
    return CabGrads(d_ref=d_ref, d_nbr=d_nbr, d_phi_weights=d_phi_w, d_phi_bias=d_phi_b)


@dataclass
class CorrelationPyramid:
    """Aggregated feature maps per scale, for one or two neighbor frames."""

    input_hw: tuple[int, int]
    to_neighbor1: dict[int, np.ndarray] = field(default_factory=dict)
    to_neighbor2: dict[int, np.ndarray] | None = None


def scale_extent(size: int, scale: int) -> int:
    return size // (2 ** (scale + 1))


def build_pyramid(input_hw: tuple[int, int],
                  ref_feats: dict[int, np.ndarray],
                  nbr1_feats: dict[int, np.ndarray],
                  phis: dict[int, ChannelMixer],
                  nbr2_feats: dict[int, np.ndarray] | None = None,
                  pool_schedule: dict[int, int] | None = None) -> CorrelationPyramid:
    """Run the aggregation block at scales 2..4 of a declared input size.

    Feature extents must equal H/2^(i+1) x W/2^(i+1) for each scale i; the
    second neighbor, when supplied, reuses the same per-scale mixers.
    """
    h, w = input_hw
    if h % 32 or w % 32:
        raise DimensionError(f"input extents {h}x{w} must be divisible by 32")
    schedule = dict(DEFAULT_POOL_SCHEDULE if pool_schedule is None else pool_schedule)
    pyramid = CorrelationPyramid(input_hw=(h, w),
                                 to_neighbor2={} if nbr2_feats is not None else None)
    for i in PYRAMID_SCALES:
        expect = (scale_extent(h, i), scale_extent(w, i))
        for name, feats in (("reference", ref_feats), ("neighbor", nbr1_feats)):
            if feats[i].shape[1:] != expect:
                raise DimensionError(
                    f"{name} scale {i} extents {feats[i].shape[1:]} != {expect}")
        out1, _ = cab_forward(ref_feats[i], nbr1_feats[i], schedule[i], phis[i])
        pyramid.to_neighbor1[i] = out1
        if nbr2_feats is not None:
            if nbr2_feats[i].shape[1:] != expect:
                raise DimensionError(
                    f"second neighbor scale {i} extents {nbr2_feats[i].shape[1:]} != {expect}")
            out2, _ = cab_forward(ref_feats[i], nbr2_feats[i], schedule[i], phis[i])
            pyramid.to_neighbor2[i] = out2
    return pyramid
