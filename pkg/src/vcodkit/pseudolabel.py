"""Flow-based pseudo ground-truth generation.

Given a labeled mask and externally computed optical flow, the pipeline
inverse-warps the mask to nearby frames, binarizes it, and zeroes every
pixel that fails the bidirectional consistency check: following the flow
forward and then backward must land near the starting position, otherwise
the pixel is treated as occluded and marked background.

Flow files use the Middlebury .flo convention: 4-byte magic "PIEH",
little-endian int32 width and height, then row-major interleaved (u, v)
float32 pairs.  Masks travel as 8-bit single-channel PNG, foreground 255.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError, FlowFormatError, InputError
from .numerics import as_f64, bilinear_sample

FLO_MAGIC = b"PIEH"

DEFAULT_ALPHA = 0.01
DEFAULT_BETA = 0.5
DEFAULT_BINARIZE = 0.5


@dataclass
class FlowField:
    """Per-pixel displacement field, in pixels; x = columns, y = rows."""

    u_x: np.ndarray
    u_y: np.ndarray

    def __post_init__(self):
        self.u_x = as_f64(self.u_x, "u_x")
        self.u_y = as_f64(self.u_y, "u_y")
        if self.u_x.ndim != 2 or self.u_x.shape != self.u_y.shape:
            raise DimensionError(
                f"flow components must share an (H, W) shape: {self.u_x.shape} vs {self.u_y.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u_x.shape

    @staticmethod
    def zero(h: int, w: int) -> "FlowField":
        return FlowField(np.zeros((h, w)), np.zeros((h, w)))


def read_flow_file(path) -> FlowField:
    """Read a Middlebury .flo file."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: header truncated ({len(raw)} bytes)")
    if raw[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic tag {raw[:4]!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: invalid extents {w}x{h}")
    expected = 12 + 8 * w * h
    if len(raw) < expected:
        raise FlowFormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12)
    uv = data.reshape(h, w, 2)
    return FlowField(uv[:, :, 0].astype(np.float64), uv[:, :, 1].astype(np.float64))


def write_flow_file(path, flow: FlowField) -> None:
    """Write a .flo file; components are stored as little-endian float32."""
    h, w = flow.shape
    uv = np.empty((h, w, 2), dtype="<f4")
    uv[:, :, 0] = flow.u_x
    uv[:, :, 1] = flow.u_y
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(uv.tobytes())


def read_mask_png(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG as an (H, W) array in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return arr / 255.0


def write_mask_png(path, mask: np.ndarray) -> None:
    """Write an (H, W) array in [0, 1] as 8-bit grayscale; foreground = 255."""
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"mask must be (H, W), got {arr.shape}")
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def _require_mask(mask, name="mask") -> np.ndarray:
    m = as_f64(mask, name)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be (H, W), got {m.shape}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return m


def is_binary(mask: np.ndarray) -> bool:
    return bool(np.all((mask == 0.0) | (mask == 1.0)))


def warp_mask(gt: np.ndarray, flow: FlowField) -> np.ndarray:
    """Inverse-warp a mask: output(x, y) = gt(x + u_x(x,y), y + u_y(x,y)).

    Sampling is bilinear with border clamping; the result is a probability
    mask since interpolation produces fractional values.
    """
    gt = _require_mask(gt, "gt")
    h, w = gt.shape
    if flow.shape != (h, w):
        raise DimensionError(f"flow extents {flow.shape} do not match mask {gt.shape}")
    ys, xs = np.mgrid[0:h, 0:w]
    return bilinear_sample(gt[None], xs + flow.u_x, ys + flow.u_y)[0]


def fb_consistency(flow_fwd: FlowField, flow_bwd: FlowField,
                   alpha: float = DEFAULT_ALPHA,
                   beta: float = DEFAULT_BETA) -> np.ndarray:
    """Bidirectional consistency check; 1 marks flow-consistent pixels.

    A pixel p is valid iff
        |f(p) + b(p + f(p))|^2 <= alpha * (|f(p)|^2 + |b(p + f(p))|^2) + beta
    with the backward flow b sampled bilinearly at the forward-displaced
    position.  Larger beta never shrinks the valid set.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    if flow_fwd.shape != flow_bwd.shape:
        raise DimensionError(
            f"flow extents differ: {flow_fwd.shape} vs {flow_bwd.shape}")
    h, w = flow_fwd.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + flow_fwd.u_x
    ty = ys + flow_fwd.u_y
    bwd = bilinear_sample(np.stack([flow_bwd.u_x, flow_bwd.u_y]), tx, ty)
    res = (flow_fwd.u_x + bwd[0]) ** 2 + (flow_fwd.u_y + bwd[1]) ** 2
    mag = flow_fwd.u_x ** 2 + flow_fwd.u_y ** 2 + bwd[0] ** 2 + bwd[1] ** 2
    return (res <= alpha * mag + beta).astype(np.uint8)


def pseudo_mask_for_offset(gt: np.ndarray, flow_fwd: FlowField, flow_bwd: FlowField,
                           binarize_thresh: float = DEFAULT_BINARIZE,
                           alpha: float = DEFAULT_ALPHA,
                           beta: float = DEFAULT_BETA) -> np.ndarray:
    """Warp, binarize, and zero the flow-inconsistent pixels for one offset.

    ``flow_fwd`` lives on the target frame's grid and points into the
    labeled frame (it is the warping field); ``flow_bwd`` is the reverse
    field used only by the consistency check.
    """
    warped = warp_mask(gt, flow_fwd)
    binary = (warped >= binarize_thresh).astype(np.float64)
    valid = fb_consistency(flow_fwd, flow_bwd, alpha, beta)
    return binary * valid


def generate_pseudo_masks(gt: np.ndarray, fwd_flows, bwd_flows,
                          binarize_thresh: float = DEFAULT_BINARIZE,
                          alpha: float = DEFAULT_ALPHA,
                          beta: float = DEFAULT_BETA) -> list[np.ndarray]:
    """Produce binary pseudo masks for offsets n = 1..len(fwd_flows).

    The labeled mask must be binary and both flow sequences must supply an
    entry for every offset (at most four).
    """
    gt = _require_mask(gt, "gt")
    if not is_binary(gt):
        raise InputError("source mask must be binary")
    fwd = list(fwd_flows)
    bwd = list(bwd_flows)
    if not 1 <= len(fwd) <= 4 or len(fwd) != len(bwd):
        raise InputError(
            f"need matching flow sequences of length 1..4, got {len(fwd)} and {len(bwd)}")
    for n, (f, b) in enumerate(zip(fwd, bwd), start=1):
        if f is None or b is None:
            raise InputError(f"missing flow for offset {n}")
    return [pseudo_mask_for_offset(gt, f, b, binarize_thresh, alpha, beta)
            for f, b in zip(fwd, bwd)]
