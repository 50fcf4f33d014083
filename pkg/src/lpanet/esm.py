"""Explicit spatial alignment: score-gated features -> offsets -> deformable conv.

Offsets live at feature resolution, in feature-pixel units. For kernel tap k
(row-major over the 3x3 window) channels ``2k`` and ``2k+1`` hold (dy, dx):
the output at p reads the RGB map at ``p + d_k + offset_k(p)``. IR is the
reference frame and is never warped.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .nn import Module, zeros
from .tensor import Tensor, as_tensor, concat, get_default_dtype

KERNEL = 3
TAPS = KERNEL * KERNEL
OFFSET_CHANNELS = 2 * TAPS


def enhance(features, scores, reduce: str = "max") -> Tensor:
    """Multiply every channel by a per-pixel objectness gate taken over categories."""
    features, scores = as_tensor(features), as_tensor(scores)
    if features.ndim != 3 or scores.ndim != 3 or features.shape[1:] != scores.shape[1:]:
        raise DimensionError(f"enhance: features {features.shape} vs scores {scores.shape}")
    if reduce == "max":
        gate = scores.max(axis=0, keepdims=True)
    elif reduce == "mean":
        gate = scores.mean(axis=0, keepdims=True)
    else:
        raise ConfigError(f"enhance: unknown gate reduction {reduce!r}")
    return features * gate


def estimate_offsets(rgb, ir, weight, bias) -> Tensor:
    """3x3 conv (pad 1) over channel-concat(rgb, ir) -> ``[18, h, w]`` offsets."""
    rgb, ir = as_tensor(rgb), as_tensor(ir)
    if rgb.shape != ir.shape:
        raise DimensionError(f"estimate_offsets: rgb {rgb.shape} vs ir {ir.shape}")
    return F.conv2d(concat([rgb, ir], axis=0), weight, bias, stride=1, pad=1)


def tap_grid(h: int, w: int, dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """Nominal sampling coordinates ``[9, h, w]`` in the 1-pixel zero-padded map."""
    dtype = dtype or get_default_dtype()
    gy, gx = np.mgrid[0:h, 0:w]
    ky, kx = np.divmod(np.arange(TAPS), KERNEL)
    ys = gy[None] + ky[:, None, None]
    xs = gx[None] + kx[:, None, None]
    return ys.astype(dtype), xs.astype(dtype)


def deform_conv(x, kernel, offsets) -> Tensor:
    """Deformable 3x3 convolution, stride 1, zero padding 1, no bias.

    Samples are bilinear on the padded map with clamped coordinates, so with
    zero offsets this is exactly ``conv2d(x, kernel, pad=1)``.
    """
    x, kernel, offsets = as_tensor(x), as_tensor(kernel), as_tensor(offsets)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0] \
            or kernel.shape[2:] != (KERNEL, KERNEL):
        raise DimensionError(f"deform_conv: input {x.shape} vs kernel {kernel.shape}")
    c, h, w = x.shape
    if offsets.shape != (OFFSET_CHANNELS, h, w):
        raise DimensionError(f"deform_conv: offsets {offsets.shape}, expected {(OFFSET_CHANNELS, h, w)}")
    base_y, base_x = tap_grid(h, w, x.dtype)
    pairs = offsets.reshape(TAPS, 2, h, w)
    ys = pairs[:, 0] + base_y
    xs = pairs[:, 1] + base_x
    sampled = F.sample_points(F.pad2d(x, 1), ys, xs)  # [C, 9, h, w]
    cols = sampled.reshape(c * TAPS, h * w)
    out = F.matmul(kernel.reshape(kernel.shape[0], c * TAPS), cols)
    return out.reshape(kernel.shape[0], h, w)


def mean_offsets(offsets) -> np.ndarray:
    """Per-pixel (dy, dx) averaged over taps, shape ``[2, h, w]``."""
    data = offsets.data if isinstance(offsets, Tensor) else np.asarray(offsets)
    return data.reshape(TAPS, 2, *data.shape[1:]).mean(axis=0)


class ExplicitAlignment(Module):
    """Offset estimator plus deformable kernel applied to the RGB stream.

    The offset conv starts at zero (identity deformation). The deformable
    kernel starts as a per-channel 3x3 box filter so every tap, and hence every
    tap's offset, receives gradient from the first step.
    """

    def __init__(self, d: int, gate: str = "max"):
        self.gate = gate
        self.offset_weight = zeros((OFFSET_CHANNELS, 2 * d, KERNEL, KERNEL))
        self.offset_bias = zeros((OFFSET_CHANNELS,))
        kernel = np.zeros((d, d, KERNEL, KERNEL), dtype=get_default_dtype())
        kernel[np.arange(d), np.arange(d)] = 1.0 / TAPS
        self.kernel = Tensor(kernel, requires_grad=True)

    def __call__(self, rgb, ir, rgb_scores, ir_scores, bypass: bool = False):
        return esm_forward(self, rgb, ir, rgb_scores, ir_scores, bypass)


def esm_forward(esm: ExplicitAlignment, rgb, ir, rgb_scores, ir_scores, bypass: bool = False):
    """Returns (aligned rgb, offsets). In bypass mode rgb passes through and offsets is None."""
    if bypass:
        return as_tensor(rgb), None
    offsets = estimate_offsets(enhance(rgb, rgb_scores, esm.gate),
                               enhance(ir, ir_scores, esm.gate),
                               esm.offset_weight, esm.offset_bias)
    return deform_conv(rgb, esm.kernel, offsets), offsets
