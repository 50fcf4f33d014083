"""Implicit spatial alignment: 3x3 windowed cross-modal attention and the
symmetric consistency loss between the two attention directions.

Window slots are row-major over offsets (-1..1, -1..1); slot 4 is the centre
and slot ``8 - k`` mirrors slot ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import DimensionError
from .tensor import Tensor, as_tensor, concat

WINDOW = 3
SLOTS = WINDOW * WINDOW
CENTER = SLOTS // 2


@dataclass
class WindowedKeys:
    keys: Tensor             # [h*w, 9, D]
    valid_mask: np.ndarray   # [h*w, 9] bool
    size: tuple[int, int]


@dataclass
class AttentionWeights:
    logits: Tensor           # [h*w, 9], already divided by sqrt(d)
    weights: Tensor          # [h*w, 9]
    valid_mask: np.ndarray
    size: tuple[int, int]


@dataclass
class ConsistencyVectors:
    v_ir_to_rgb: Tensor      # [h*w]
    v_rgb_to_ir: Tensor      # [h*w]
    best_index: np.ndarray   # [h*w] window slot of the strongest IR->RGB match


def window_offsets() -> np.ndarray:
    """``[9, 2]`` (dy, dx) for every slot."""
    ky, kx = np.divmod(np.arange(SLOTS), WINDOW)
    return np.stack([ky - 1, kx - 1], axis=1)


def valid_slots(h: int, w: int) -> np.ndarray:
    gy, gx = np.mgrid[0:h, 0:w]
    off = window_offsets()
    ny = gy.reshape(-1, 1) + off[:, 0]
    nx = gx.reshape(-1, 1) + off[:, 1]
    return (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)


def window_sample(features) -> WindowedKeys:
    features = as_tensor(features)
    if features.ndim != 3:
        raise DimensionError(f"window_sample: expected [D,h,w], got {features.shape}")
    d, h, w = features.shape
    padded = F.pad2d(features, 1)
    slots = [padded[:, ky:ky + h, kx:kx + w].reshape(d, 1, h * w)
             for ky in range(WINDOW) for kx in range(WINDOW)]
    keys = concat(slots, axis=1).transpose(2, 1, 0)  # [hw, 9, d]
    return WindowedKeys(keys, valid_slots(h, w), (h, w))


def cross_attend(query_field, kv_field, scale: float | None = None):
    """Each query pixel attends over the 3x3 window of ``kv_field`` around it.

    Returns (aggregated ``[D,h,w]``, AttentionWeights). Logits are divided by
    ``sqrt(D)`` unless ``scale`` is given.
    """
    query_field, kv_field = as_tensor(query_field), as_tensor(kv_field)
    if query_field.shape != kv_field.shape or query_field.ndim != 3:
        raise DimensionError(f"cross_attend: query {query_field.shape} vs keys {kv_field.shape}")
    d, h, w = query_field.shape
    win = window_sample(kv_field)
    queries = query_field.reshape(d, h * w).T.reshape(h * w, 1, d)
    logits = (win.keys * queries).sum(axis=2) * (1.0 / np.sqrt(d) if scale is None else scale)
    weights = F.softmax(logits, axis=1, mask=win.valid_mask)
    agg = (win.keys * weights.reshape(h * w, SLOTS, 1)).sum(axis=1)
    return agg.T.reshape(d, h, w), AttentionWeights(logits, weights, win.valid_mask, (h, w))


def extract_consistency(attn_ir_rgb: AttentionWeights, attn_rgb_ir: AttentionWeights,
                        best_index: np.ndarray | None = None) -> ConsistencyVectors:
    """For each IR pixel i take its strongest RGB slot (j = i + delta), then read the
    RGB->IR weight that j gives back to i (slot -delta in j's window).

    Slot selection is treated as constant; gradients flow through the gathered
    weights only. Passing ``best_index`` reuses a previous selection.
    """
    if attn_ir_rgb.size != attn_rgb_ir.size:
        raise DimensionError(f"extract_consistency: sizes {attn_ir_rgb.size} vs {attn_rgb_ir.size}")
    h, w = attn_ir_rgb.size
    if best_index is None:
        masked = np.where(attn_ir_rgb.valid_mask, attn_ir_rgb.weights.data, -np.inf)
        best = np.argmax(masked, axis=1)  # first max -> lowest slot on ties
    else:
        best = np.asarray(best_index, dtype=np.int64)
    rows = np.arange(h * w)
    delta = window_offsets()[best]
    gy, gx = np.divmod(rows, w)
    partner = (gy + delta[:, 0]) * w + (gx + delta[:, 1])
    v_ir = attn_ir_rgb.weights[rows, best]
    v_rgb = attn_rgb_ir.weights[partner, SLOTS - 1 - best]
    return ConsistencyVectors(v_ir, v_rgb, best)


def sc_loss(vectors: ConsistencyVectors) -> Tensor:
    """KL between the two consistency vectors after softmax over positions."""
    if vectors.v_ir_to_rgb.size == 0:
        raise DimensionError("sc_loss: empty consistency vectors")
    p = F.softmax(vectors.v_ir_to_rgb, axis=0)
    q = F.softmax(vectors.v_rgb_to_ir, axis=0)
    return F.kl_div(p, q)


def ism_forward(ir, rgb):
    """IR-queried aggregation of RGB plus the consistency loss.

    Returns (aggregated rgb ``[D,h,w]``, sc loss, ConsistencyVectors).
    """
    aggregated, attn_ir_rgb = cross_attend(ir, rgb)
    _, attn_rgb_ir = cross_attend(rgb, ir)
    vectors = extract_consistency(attn_ir_rgb, attn_rgb_ir)
    return aggregated, sc_loss(vectors), vectors
