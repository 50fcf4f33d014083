"""Semantic alignment: visual/text projections, similarity maps, mask supervision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import DimensionError
from .nn import Module, init_rng, uniform
from .tensor import Tensor, as_tensor, get_default_dtype, sigmoid

DEFAULT_SHARED_DIM = 256


class Projection(Module):
    """Affine map ``x @ weight + bias`` applied per pixel or per embedding row."""

    def __init__(self, d_in: int, d_out: int, seed: int = 0, name: str = "proj"):
        rng = init_rng(seed, name)
        self.weight = uniform(rng, (d_in, d_out), d_in, gain=1.0 / 3.0)
        self.bias = uniform(rng, (d_out,), d_in, gain=1.0 / 3.0)

    @classmethod
    def identity(cls, d: int) -> "Projection":
        proj = cls.__new__(cls)
        dtype = get_default_dtype()
        proj.weight = Tensor(np.eye(d, dtype=dtype), requires_grad=True)
        proj.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        return proj

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        return project(x, self)


def project(features, proj: Projection) -> Tensor:
    """Visual ``[D_in,h,w] -> [D_out,h,w]`` or semantic ``[n,D_in] -> [n,D_out]``."""
    features = as_tensor(features)
    if features.ndim == 3:
        d, h, w = features.shape
        if d != proj.d_in:
            raise DimensionError(f"project: features have {d} channels, projection expects {proj.d_in}")
        flat = features.reshape(d, h * w)
        out = F.matmul(proj.weight.T, flat) + proj.bias.reshape(-1, 1)
        return out.reshape(-1, h, w)
    if features.ndim == 2:
        if features.shape[1] != proj.d_in:
            raise DimensionError(
                f"project: rows have {features.shape[1]} dims, projection expects {proj.d_in}")
        return F.matmul(features, proj.weight) + proj.bias
    raise DimensionError(f"project: unsupported input shape {features.shape}")


class ProjectionSet(Module):
    """Three independent projections into the shared space."""

    def __init__(self, d_vis: int, d_text: int, d_shared: int = DEFAULT_SHARED_DIM,
                 seed: int = 0, prefix: str = "sam"):
        self.rgb = Projection(d_vis, d_shared, seed, f"{prefix}.rgb")
        self.ir = Projection(d_vis, d_shared, seed, f"{prefix}.ir")
        self.text = Projection(d_text, d_shared, seed, f"{prefix}.text")


@dataclass
class SimilarityMaps:
    scores: Tensor    # [n, h, w] in (0, 1), feature resolution
    response: Tensor  # [n, H, W], upsampled to image resolution


@dataclass
class MaskSet:
    masks: np.ndarray  # [n, H, W], binary, channel order = category order


def similarity_logits(visual, semantic) -> Tensor:
    visual, semantic = as_tensor(visual), as_tensor(semantic)
    if visual.ndim != 3 or semantic.ndim != 2 or visual.shape[0] != semantic.shape[1]:
        raise DimensionError(
            f"similarity: visual {visual.shape} and semantic {semantic.shape} disagree")
    d, h, w = visual.shape
    return F.matmul(semantic, visual.reshape(d, h * w)).reshape(-1, h, w)


def similarity(visual, semantic) -> Tensor:
    """Per-category scores sigmoid(<semantic_i, visual(y, x)>), shape ``[n, h, w]``."""
    return sigmoid(similarity_logits(visual, semantic))


def similarity_maps(visual, semantic, size: tuple[int, int]) -> SimilarityMaps:
    scores = similarity(visual, semantic)
    return SimilarityMaps(scores, F.upsample_bilinear(scores, *size))


def sa_loss(rgb_maps: SimilarityMaps, ir_maps: SimilarityMaps, rgb_masks, ir_masks) -> Tensor:
    """BCE(m_rgb, S_rgb) + BCE(m_ir, S_ir) on image-resolution response maps."""
    rgb_masks = rgb_masks.masks if isinstance(rgb_masks, MaskSet) else np.asarray(rgb_masks)
    ir_masks = ir_masks.masks if isinstance(ir_masks, MaskSet) else np.asarray(ir_masks)
    for maps, masks, name in ((rgb_maps, rgb_masks, "rgb"), (ir_maps, ir_masks, "ir")):
        if maps.response.shape != masks.shape:
            raise DimensionError(
                f"sa_loss: {name} response {maps.response.shape} vs masks {masks.shape}")
    return F.bce_loss(rgb_maps.response, rgb_masks) + F.bce_loss(ir_maps.response, ir_masks)


class SemanticAlignment(Module):
    def __init__(self, d_vis: int, d_text: int, d_shared: int = DEFAULT_SHARED_DIM, seed: int = 0):
        self.proj = ProjectionSet(d_vis, d_text, d_shared, seed)

    def __call__(self, f_rgb, f_ir, semantic, image_size: tuple[int, int]):
        """Returns (projected rgb, projected ir, rgb maps, ir maps)."""
        bar_rgb = self.proj.rgb(f_rgb)
        bar_ir = self.proj.ir(f_ir)
        bar_t = self.proj.text(semantic)
        return (bar_rgb, bar_ir, similarity_maps(bar_rgb, bar_t, image_size),
                similarity_maps(bar_ir, bar_t, image_size))
