# mvrepose/fusion.py

import logging

import torch
import torch.nn.functional as F

from .config import NUM_VIEWS
from .domain import ARMap, FeatureBundle, FusedBundle
from .exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)


def interp_weights(weights: torch.Tensor, size: tuple) -> torch.Tensor:
    """
    Bilinear (corner-aligned) resampling of B×k×H'×W' view weights to `size`,
    renormalised per pixel. Same size returns the input unchanged.
    """
    size = tuple(int(s) for s in size)
    if min(size) < 1:
        raise ShapeMismatchError(f"Interpolation target must be >= 1×1, got {size}")
    if tuple(weights.shape[-2:]) == size:
        return weights
    resized = F.interpolate(weights, size=size, mode="bilinear", align_corners=True).clamp_min(0.0)
    return resized / resized.sum(dim=1, keepdim=True)


def interp_armap(armap: ARMap, level_shape: tuple) -> ARMap:
    if tuple(armap.grid.shape[:2]) == tuple(level_shape):
        return armap
    weights = armap.to_tensor().unsqueeze(0).double()
    return ARMap.from_tensor(interp_weights(weights, level_shape))


def _as_weights(armap) -> torch.Tensor:
    if isinstance(armap, ARMap):
        return armap.to_tensor().unsqueeze(0)
    if armap.dim() == 3:
        return armap.unsqueeze(0)
    return armap


def fuse(bundles, armap) -> FusedBundle:
    """
    Per level, sum over views of the texture encoding times the view weight
    resampled to that level; the pose encoding uses the weights as given.
    `armap` is an ARMap or a (B×)k×H'×W' weight tensor.
    """
    bundles = list(bundles)
    if len(bundles) != NUM_VIEWS:
        raise ShapeMismatchError(f"fuse expects {NUM_VIEWS} bundles, got {len(bundles)}")
    reference = bundles[0].shapes()
    for b in bundles[1:]:
        if b.shapes() != reference:
            raise ShapeMismatchError(f"Bundle shapes differ: {b.shapes()} vs {reference}")

    weights = _as_weights(armap)
    weights = weights.to(dtype=bundles[0].pose.dtype, device=bundles[0].pose.device)
    if weights.shape[1] != NUM_VIEWS:
        raise ShapeMismatchError(f"ARMap has {weights.shape[1]} channels, expected {NUM_VIEWS}")
    if tuple(weights.shape[-2:]) != tuple(bundles[0].pose.shape[-2:]):
        raise ShapeMismatchError(
            f"ARMap {tuple(weights.shape[-2:])} does not match pose encoding {tuple(bundles[0].pose.shape[-2:])}")

    texture = []
    for level in range(len(bundles[0].texture)):
        w = interp_weights(weights, bundles[0].texture[level].shape[-2:])
        texture.append(sum(b.texture[level] * w[:, i:i + 1] for i, b in enumerate(bundles)))
    pose = sum(b.pose * weights[:, i:i + 1] for i, b in enumerate(bundles))
    return FusedBundle(tuple(texture), pose)


def permute_views(bundles, armap: torch.Tensor, order) -> tuple:
    """Reorder bundles and the matching ARMap channels together."""
    order = list(order)
    weights = _as_weights(armap)
    return [bundles[i] for i in order], weights[:, order]


def stack_bundles(bundles) -> FeatureBundle:
    """Concatenate along the batch axis (views processed in one pass)."""
    bundles = list(bundles)
    texture = tuple(torch.cat([b.texture[l] for b in bundles]) for l in range(len(bundles[0].texture)))
    return FeatureBundle(texture, torch.cat([b.pose for b in bundles]))


def split_bundle(bundle: FeatureBundle, parts: int) -> list:
    textures = [t.chunk(parts) for t in bundle.texture]
    poses = bundle.pose.chunk(parts)
    return [FeatureBundle(tuple(t[i] for t in textures), poses[i]) for i in range(parts)]
