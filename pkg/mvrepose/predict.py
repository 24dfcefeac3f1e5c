# mvrepose/predict.py

import logging

import numpy as np
import torch
import torch.nn.functional as F

from .config import NUM_VIEWS
from .domain import ARMap, ImageGrid, KeypointSet, PoseMap, SourceView, ViewTuple
from .exceptions import ShapeMismatchError
from .model import MultiViewReposer
from .mvf import rgb_visualize
from .preprocess import mask_view, resize_grid
from .utils import side_by_side

logger = logging.getLogger(__name__)

MIXMATCH_COMPONENTS = ("id", "top", "bottom")


def _device(model: MultiViewReposer) -> torch.device:
    return next(model.parameters()).device


def tuple_tensors(view_tuple: ViewTuple, device=None) -> tuple:
    images = [s.image.to_tensor().unsqueeze(0).to(device) for s in view_tuple.sources]
    poses = [s.pose_map.to_tensor().unsqueeze(0).to(device) for s in view_tuple.sources]
    return images, poses, view_tuple.target_pose_map.to_tensor().unsqueeze(0).to(device)


@torch.no_grad()
def generate(model: MultiViewReposer, view_tuple: ViewTuple, weights: torch.Tensor | None = None) -> tuple:
    """Reposed image and the ARMap it was fused with."""
    if not isinstance(view_tuple, ViewTuple):
        raise ShapeMismatchError(f"generate expects a ViewTuple, got {type(view_tuple).__name__}")
    if view_tuple.sources[0].image.height != model.cfg.image_size:
        raise ShapeMismatchError(
            f"Tuple resolution {view_tuple.sources[0].image.height} does not match model {model.cfg.image_size}")
    model.eval()
    device = _device(model)
    images, poses, target_pose = tuple_tensors(view_tuple, device)
    if weights is not None:
        weights = weights.to(device)
    out = model.generate(images, poses, target_pose, weights)
    return ImageGrid.from_tensor(out.image.clamp(0.0, 1.0)), ARMap.from_tensor(out.weights)


@torch.no_grad()
def backbone_generate(model: MultiViewReposer, view: SourceView, target_pose: PoseMap) -> ImageGrid:
    """Single-view reposing with the backbone alone."""
    model.eval()
    device = _device(model)
    image = model.backbone.generate(view.image.to_tensor().unsqueeze(0).to(device),
                                    view.pose_map.to_tensor().unsqueeze(0).to(device),
                                    target_pose.to_tensor().unsqueeze(0).to(device))
    return ImageGrid.from_tensor(image.clamp(0.0, 1.0))


def armap_from_visibility(maps: list, size: int, eps: float = 1e-3) -> torch.Tensor:
    """
    View weights from per-source visibility maps instead of the fusion
    network: resize each map to size×size, add eps, normalise across views.
    Returns a 1×3×size×size tensor.
    """
    if len(maps) != NUM_VIEWS:
        raise ShapeMismatchError(f"Need {NUM_VIEWS} visibility maps, got {len(maps)}")
    grids = np.stack([resize_grid(m.grid, size, size)[..., 0] for m in maps]).clip(0.0, 1.0) + eps
    weights = torch.from_numpy(grids / grids.sum(axis=0, keepdims=True)).float()
    return weights.unsqueeze(0)


def mixmatch_tuple(id_view: SourceView, top_view: SourceView, bottom_view: SourceView,
                   target_keypoints: KeypointSet, target_pose: PoseMap) -> ViewTuple:
    """Slot 1 keeps the id region of id_view, slot 2 the top region, slot 3 the bottom region."""
    sources = tuple(mask_view(view, component)
                    for view, component in zip((id_view, top_view, bottom_view), MIXMATCH_COMPONENTS))
    return ViewTuple(sources, target_keypoints, target_pose)


def mixmatch_compose(model: MultiViewReposer, id_view: SourceView, top_view: SourceView, bottom_view: SourceView,
                     target_keypoints: KeypointSet, target_pose: PoseMap) -> tuple:
    if model.cfg.task != "mixmatch":
        logger.warning("Composing with a checkpoint that was not trained with task=mixmatch")
    view_tuple = mixmatch_tuple(id_view, top_view, bottom_view, target_keypoints, target_pose)
    return generate(model, view_tuple)


def visualization_grid(view_tuple: ViewTuple, output: ImageGrid, armap: ARMap, used_views: int = NUM_VIEWS) -> np.ndarray:
    """[source 1 | source 2 | source 3 | target | output | ARMap] as one H×W×3 row."""
    h, w = output.height, output.width
    target = view_tuple.target_image.values if view_tuple.target_image is not None else np.zeros((h, w, 3))
    painted = resize_grid(rgb_visualize(armap, used_views).values, h, w, nearest=True)
    panels = [s.image.values for s in view_tuple.sources] + [target, output.values, painted]
    return side_by_side(panels)
