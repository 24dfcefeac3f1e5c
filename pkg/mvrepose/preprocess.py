# mvrepose/preprocess.py

import logging

import cv2
import numpy as np

from .domain import (COMPONENT_LABELS, LABEL_BACKGROUND, ImageGrid, KeypointSet,
                     PoseMap, SourceView)
from .exceptions import ConfigError, MissingSegmentationError, ShapeMismatchError

logger = logging.getLogger(__name__)


def render_pose_map(kp: KeypointSet, height: int, width: int, sigma: float) -> PoseMap:
    """
    One Gaussian channel per joint, exp(-d^2 / (2 sigma^2)) around the joint.
    Invisible joints give an all-zero channel. Visible joints outside the
    image are clamped to the border and flagged in `PoseMap.clamped`.
    """
    if sigma <= 0:
        raise ConfigError(f"pose sigma must be > 0, got {sigma}")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    grid = np.zeros((height, width, kp.num_joints), dtype=np.float32)
    clamped = []
    for j, ((x, y), visible) in enumerate(zip(kp.xy, kp.visible)):
        if not visible:
            clamped.append(False)
            continue
        cx = min(max(x, 0.0), width - 1.0)
        cy = min(max(y, 0.0), height - 1.0)
        if (cx, cy) != (x, y):
            logger.warning(f"Joint {j} at ({x:.1f}, {y:.1f}) outside {width}×{height}, clamped to border")
        clamped.append((cx, cy) != (x, y))
        grid[..., j] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))
    return PoseMap(grid, tuple(clamped))


def pose_map_peaks(pose_map: PoseMap) -> KeypointSet:
    """Inverse of render_pose_map for integer joints: per-channel argmax."""
    h, w, j = pose_map.grid.shape
    flat = pose_map.grid.reshape(h * w, j)
    idx = flat.argmax(axis=0)
    visible = flat.max(axis=0) > 0
    xy = np.stack([idx % w, idx // w], axis=1).astype(np.float64)
    return KeypointSet(xy, visible)


def component_masks(segmentation: np.ndarray) -> dict:
    """Boolean mask per fashion component (id, top, bottom)."""
    return {name: segmentation == label for name, label in COMPONENT_LABELS.items()}


def foreground_mask(segmentation: np.ndarray) -> np.ndarray:
    return segmentation != LABEL_BACKGROUND


def mask_view(view: SourceView, component: str) -> SourceView:
    """Zero every pixel of the view outside one component region."""
    if view.segmentation is None:
        raise MissingSegmentationError(f"View {view.person_id}/{view.view_id} has no segmentation")
    if component not in COMPONENT_LABELS:
        raise ConfigError(f"Unknown component '{component}'")
    keep = component_masks(view.segmentation)[component]
    values = view.image.values * keep[..., None]
    return SourceView(ImageGrid(values), view.keypoints, view.pose_map, f"{view.view_id}:{component}",
                      view.person_id, np.where(keep, view.segmentation, LABEL_BACKGROUND))


def resize_grid(values: np.ndarray, height: int, width: int, nearest: bool = False) -> np.ndarray:
    """Resize an H×W×C float array with OpenCV, keeping the channel axis."""
    if values.ndim != 3:
        raise ShapeMismatchError(f"resize_grid expects H×W×C, got {values.shape}")
    interpolation = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    resized = cv2.resize(np.ascontiguousarray(values, dtype=np.float32), (width, height),
                         interpolation=interpolation)
    if resized.ndim == 2:
        resized = resized[..., None]
    return resized
