"""
Shared value types: images, keypoints, pose maps, views, tuples and the
per-pixel maps the fusion stage works with. All of them are frozen; the
arrays they hold are marked read-only on construction.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import NUM_VIEWS
from .exceptions import ConfigError, DatasetError, InvalidImageError, ShapeMismatchError

SIMPLEX_TOLERANCE = 1e-6

# Segmentation labels
LABEL_BACKGROUND = 0
LABEL_ID = 1
LABEL_TOP = 2
LABEL_BOTTOM = 3
COMPONENT_LABELS = {"id": LABEL_ID, "top": LABEL_TOP, "bottom": LABEL_BOTTOM}


def _frozen(array: np.ndarray, dtype=np.float32) -> np.ndarray:
    array = np.array(array, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ImageGrid:
    """H×W×C image, C=3 for RGB and 1 for masks, values in [0, 1]."""
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 3 or values.shape[2] not in (1, 3):
            raise InvalidImageError(f"ImageGrid expects H×W×{{1,3}}, got shape {values.shape}")
        h, w = values.shape[:2]
        if h < 8 or w < 8 or h % 8 or w % 8:
            raise InvalidImageError(f"ImageGrid size {h}×{w} must be >= 8 and divisible by 8")
        if not np.isfinite(values).all():
            raise InvalidImageError("ImageGrid contains non-finite values")
        if values.min() < 0.0 or values.max() > 1.0:
            raise InvalidImageError(f"ImageGrid values outside [0,1]: [{values.min()}, {values.max()}]")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def to_tensor(self) -> torch.Tensor:
        """C×H×W float tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.values.transpose(2, 0, 1)).copy())

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor) -> "ImageGrid":
        array = tensor.detach().cpu().float().numpy()
        if array.ndim == 4:
            if array.shape[0] != 1:
                raise ShapeMismatchError("from_tensor expects a single image")
            array = array[0]
        return cls(array.transpose(1, 2, 0))


@dataclass(frozen=True)
class KeypointSet:
    """J joints as pixel coordinates (x, y) plus a visibility flag."""
    xy: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        xy = _frozen(self.xy, np.float64)
        visible = _frozen(self.visible, bool)
        if xy.ndim != 2 or xy.shape[1] != 2 or visible.shape != (xy.shape[0],):
            raise ShapeMismatchError(f"KeypointSet expects J×2 coords and J flags, got {xy.shape}, {visible.shape}")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "visible", visible)

    @property
    def num_joints(self) -> int:
        return self.xy.shape[0]

    def within(self, height: int, width: int) -> bool:
        pts = self.xy[self.visible]
        return bool(((pts[:, 0] >= 0) & (pts[:, 0] < width) & (pts[:, 1] >= 0) & (pts[:, 1] < height)).all())

    def to_dict(self) -> dict:
        return {"xy": self.xy.tolist(), "visible": self.visible.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "KeypointSet":
        return cls(np.asarray(data["xy"], dtype=np.float64).reshape(-1, 2), np.asarray(data["visible"], dtype=bool))


@dataclass(frozen=True)
class PoseMap:
    """H×W×J Gaussian heatmaps; `clamped` flags joints moved onto the border."""
    grid: np.ndarray
    clamped: tuple = ()

    def __post_init__(self):
        grid = _frozen(self.grid)
        if grid.ndim != 3:
            raise ShapeMismatchError(f"PoseMap expects H×W×J, got {grid.shape}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "clamped", tuple(bool(c) for c in self.clamped))

    @property
    def num_joints(self) -> int:
        return self.grid.shape[2]

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.grid.transpose(2, 0, 1)).copy())


@dataclass(frozen=True)
class SourceView:
    image: ImageGrid
    keypoints: KeypointSet
    pose_map: PoseMap
    view_id: str
    person_id: str = ""
    segmentation: np.ndarray | None = None

    def __post_init__(self):
        hw = (self.image.height, self.image.width)
        if self.pose_map.grid.shape[:2] != hw:
            raise ShapeMismatchError(f"pose map {self.pose_map.grid.shape[:2]} vs image {hw}")
        if self.segmentation is not None:
            seg = _frozen(self.segmentation, np.uint8)
            if seg.shape != hw:
                raise ShapeMismatchError(f"segmentation {seg.shape} vs image {hw}")
            object.__setattr__(self, "segmentation", seg)


@dataclass(frozen=True)
class ViewTuple:
    """
    Exactly three source views (repeats allowed) and a target pose. With a
    person_id set, every source must belong to that person; composed tuples
    leave it empty.
    """
    sources: tuple
    target_keypoints: KeypointSet
    target_pose_map: PoseMap
    person_id: str = ""
    target_image: ImageGrid | None = None

    def __post_init__(self):
        sources = tuple(self.sources)
        if len(sources) != NUM_VIEWS:
            raise ShapeMismatchError(f"ViewTuple needs exactly {NUM_VIEWS} sources, got {len(sources)}")
        shapes = {(s.image.height, s.image.width) for s in sources}
        shapes.add(self.target_pose_map.grid.shape[:2])
        if len(shapes) != 1:
            raise ShapeMismatchError(f"Tuple mixes resolutions: {sorted(shapes)}")
        if self.person_id:
            others = sorted({s.person_id for s in sources} - {self.person_id})
            if others:
                raise DatasetError(f"Tuple for {self.person_id} has sources from {others}")
        object.__setattr__(self, "sources", sources)


@dataclass(frozen=True)
class VisibilityMap:
    """H×W×1 map in target-pose coordinates; ground truth is binary."""
    grid: np.ndarray

    def __post_init__(self):
        grid = _frozen(self.grid)
        if grid.ndim == 2:
            grid = _frozen(grid[..., None])
        if grid.ndim != 3 or grid.shape[2] != 1:
            raise ShapeMismatchError(f"VisibilityMap expects H×W×1, got {grid.shape}")
        if grid.min() < 0.0 or grid.max() > 1.0:
            raise InvalidImageError("VisibilityMap values outside [0,1]")
        object.__setattr__(self, "grid", grid)

    @property
    def is_binary(self) -> bool:
        return bool(np.isin(self.grid, (0.0, 1.0)).all())


@dataclass(frozen=True)
class ARMap:
    """H'×W'×k appearance retrieval map; a probability simplex per pixel."""
    grid: np.ndarray

    def __post_init__(self):
        grid = _frozen(self.grid)
        if grid.ndim != 3 or grid.shape[2] != NUM_VIEWS:
            raise ShapeMismatchError(f"ARMap expects H'×W'×{NUM_VIEWS}, got {grid.shape}")
        if grid.min() < 0.0 or grid.max() > 1.0:
            raise InvalidImageError("ARMap weights outside [0,1]")
        sums = grid.astype(np.float64).sum(axis=2)
        if np.abs(sums - 1.0).max() > SIMPLEX_TOLERANCE:
            raise InvalidImageError(f"ARMap rows do not sum to 1 (max error {np.abs(sums - 1.0).max():.2e})")
        object.__setattr__(self, "grid", grid)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor) -> "ARMap":
        """Accepts (k,H',W') or (1,k,H',W')."""
        array = tensor.detach().cpu().float().numpy()
        if array.ndim == 4:
            array = array[0]
        return cls(array.transpose(1, 2, 0))

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.grid.transpose(2, 0, 1)).copy())


@dataclass(frozen=True)
class FeatureBundle:
    """
    Encodings of one view (batched): texture pyramid finest→coarsest, each
    B×C_l×H_l×W_l, plus the pose encoding B×C_p×H'×W' at ARMap resolution.
    """
    texture: tuple
    pose: torch.Tensor

    def __post_init__(self):
        texture = tuple(self.texture)
        for finer, coarser in zip(texture, texture[1:]):
            if coarser.shape[-2] * 2 != finer.shape[-2] or coarser.shape[-1] * 2 != finer.shape[-1]:
                raise ShapeMismatchError("texture pyramid levels must halve from finest to coarsest")
        object.__setattr__(self, "texture", texture)

    def shapes(self) -> tuple:
        return tuple(tuple(t.shape) for t in self.texture) + (tuple(self.pose.shape),)


@dataclass(frozen=True)
class LossWeights:
    alpha_rec: float = 1.0
    alpha_per: float = 0.25
    alpha_sty: float = 100.0
    alpha_adv: float = 0.1

    def __post_init__(self):
        values = [self.alpha_rec, self.alpha_per, self.alpha_sty, self.alpha_adv]
        if not all(np.isfinite(v) and v >= 0 for v in values):
            raise ConfigError(f"Loss weights must be finite and non-negative: {values}")
        if not any(v > 0 for v in values):
            raise ConfigError("At least one loss weight must be positive")

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        return cls(cfg.alpha_rec, cfg.alpha_per, cfg.alpha_sty, cfg.alpha_adv)


@dataclass(frozen=True)
class FusedBundle:
    texture: tuple
    pose: torch.Tensor = field(repr=False)
