"""
Procedural multi-view people: 2D articulated figures whose parts carry a
front and a back texture. Rendering is painter's order, so occlusion and
part-face visibility are known exactly for every pixel.
"""

import functools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from tqdm import tqdm

from .config import RunConfig
from .domain import (LABEL_BACKGROUND, LABEL_BOTTOM, LABEL_ID, LABEL_TOP, ImageGrid,
                     KeypointSet, SourceView, VisibilityMap)
from .exceptions import DatasetError, DegeneratePoseError, InvalidImageError, InvalidPoseError
from .preprocess import render_pose_map
from .utils import save_image, save_labels, write_json

logger = logging.getLogger(__name__)

JOINT_NAMES = (
    "head", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
)
NUM_JOINTS = len(JOINT_NAMES)

# Back to front.
PARTS = ("left_leg", "right_leg", "lower_garment", "torso", "upper_garment", "left_arm", "right_arm", "head")
PART_LABELS = {
    "head": LABEL_ID, "torso": LABEL_ID, "left_arm": LABEL_ID, "right_arm": LABEL_ID,
    "upper_garment": LABEL_TOP,
    "lower_garment": LABEL_BOTTOM, "left_leg": LABEL_BOTTOM, "right_leg": LABEL_BOTTOM,
}
FACES = ("front", "back")
PATTERNS = ("solid", "stripes", "checker", "glyphs")
GLYPH_ALPHABET = "ABCDEFGHJKLMNPRSTUVWXYZ0123456789"

# Degrees. Limb angles are measured from hanging straight down; positive is
# away from the body on that side. Elbows and knees are relative bends.
ANGLE_LIMITS = {
    "lean": (-20.0, 20.0),
    "r_shoulder": (-30.0, 160.0), "r_elbow": (-120.0, 120.0),
    "l_shoulder": (-30.0, 160.0), "l_elbow": (-120.0, 120.0),
    "r_hip": (-20.0, 60.0), "r_knee": (-90.0, 90.0),
    "l_hip": (-20.0, 60.0), "l_knee": (-90.0, 90.0),
}
ANGLE_NAMES = tuple(ANGLE_LIMITS)
ZOOM_RANGE = (0.5, 2.0)

# Body proportions in body units; a figure stands about eight units tall.
BASE_LENGTHS = {
    "head_radius": 0.5, "neck": 0.3, "torso": 3.0,
    "shoulder_width": 1.9, "hip_width": 1.3,
    "upper_arm": 1.5, "forearm": 1.3, "thigh": 1.9, "shin": 1.8,
    "arm_thickness": 0.45, "leg_thickness": 0.6,
}
FIGURE_UNITS = 8.0
CANVAS_FILL = 0.45


@dataclass(frozen=True)
class Texture:
    pattern: str
    color_a: tuple
    color_b: tuple
    period: float = 0.5
    angle: float = 0.0
    text: str = ""

    def sample(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Colour at body-unit coordinates (u along the part, v across it)."""
        a = np.asarray(self.color_a, dtype=np.float32)
        b = np.asarray(self.color_b, dtype=np.float32)
        if self.pattern == "solid":
            return np.broadcast_to(a, (len(u), 3)).copy()
        if self.pattern == "stripes":
            t = u * math.cos(self.angle) + v * math.sin(self.angle)
            mask = np.floor(t / self.period) % 2 == 0
        elif self.pattern == "checker":
            mask = (np.floor(u / self.period) + np.floor(v / self.period)) % 2 == 0
        elif self.pattern == "glyphs":
            tile = _glyph_tile(self.text)
            th, tw = tile.shape
            scale = th / 0.9
            ty = np.floor(u * scale).astype(np.int64) % th
            tx = np.floor(v * scale).astype(np.int64) % tw
            mask = tile[ty, tx] > 0
        else:
            raise ValueError(f"Unknown texture pattern '{self.pattern}'")
        return np.where(mask[:, None], a, b)


@functools.lru_cache(maxsize=512)
def _glyph_tile(text: str) -> np.ndarray:
    tile = np.zeros((20, 12 * len(text) + 4), dtype=np.uint8)
    cv2.putText(tile, text, (2, 16), cv2.FONT_HERSHEY_SIMPLEX, 0.55, 255, 1, cv2.LINE_8)
    tile.setflags(write=False)
    return tile


@dataclass(frozen=True)
class FigureSpec:
    seed: int
    lengths: tuple
    textures: tuple
    background: tuple = (0.92, 0.92, 0.92)

    def length(self, name: str) -> float:
        return dict(self.lengths)[name]

    def texture(self, part: str, face: str) -> Texture:
        for name, front, back in self.textures:
            if name == part:
                return front if face == "front" else back
        raise KeyError(part)


@dataclass(frozen=True)
class PoseSpec:
    angles: tuple
    facing: str = "front"
    zoom: float = 1.0
    translation: tuple = (0.0, 0.0)
    flipped_parts: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "flipped_parts", frozenset(self.flipped_parts))
        self.validate()

    def validate(self) -> None:
        if len(self.angles) != len(ANGLE_NAMES):
            raise InvalidPoseError(f"Expected {len(ANGLE_NAMES)} angles, got {len(self.angles)}")
        for name, value in zip(ANGLE_NAMES, self.angles):
            lo, hi = ANGLE_LIMITS[name]
            if not lo <= value <= hi:
                raise InvalidPoseError(f"Angle {name}={value} outside [{lo}, {hi}]")
        if self.facing not in FACES:
            raise InvalidPoseError(f"facing must be one of {FACES}")
        if not ZOOM_RANGE[0] <= self.zoom <= ZOOM_RANGE[1]:
            raise InvalidPoseError(f"zoom {self.zoom} outside {ZOOM_RANGE}")
        unknown = self.flipped_parts - set(PARTS)
        if unknown:
            raise InvalidPoseError(f"Unknown parts {sorted(unknown)}")

    def angle(self, name: str) -> float:
        return self.angles[ANGLE_NAMES.index(name)]

    def face_of(self, part: str) -> str:
        front = (self.facing == "front") != (part in self.flipped_parts)
        return "front" if front else "back"

    @classmethod
    def neutral(cls, **kwargs) -> "PoseSpec":
        return cls(angles=tuple(0.0 for _ in ANGLE_NAMES), **kwargs)

    def with_angles(self, **angles) -> "PoseSpec":
        values = [angles.get(name, value) for name, value in zip(ANGLE_NAMES, self.angles)]
        return PoseSpec(tuple(values), self.facing, self.zoom, self.translation, self.flipped_parts)

    def to_dict(self) -> dict:
        return {
            "angles": dict(zip(ANGLE_NAMES, self.angles)),
            "facing": self.facing,
            "zoom": self.zoom,
            "translation": list(self.translation),
            "flipped_parts": sorted(self.flipped_parts),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PoseSpec":
        return cls(tuple(data["angles"][name] for name in ANGLE_NAMES), data["facing"], data["zoom"],
                   tuple(data["translation"]), frozenset(data["flipped_parts"]))


def _random_texture(rng: np.random.Generator) -> Texture:
    pattern = str(rng.choice(PATTERNS))
    color_a = tuple(float(c) for c in rng.uniform(0.05, 0.95, 3))
    color_b = tuple(float(c) for c in rng.uniform(0.05, 0.95, 3))
    text = "".join(rng.choice(list(GLYPH_ALPHABET), 4)) if pattern == "glyphs" else ""
    return Texture(pattern, color_a, color_b, float(rng.uniform(0.3, 0.8)),
                   float(rng.choice([0.0, math.pi / 4, math.pi / 2])), text)


def _distinct(front: Texture, back: Texture) -> bool:
    return np.abs(np.subtract(front.color_a, back.color_a)).mean() > 0.15


def generate_figure(seed: int) -> FigureSpec:
    """Deterministic figure: jittered proportions and a front/back texture per part."""
    rng = np.random.default_rng(seed)
    lengths = tuple((name, float(base * rng.uniform(0.9, 1.1))) for name, base in BASE_LENGTHS.items())
    textures = []
    for part in PARTS:
        front = _random_texture(rng)
        back = _random_texture(rng)
        while not _distinct(front, back):
            back = _random_texture(rng)
        textures.append((part, front, back))
    return FigureSpec(int(seed), lengths, tuple(textures))


def sample_pose(rng: np.random.Generator, flip_probability: float = 0.0,
                zoom_range: tuple = (0.9, 1.8)) -> PoseSpec:
    angles = tuple(float(rng.uniform(*ANGLE_LIMITS[name])) for name in ANGLE_NAMES)
    facing = str(rng.choice(FACES))
    zoom = float(rng.uniform(*zoom_range))
    translation = tuple(float(t) for t in rng.uniform(-0.06, 0.06, 2))
    flipped = frozenset(part for part in ("left_arm", "right_arm") if rng.random() < flip_probability)
    return PoseSpec(angles, facing, zoom, translation, flipped)


@dataclass(frozen=True)
class _Shape:
    part: str
    kind: str           # "poly" or "circle"
    points: np.ndarray  # polygon vertices, or the circle centre
    radius: float
    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    u0: float = 0.0

    def rasterize(self, height: int, width: int) -> np.ndarray:
        mask = np.zeros((height, width), dtype=np.uint8)
        if self.kind == "poly":
            pts = np.round(self.points * 16).astype(np.int32)
            cv2.fillPoly(mask, [pts], 1, lineType=cv2.LINE_8, shift=4)
        else:
            centre = (int(round(self.points[0] * 16)), int(round(self.points[1] * 16)))
            cv2.circle(mask, centre, int(round(self.radius * 16)), 1, -1, lineType=cv2.LINE_8, shift=4)
        return mask.astype(bool)


@dataclass(frozen=True)
class Rendering:
    """Image plus per-pixel part index (-1 background) and face index (0 front, 1 back)."""
    image: np.ndarray
    part_map: np.ndarray
    face_map: np.ndarray
    keypoints: KeypointSet

    @property
    def segmentation(self) -> np.ndarray:
        lookup = np.array([PART_LABELS[p] for p in PARTS] + [LABEL_BACKGROUND], dtype=np.uint8)
        return lookup[self.part_map]

    def part_mask(self, part: str) -> np.ndarray:
        return self.part_map == PARTS.index(part)

    def face_codes(self) -> np.ndarray:
        return np.where(self.part_map >= 0, self.part_map * 2 + self.face_map, -1)


def _skeleton(fig: FigureSpec, pose: PoseSpec, height: int, width: int):
    unit = min(height, width) * CANVAS_FILL / FIGURE_UNITS * pose.zoom
    L = dict(fig.lengths)
    lean = math.radians(pose.angle("lean"))
    up = np.array([math.sin(lean), -math.cos(lean)])
    down = -up
    right = np.array([math.cos(lean), math.sin(lean)])
    # image-x sign of each body side: facing the camera puts the right side on the image left
    side = {"r": -1.0, "l": 1.0} if pose.facing == "front" else {"r": 1.0, "l": -1.0}

    pelvis = np.array([width / 2.0 + pose.translation[0] * width,
                       height / 2.0 + pose.translation[1] * height]) + down * 0.3 * unit
    neck = pelvis + up * L["torso"] * unit
    joints = {
        "neck": neck,
        "head": neck + up * (L["neck"] + L["head_radius"]) * unit,
    }

    def direction(theta_deg: float, sgn: float) -> np.ndarray:
        theta = math.radians(theta_deg)
        return down * math.cos(theta) + right * sgn * math.sin(theta)

    for k in ("r", "l"):
        joints[f"{k}_shoulder"] = neck + right * side[k] * L["shoulder_width"] / 2 * unit
        joints[f"{k}_hip"] = pelvis + right * side[k] * L["hip_width"] / 2 * unit
        shoulder, elbow_bend = pose.angle(f"{k}_shoulder"), pose.angle(f"{k}_elbow")
        joints[f"{k}_elbow"] = joints[f"{k}_shoulder"] + direction(shoulder, side[k]) * L["upper_arm"] * unit
        joints[f"{k}_wrist"] = joints[f"{k}_elbow"] + direction(shoulder + elbow_bend, side[k]) * L["forearm"] * unit
        hip, knee_bend = pose.angle(f"{k}_hip"), pose.angle(f"{k}_knee")
        joints[f"{k}_knee"] = joints[f"{k}_hip"] + direction(hip, side[k]) * L["thigh"] * unit
        joints[f"{k}_ankle"] = joints[f"{k}_knee"] + direction(hip + knee_bend, side[k]) * L["shin"] * unit

    for name in ("upper_arm", "forearm", "thigh", "shin", "torso"):
        if L[name] * unit < 1.0:
            raise DegeneratePoseError(f"{name} shrinks to {L[name] * unit:.2f}px at zoom {pose.zoom} on {width}×{height}")
    frame = {"unit": unit, "up": up, "down": down, "right": right, "side": side, "pelvis": pelvis}
    return joints, frame


def _segment_shapes(part, a, b, thickness, unit, u0):
    d = b - a
    length = float(np.linalg.norm(d))
    d = d / length
    n = np.array([-d[1], d[0]])
    half = thickness * unit / 2
    quad = np.stack([a + n * half, b + n * half, b - n * half, a - n * half])
    return [
        _Shape(part, "poly", quad, 0.0, a, d, n, u0),
        _Shape(part, "circle", b, half, a, d, n, u0),
    ], u0 + length / unit


def _build_shapes(fig: FigureSpec, joints: dict, frame: dict) -> list:
    L = dict(fig.lengths)
    unit, up, down, right = frame["unit"], frame["up"], frame["down"], frame["right"]
    side, pelvis = frame["side"], frame["pelvis"]
    shapes = {part: [] for part in PARTS}

    for part, k in (("left_leg", "l"), ("right_leg", "r")):
        cap = _Shape(part, "circle", joints[f"{k}_hip"], L["leg_thickness"] * unit / 2,
                     joints[f"{k}_hip"], down, right)
        upper, u = _segment_shapes(part, joints[f"{k}_hip"], joints[f"{k}_knee"], L["leg_thickness"], unit, 0.0)
        lower, _ = _segment_shapes(part, joints[f"{k}_knee"], joints[f"{k}_ankle"], L["leg_thickness"] * 0.9, unit, u)
        shapes[part] = [cap] + upper + lower

    for part, k in (("left_arm", "l"), ("right_arm", "r")):
        cap = _Shape(part, "circle", joints[f"{k}_shoulder"], L["arm_thickness"] * unit / 2,
                     joints[f"{k}_shoulder"], down, right)
        upper, u = _segment_shapes(part, joints[f"{k}_shoulder"], joints[f"{k}_elbow"], L["arm_thickness"], unit, 0.0)
        lower, _ = _segment_shapes(part, joints[f"{k}_elbow"], joints[f"{k}_wrist"], L["arm_thickness"] * 0.85, unit, u)
        shapes[part] = [cap] + upper + lower

    neck = joints["neck"]
    torso = np.stack([joints["r_shoulder"], joints["l_shoulder"], joints["l_hip"], joints["r_hip"]])
    shapes["torso"] = [_Shape("torso", "poly", torso, 0.0, neck, down, right)]

    waist = pelvis + up * 0.25 * L["torso"] * unit
    collar = neck + down * 0.5 * unit
    garment = []
    for k in ("r", "l"):
        garment.append((k, collar + right * side[k] * 0.25 * L["shoulder_width"] * unit,
                        joints[f"{k}_shoulder"] + right * side[k] * 0.1 * unit + down * 0.1 * unit,
                        waist + right * side[k] * L["hip_width"] / 2 * 1.1 * unit))
    (_, collar_r, shoulder_r, waist_r), (_, collar_l, shoulder_l, waist_l) = garment
    upper = np.stack([collar_r, collar_l, shoulder_l, waist_l, waist_r, shoulder_r])
    shapes["upper_garment"] = [_Shape("upper_garment", "poly", upper, 0.0, neck, down, right)]

    lower_pts = [waist + right * side["l"] * L["hip_width"] / 2 * 1.1 * unit]
    for k in ("l", "r"):
        thigh = joints[f"{k}_hip"] + (joints[f"{k}_knee"] - joints[f"{k}_hip"]) * 0.45
        along = joints[f"{k}_knee"] - joints[f"{k}_hip"]
        along = along / np.linalg.norm(along)
        across = np.array([-along[1], along[0]]) * L["leg_thickness"] * 0.6 * unit
        outer, inner = (thigh + across, thigh - across)
        if np.dot(across, right * side[k]) < 0:
            outer, inner = inner, outer
        lower_pts.extend([outer, inner] if k == "l" else [inner, outer])
        if k == "l":
            lower_pts.append(pelvis + down * 0.35 * unit)
    lower_pts.append(waist + right * side["r"] * L["hip_width"] / 2 * 1.1 * unit)
    shapes["lower_garment"] = [_Shape("lower_garment", "poly", np.stack(lower_pts), 0.0, waist, down, right)]

    shapes["head"] = [_Shape("head", "circle", joints["head"], L["head_radius"] * unit,
                             joints["head"], down, right)]
    return [shape for part in PARTS for shape in shapes[part]]


def render_layers(fig: FigureSpec, pose: PoseSpec, height: int, width: int) -> Rendering:
    """Paint the figure back to front and keep the per-pixel part and face indices."""
    if height < 8 or width < 8 or height % 8 or width % 8:
        raise InvalidImageError(f"Render size {height}×{width} must be >= 8 and divisible by 8")
    joints, frame = _skeleton(fig, pose, height, width)
    shapes = _build_shapes(fig, joints, frame)

    shape_map = np.full((height, width), -1, dtype=np.int32)
    for idx, shape in enumerate(shapes):
        shape_map[shape.rasterize(height, width)] = idx

    image = np.empty((height, width, 3), dtype=np.float32)
    image[:] = np.asarray(fig.background, dtype=np.float32)
    part_map = np.full((height, width), -1, dtype=np.int32)
    face_map = np.full((height, width), -1, dtype=np.int32)
    for idx in np.unique(shape_map[shape_map >= 0]):
        shape = shapes[idx]
        ys, xs = np.nonzero(shape_map == idx)
        rel = (np.stack([xs, ys], axis=1).astype(np.float64) - shape.origin) / frame["unit"]
        u = rel @ shape.axis_u + shape.u0
        v = rel @ shape.axis_v
        face = pose.face_of(shape.part)
        image[ys, xs] = fig.texture(shape.part, face).sample(u, v)
        part_map[ys, xs] = PARTS.index(shape.part)
        face_map[ys, xs] = FACES.index(face)

    xy = np.rint(np.stack([joints[name] for name in JOINT_NAMES]))
    visible = (xy[:, 0] >= 0) & (xy[:, 0] < width) & (xy[:, 1] >= 0) & (xy[:, 1] < height)
    return Rendering(np.clip(image, 0.0, 1.0), part_map, face_map, KeypointSet(xy, visible))


def render_view(fig: FigureSpec, pose: PoseSpec, height: int, width: int, sigma: float = 2.0,
                view_id: str = "", person_id: str = "") -> SourceView:
    rendering = render_layers(fig, pose, height, width)
    pose_map = render_pose_map(rendering.keypoints, height, width, sigma)
    return SourceView(ImageGrid(rendering.image), rendering.keypoints, pose_map, view_id, person_id,
                      rendering.segmentation)


def visibility_between(source: Rendering, target: Rendering) -> VisibilityMap:
    """1 where the target shows a part-face that the source also shows somewhere."""
    shown = np.unique(source.face_codes())
    shown = shown[shown >= 0]
    target_codes = target.face_codes()
    visible = np.isin(target_codes, shown) & (target_codes >= 0)
    return VisibilityMap(visible.astype(np.float32)[..., None])


def ground_truth_visibility(fig: FigureSpec, source: PoseSpec, target: PoseSpec,
                            height: int, width: int) -> VisibilityMap:
    return visibility_between(render_layers(fig, source, height, width),
                              render_layers(fig, target, height, width))


def figure_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def person_id(index: int) -> str:
    return f"p{index:04d}"


def view_id(index: int) -> str:
    return f"v{index:02d}"


def _render_person(cfg: RunConfig, out_dir: Path, index: int) -> list:
    seed = figure_seed(cfg.seed, index)
    fig = generate_figure(seed)
    rng = np.random.default_rng([cfg.seed, index, 1])
    pid = person_id(index)
    size = cfg.image_size
    records = []
    for v in range(cfg.views_per_figure):
        for _ in range(100):
            pose = sample_pose(rng, cfg.flip_probability)
            try:
                rendering = render_layers(fig, pose, size, size)
                break
            except DegeneratePoseError:
                continue
        else:
            raise DatasetError(f"Could not sample a renderable pose for {pid}")
        vid = view_id(v)
        stem = f"{pid}_{vid}"
        save_image(rendering.image, out_dir / "images" / f"{stem}.png")
        save_labels(rendering.segmentation, out_dir / "segs" / f"{stem}.png")
        write_json({
            "person_id": pid,
            "view_id": vid,
            "figure_seed": seed,
            "keypoints": rendering.keypoints.to_dict(),
            "facing": pose.facing,
            "zoom": pose.zoom,
            "pose": pose.to_dict(),
        }, out_dir / "meta" / f"{stem}.json")
        records.append({
            "person_id": pid,
            "view_id": vid,
            "image": f"images/{stem}.png",
            "segmentation": f"segs/{stem}.png",
            "meta": f"meta/{stem}.json",
        })
    return records


def build_dataset(cfg: RunConfig, out_dir: str | Path) -> Path:
    """
    Render cfg.n_figures × cfg.views_per_figure views into out_dir and write
    manifest.jsonl (one line per view, grouped by person). Deterministic in
    cfg.seed; figures render in parallel, the manifest has a single writer.
    """
    if cfg.views_per_figure < 2:
        raise DatasetError("views_per_figure must be >= 2")
    out_dir = Path(out_dir)
    try:
        for sub in ("images", "segs", "meta"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"Output directory not writable: {out_dir} ({e})")

    logger.info(f"Rendering {cfg.n_figures} figures × {cfg.views_per_figure} views at {cfg.image_size}px into {out_dir}")
    workers = max(1, cfg.num_workers)
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            jobs = pool.map(lambda i: _render_person(cfg, out_dir, i), range(cfg.n_figures))
            groups = list(tqdm(jobs, total=cfg.n_figures, desc="synth", leave=False))
    except OSError as e:
        raise DatasetError(f"Failed writing dataset to {out_dir}: {e}")

    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for records in groups:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    write_json({
        "image_size": cfg.image_size,
        "num_joints": NUM_JOINTS,
        "n_figures": cfg.n_figures,
        "views_per_figure": cfg.views_per_figure,
        "seed": cfg.seed,
    }, out_dir / "dataset.json")
    logger.info(f"Wrote {sum(len(g) for g in groups)} views in {len(groups)} person groups")
    return manifest
