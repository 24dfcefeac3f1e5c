"""
Access to a rendered dataset directory: SourceViews from disk, the figure
and pose specs behind them (for analytic visibility), and torch datasets
for visibility pre-training and tuple training.
"""

import json
import logging
from itertools import permutations
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import Dataset

from .config import RunConfig
from .domain import COMPONENT_LABELS, KeypointSet, SourceView, ViewTuple, VisibilityMap
from .exceptions import ConfigMismatchError, DatasetError
from .preprocess import mask_view, render_pose_map
from .synthetic import PoseSpec, generate_figure, render_layers, visibility_between
from .tuples import TupleEntry, group_views
from .utils import load_image, load_labels, read_json

logger = logging.getLogger(__name__)

COMPONENTS = tuple(COMPONENT_LABELS)


class ViewStore:
    def __init__(self, data_dir: str | Path, pose_sigma: float = 2.0):
        self.root = Path(data_dir)
        manifest = self.root / "manifest.jsonl"
        if not manifest.is_file():
            raise DatasetError(f"Dataset manifest not found: {manifest}")
        with open(manifest, encoding="utf-8") as f:
            self.records = [json.loads(line) for line in f if line.strip()]
        self.info = read_json(self.root / "dataset.json")
        self.pose_sigma = pose_sigma
        self._index = {(r["person_id"], r["view_id"]): r for r in self.records}
        self._views = {}
        self._renderings = {}
        logger.info(f"Opened dataset {self.root}: {len(self.records)} views, {len(self.groups())} persons")

    @property
    def image_size(self) -> int:
        return int(self.info["image_size"])

    def check_config(self, cfg: RunConfig) -> None:
        if cfg.image_size != self.image_size or cfg.num_joints != int(self.info["num_joints"]):
            raise ConfigMismatchError(
                f"Dataset {self.root} is {self.image_size}px / {self.info['num_joints']} joints, "
                f"config expects {cfg.image_size}px / {cfg.num_joints} joints")

    def groups(self) -> dict:
        return group_views(self.records)

    def record(self, person_id: str, view_id: str) -> dict:
        try:
            return self._index[(person_id, view_id)]
        except KeyError:
            raise DatasetError(f"View {person_id}/{view_id} not in {self.root}")

    def resolve(self, stem: str) -> tuple:
        """'p0003_v01' → ('p0003', 'v01')"""
        person_id, _, view_id = Path(stem).stem.rpartition("_")
        self.record(person_id, view_id)
        return person_id, view_id

    def meta(self, person_id: str, view_id: str) -> dict:
        return read_json(self.root / self.record(person_id, view_id)["meta"])

    def view(self, person_id: str, view_id: str) -> SourceView:
        key = (person_id, view_id)
        if key not in self._views:
            record = self.record(person_id, view_id)
            image = load_image(self.root / record["image"])
            keypoints = KeypointSet.from_dict(self.meta(person_id, view_id)["keypoints"])
            pose_map = render_pose_map(keypoints, image.height, image.width, self.pose_sigma)
            labels = load_labels(self.root / record["segmentation"])
            self._views[key] = SourceView(image, keypoints, pose_map, view_id, person_id, labels)
        return self._views[key]

    def rendering(self, person_id: str, view_id: str):
        key = (person_id, view_id)
        if key not in self._renderings:
            meta = self.meta(person_id, view_id)
            figure = generate_figure(meta["figure_seed"])
            self._renderings[key] = render_layers(figure, PoseSpec.from_dict(meta["pose"]),
                                                  self.image_size, self.image_size)
        return self._renderings[key]

    def visibility(self, person_id: str, source: str, target: str) -> VisibilityMap:
        return visibility_between(self.rendering(person_id, source), self.rendering(person_id, target))

    def foreground(self, person_id: str, view_id: str) -> torch.Tensor:
        """1×H×W float mask of the pixels the figure covers in this view."""
        codes = self.rendering(person_id, view_id).face_codes()
        return torch.from_numpy((codes >= 0).astype(np.float32)).unsqueeze(0)

    def view_tuple(self, entry: TupleEntry) -> ViewTuple:
        sources = [self.view(entry.person_id, v) for v in entry.sources]
        target = self.view(entry.person_id, entry.target)
        return ViewTuple(tuple(sources), target.keypoints, target.pose_map, entry.person_id, target.image)


def view_tensors(view: SourceView) -> tuple:
    return view.image.to_tensor(), view.pose_map.to_tensor()


def visibility_pairs(store: ViewStore, persons, limit: int = 0, seed: int = 0) -> list:
    """All ordered (person, source, target) pairs with source != target, optionally subsampled."""
    groups = store.groups()
    pairs = [(pid, s, t) for pid in sorted(persons) for s, t in permutations(groups[pid], 2)]
    if limit and len(pairs) > limit:
        keep = np.sort(np.random.default_rng(seed).choice(len(pairs), size=limit, replace=False))
        pairs = [pairs[i] for i in keep]
    return pairs


class VisibilityPairDataset(Dataset):
    def __init__(self, store: ViewStore, pairs: list):
        self.store = store
        self.pairs = list(pairs)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, index: int) -> dict:
        person_id, source, target = self.pairs[index]
        image, pose = view_tensors(self.store.view(person_id, source))
        target_pose = self.store.view(person_id, target).pose_map.to_tensor()
        visibility = self.store.visibility(person_id, source, target).grid
        return {
            "image": image,
            "pose": pose,
            "target_pose": target_pose,
            "visibility": torch.from_numpy(visibility.transpose(2, 0, 1).copy()),
            "target_mask": self.store.foreground(person_id, target),
        }


class TupleDataset(Dataset):
    """
    Three sources, target pose and target image per entry, plus the
    analytic visibility of each source in the target pose and the target
    foreground mask. With
    task="mixmatch" the slots hold the id, top and bottom regions of their
    source views.
    """

    def __init__(self, store: ViewStore, entries, task: str = "repose"):
        self.store = store
        self.entries = list(entries)
        self.task = task

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index: int) -> dict:
        entry = self.entries[index]
        views = [self.store.view(entry.person_id, v) for v in entry.sources]
        if self.task == "mixmatch":
            views = [mask_view(view, component) for view, component in zip(views, COMPONENTS)]
        target = self.store.view(entry.person_id, entry.target)
        visibility = [self.store.visibility(entry.person_id, v, entry.target).grid for v in entry.sources]
        images, poses = zip(*(view_tensors(v) for v in views))
        return {
            "images": torch.stack(images),
            "poses": torch.stack(poses),
            "target_pose": target.pose_map.to_tensor(),
            "target_image": target.image.to_tensor(),
            "visibility": torch.from_numpy(np.stack(visibility).transpose(0, 3, 1, 2).copy()),
            "target_mask": self.store.foreground(entry.person_id, entry.target),
        }
