"""
Training and test view tuples. Train entries use every ordered choice of 1
to 3 sources among the views other than the target, padded to 3 slots;
test entries use every distinct 3-view combination once.
"""

import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from itertools import combinations, permutations
from pathlib import Path

import numpy as np

from .config import NUM_VIEWS
from .exceptions import DatasetError, ShapeMismatchError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")


@dataclass(frozen=True)
class TupleEntry:
    split: str
    person_id: str
    target: str
    sources: tuple

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if len(self.sources) != NUM_VIEWS:
            raise ShapeMismatchError(f"Tuple entry needs {NUM_VIEWS} sources, got {len(self.sources)}")
        if self.split not in SPLITS:
            raise DatasetError(f"Unknown split '{self.split}'")

    def to_dict(self) -> dict:
        return {"split": self.split, "person_id": self.person_id, "target": self.target,
                "sources": list(self.sources)}

    @classmethod
    def from_dict(cls, data: dict) -> "TupleEntry":
        return cls(data["split"], data["person_id"], data["target"], tuple(data["sources"]))


@dataclass(frozen=True)
class TupleManifest:
    entries: tuple
    seed: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> "TupleManifest":
        return TupleManifest(tuple(e for e in self.entries if e.split == name), self.seed)

    def counts(self) -> dict:
        return {name: sum(e.split == name for e in self.entries) for name in SPLITS}

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for entry in self.entries:
                f.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
        logger.info(f"Wrote {len(self.entries)} tuples to {path} ({self.counts()})")
        return path

    @classmethod
    def read(cls, path: str | Path, seed: int = 0) -> "TupleManifest":
        path = Path(path)
        if not path.is_file():
            raise DatasetError(f"Tuple manifest not found: {path}")
        with open(path, encoding="utf-8") as f:
            entries = tuple(TupleEntry.from_dict(json.loads(line)) for line in f if line.strip())
        return cls(entries, seed)


def pad_sources(selection: tuple) -> tuple:
    """(A,) → (A,A,A), (A,B) → (A,B,A), triples unchanged."""
    selection = tuple(selection)
    if len(selection) == 1:
        return selection * 3
    if len(selection) == 2:
        return selection + selection[:1]
    if len(selection) == 3:
        return selection
    raise ShapeMismatchError(f"Cannot pad a selection of {len(selection)} views")


def enumerate_train_tuples(person_id: str, view_ids) -> list:
    """
    For every target view, every ordered selection of 1, 2 or 3 distinct
    sources from the other n-1 views, i.e. P(n-1,1)+P(n-1,2)+P(n-1,3)
    entries per target. Targets and selections are in lexicographic order.
    """
    views = sorted(view_ids)
    if len(views) < 2:
        logger.warning(f"Person {person_id} has {len(views)} view(s), need >= 2 for training tuples")
        return []
    entries = []
    for target in views:
        rest = [v for v in views if v != target]
        for size in range(1, NUM_VIEWS + 1):
            for selection in permutations(rest, size):
                entries.append(TupleEntry("train", person_id, target, pad_sources(selection)))
    return entries


def enumerate_test_tuples(person_id: str, view_ids, seed: int) -> list:
    """
    Every unordered 3-subset of the other views once per target, with the
    order inside each entry drawn from a generator seeded by `seed`.
    """
    views = sorted(view_ids)
    if len(views) < NUM_VIEWS + 1:
        logger.warning(f"Person {person_id} has {len(views)} view(s), need >= {NUM_VIEWS + 1} for test tuples")
        return []
    rng = np.random.default_rng(seed)
    entries = []
    for target in views:
        rest = [v for v in views if v != target]
        for subset in combinations(rest, NUM_VIEWS):
            order = rng.permutation(NUM_VIEWS)
            entries.append(TupleEntry("test", person_id, target, tuple(subset[i] for i in order)))
    return entries


def truncate_views(entry: TupleEntry, m: int) -> TupleEntry:
    """Keep the first m sources and pad: 1 → (V1,V1,V1), 2 → (V1,V2,V1)."""
    if m not in (1, 2, 3):
        raise ShapeMismatchError(f"m must be 1, 2 or 3, got {m}")
    return TupleEntry(entry.split, entry.person_id, entry.target, pad_sources(entry.sources[:m]))


def split_persons(person_ids, test_fraction: float, seed: int) -> tuple:
    """Person-level split so no identity is shared between train and test."""
    persons = sorted(set(person_ids))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(persons))
    n_test = int(round(len(persons) * test_fraction))
    if 0 < test_fraction and n_test == 0 and len(persons) > 1:
        n_test = 1
    test = sorted(persons[i] for i in order[:n_test])
    train = sorted(persons[i] for i in order[n_test:])
    return train, test


def group_views(records) -> dict:
    """person_id → sorted view ids from manifest records."""
    groups = defaultdict(list)
    for record in records:
        groups[record["person_id"]].append(record["view_id"])
    return {pid: sorted(views) for pid, views in sorted(groups.items())}


def build_manifest(records, seed: int, test_fraction: float = 0.2, shuffle: bool = False) -> TupleManifest:
    """Train tuples for train persons and test tuples for held-out persons."""
    groups = group_views(records)
    if not groups:
        raise DatasetError("Dataset manifest has no views")
    train_ids, test_ids = split_persons(groups, test_fraction, seed)
    entries = []
    for pid in train_ids:
        entries.extend(enumerate_train_tuples(pid, groups[pid]))
    for i, pid in enumerate(test_ids):
        entries.extend(enumerate_test_tuples(pid, groups[pid], seed + i))
    if shuffle:
        rng = np.random.default_rng(seed)
        entries = [entries[i] for i in rng.permutation(len(entries))]
    logger.info(f"{len(train_ids)} train persons, {len(test_ids)} test persons, {len(entries)} tuples")
    return TupleManifest(tuple(entries), seed)
