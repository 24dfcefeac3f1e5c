from pathlib import Path

import numpy as np
import pytest
import torch

from mvrepose.config import load_config
from mvrepose.dataset import ViewStore
from mvrepose.model import MultiViewReposer
from mvrepose.synthetic import build_dataset
from mvrepose.tuples import build_manifest

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(CONFIG_DIR / "tiny.cfg")


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("data")
    build_dataset(tiny_cfg, out)
    return out


@pytest.fixture(scope="session")
def tiny_store(tiny_data, tiny_cfg):
    return ViewStore(tiny_data, tiny_cfg.pose_sigma)


@pytest.fixture(scope="session")
def tiny_tuples(tiny_store, tiny_cfg, tmp_path_factory):
    manifest = build_manifest(tiny_store.records, tiny_cfg.seed, test_fraction=0.25)
    return manifest.write(tmp_path_factory.mktemp("tuples") / "tuples.jsonl")


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return MultiViewReposer(tiny_cfg).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
