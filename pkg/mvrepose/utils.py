import json
import logging
import os
import random
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config
from .domain import ImageGrid
from .exceptions import DatasetError, InvalidImageError

logger = logging.getLogger(__name__)

ALLOWED_EXTENSIONS = {".png"}


def validate_image_path(path: Path) -> None:
    """Check that the image file exists, is a PNG and decodes."""
    if not path.is_file():
        raise InvalidImageError(f"Image file not found: {path}")
    if path.suffix.lower() not in ALLOWED_EXTENSIONS:
        raise InvalidImageError(f"Unsupported file type. Allowed: {', '.join(ALLOWED_EXTENSIONS)}")
    try:
        with Image.open(path) as image:
            image.verify()
    except Exception:
        raise InvalidImageError(f"Invalid or corrupted image file: {path}")


def load_image(path: str | Path) -> ImageGrid:
    path = Path(path)
    validate_image_path(path)
    try:
        with Image.open(path) as image:
            array = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as e:
        raise InvalidImageError(f"Failed to read image {path}: {str(e)}")
    return ImageGrid(array)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def save_image(image: ImageGrid | np.ndarray, path: str | Path) -> Path:
    """Write an RGB (or single-channel) grid in [0,1] as PNG."""
    values = image.values if isinstance(image, ImageGrid) else np.asarray(image)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if values.ndim == 3 and values.shape[2] == 1:
        values = values[..., 0]
    Image.fromarray(to_uint8(values)).save(path, format="PNG")
    return path


def save_labels(labels: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path, format="PNG")
    return path


def load_labels(path: str | Path) -> np.ndarray:
    path = Path(path)
    validate_image_path(path)
    with Image.open(path) as image:
        return np.asarray(image, dtype=np.uint8).copy()


def write_json(data, path: str | Path) -> Path:
    """Deterministic JSON: sorted keys, fixed separators."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path):
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"File not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def set_seed(seed: int, deterministic: bool | None = None) -> torch.Generator:
    """
    Seeds python, numpy and torch and returns a torch generator for data
    loaders. UMF_DETERMINISTIC=1 (or MVR_DETERMINISTIC=1) additionally forces deterministic kernels.
    """
    deterministic = config.DETERMINISTIC if deterministic is None else deterministic
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False
        logger.info("Deterministic kernels enabled")
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def resolve_device(name: str | None = None) -> torch.device:
    name = name or config.DEVICE
    if name == "auto":
        name = "cuda" if torch.cuda.is_available() else "cpu"
    return torch.device(name)


def write_run_metadata(out_dir: str | Path, cfg, stage: str, **extra) -> Path:
    """run.json next to every pipeline's outputs: stage, seed, config and its model hash."""
    payload = {
        "stage": stage,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.model_hash(),
        "deterministic": config.DETERMINISTIC,
        "torch": torch.__version__,
    }
    payload.update(extra)
    return write_json(payload, Path(out_dir) / "run.json")


def side_by_side(panels: list, gap: int = 2) -> np.ndarray:
    """Concatenate H×W×3 panels horizontally with a white gap."""
    height = panels[0].shape[0]
    spacer = np.ones((height, gap, 3), dtype=np.float32)
    row = []
    for i, panel in enumerate(panels):
        if i:
            row.append(spacer)
        row.append(np.asarray(panel, dtype=np.float32))
    return np.concatenate(row, axis=1)
