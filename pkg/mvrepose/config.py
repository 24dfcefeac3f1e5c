import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from dotenv import dotenv_values, load_dotenv

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

load_dotenv()


def env_flag(*names: str, environ=None) -> bool:
    """True when the first of `names` present in the environment is "1"."""
    environ = os.environ if environ is None else environ
    for name in names:
        if name in environ:
            return str(environ[name]).strip() == "1"
    return False


# --- Process settings (environment / .env) ---
DETERMINISTIC = env_flag("UMF_DETERMINISTIC", "MVR_DETERMINISTIC")
DEVICE = os.getenv("MVR_DEVICE", "auto")
LOG_LEVEL = os.getenv("MVR_LOG_LEVEL", "INFO")
RUN_ROOT = Path(os.getenv("MVR_RUN_ROOT", "runs"))
try:
    NUM_WORKERS = int(os.getenv("MVR_NUM_WORKERS", 0))
except (ValueError, TypeError):
    logger.warning("Invalid MVR_NUM_WORKERS environment variable, using 0")
    NUM_WORKERS = 0

# --- Fixed model constants ---
NUM_VIEWS = 3
ARMAP_SIZE = 128
CHECKPOINT_FORMAT_VERSION = 1

# Keys that change parameter shapes; a checkpoint is only loadable under the same values.
MODEL_KEYS = (
    "image_size", "num_joints", "num_views", "armap_size", "pyramid_levels",
    "texture_channels", "pose_channels", "backbone_width", "disc_channels",
    "disc_depth", "mvf_arch", "mvf_dim", "mvf_depths", "mvf_heads",
    "window_size", "head_channels",
)


@dataclass(frozen=True)
class RunConfig:
    # data
    image_size: int = 256
    num_joints: int = 14
    pose_sigma: float = 2.0
    n_figures: int = 10
    views_per_figure: int = 6
    flip_probability: float = 0.1
    test_fraction: float = 0.2
    data_dir: str = "data"
    tuples_path: str = "tuples.jsonl"

    # backbone
    num_views: int = NUM_VIEWS
    armap_size: int = ARMAP_SIZE
    pyramid_levels: int = 4
    texture_channels: tuple = (32, 64, 64, 64)
    pose_channels: int = 32
    backbone_width: int = 32
    disc_channels: int = 32
    disc_depth: int = 4

    # fusion network
    mvf_arch: str = "swin"
    mvf_dim: int = 48
    mvf_depths: tuple = (2, 2)
    mvf_heads: tuple = (2, 4)
    window_size: int = 8
    head_channels: int = 64

    # losses (none of these come with published values)
    alpha_rec: float = 1.0
    alpha_per: float = 0.25
    alpha_sty: float = 100.0
    alpha_adv: float = 0.1
    alpha_vis: float = 1.0
    extractor_levels: int = 3
    extractor_seed: int = 1234

    # optimisation
    pretrain_lr: float = 1e-4
    pretrain_batch: int = 32
    pretrain_epochs: int = 3
    train_lr: float = 3e-4
    train_batch: int = 24
    train_epochs: int = 10
    finetune_epochs: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    max_views: int = 3
    task: str = "repose"
    max_train_tuples: int = 0
    max_pretrain_pairs: int = 0
    log_every: int = 50

    seed: int = 0
    num_workers: int = NUM_WORKERS

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size < 8 or self.image_size % 8:
            raise ConfigError(f"image_size must be >= 8 and divisible by 8, got {self.image_size}")
        if self.num_views != NUM_VIEWS:
            raise ConfigError(f"num_views is fixed to {NUM_VIEWS}")
        if self.pyramid_levels < 1 or self.image_size % (2 ** self.pyramid_levels):
            raise ConfigError(f"image_size {self.image_size} cannot hold {self.pyramid_levels} pyramid levels")
        if len(self.texture_channels) != self.pyramid_levels:
            raise ConfigError("texture_channels needs one width per pyramid level")
        if self.mvf_arch not in ("swin", "unet"):
            raise ConfigError(f"Unknown mvf_arch '{self.mvf_arch}'")
        if len(self.mvf_depths) != len(self.mvf_heads) or not self.mvf_depths:
            raise ConfigError("mvf_depths and mvf_heads must have the same non-zero length")
        for i, heads in enumerate(self.mvf_heads):
            if (self.mvf_dim * 2 ** i) % heads:
                raise ConfigError(f"stage {i} width {self.mvf_dim * 2 ** i} not divisible by {heads} heads")
        if self.task not in ("repose", "mixmatch"):
            raise ConfigError(f"Unknown task '{self.task}'")
        if self.max_views not in (1, 2, 3):
            raise ConfigError("max_views must be 1, 2 or 3")
        if self.armap_size < 1 or self.pose_sigma <= 0:
            raise ConfigError("armap_size must be >= 1 and pose_sigma > 0")
        if self.views_per_figure < 2:
            raise ConfigError("views_per_figure must be >= 2")

    def model_config(self) -> dict:
        return {key: getattr(self, key) for key in MODEL_KEYS}

    def model_hash(self) -> str:
        payload = json.dumps(self.model_config(), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {key: list(value) if isinstance(value, tuple) else value
                for key, value in asdict(self).items()}

    def with_overrides(self, **overrides) -> "RunConfig":
        return replace(self, **_coerce_all({k: v for k, v in overrides.items() if v is not None}))


def _coerce(name: str, raw, default):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if isinstance(raw, (list, tuple)):
                return tuple(int(v) for v in raw)
            return tuple(int(v) for v in str(raw).split(",") if v.strip())
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"Config key '{name}' cannot take value {raw!r}")


def _coerce_all(values: dict) -> dict:
    defaults = {f.name: f.default for f in fields(RunConfig)}
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    return {name: _coerce(name, raw, defaults[name]) for name, raw in values.items()}


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """
    Reads a flat key=value config file (dotenv syntax) into a RunConfig.
    Keyword overrides win over file values; None overrides are ignored.
    """
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        values = {k.lower(): v for k, v in dotenv_values(path).items() if v is not None}
        logger.info(f"Loaded {len(values)} config keys from {path}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**_coerce_all(values))
