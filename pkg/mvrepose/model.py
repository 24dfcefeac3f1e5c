import logging
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .backbone import PatchDiscriminator, ReposeBackbone, WarpOutput
from .config import CHECKPOINT_FORMAT_VERSION, NUM_VIEWS, RunConfig, load_config
from .exceptions import CheckpointLoadError, ConfigMismatchError, ShapeMismatchError
from .fusion import fuse, split_bundle
from .mvf import MultiViewFusion

logger = logging.getLogger(__name__)

PARTS = ("mvf", "backbone", "discriminator")


@dataclass
class Generation:
    image: torch.Tensor
    weights: torch.Tensor
    warps: list


class MultiViewReposer(nn.Module):
    """Fusion network + single-view backbone + discriminator."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.mvf = MultiViewFusion(cfg)
        self.backbone = ReposeBackbone(cfg)
        self.discriminator = PatchDiscriminator(cfg.num_joints, cfg.disc_channels, cfg.disc_depth)

    def generate(self, images, poses, target_pose, weights: torch.Tensor | None = None) -> Generation:
        """
        images/poses: three B×3×H×W and B×J×H×W tensors. The three views are
        encoded in one batch, fused with the predicted (or given) weights and
        decoded once.
        """
        images, poses = list(images), list(poses)
        if len(images) != NUM_VIEWS:
            raise ShapeMismatchError(f"Expected {NUM_VIEWS} source views, got {len(images)}")
        if weights is None:
            weights = self.mvf(images, poses, target_pose)
        batch = target_pose.shape[0]
        bundle, warp_out = self.backbone.encode(
            torch.cat(images), torch.cat(poses), target_pose.repeat(NUM_VIEWS, 1, 1, 1))
        fused = fuse(split_bundle(bundle, NUM_VIEWS), weights)
        image = self.backbone.decode(fused.pose, fused.texture)
        warps = [WarpOutput(*(getattr(warp_out, name)[i * batch:(i + 1) * batch]
                              for name in ("flow_visible", "flow_invisible", "warped_visible",
                                           "warped_invisible", "visibility")))
                 for i in range(NUM_VIEWS)]
        return Generation(image, weights, warps)

    def generator_parameters(self, include_mvf: bool = True) -> list:
        params = list(self.backbone.parameters())
        if include_mvf:
            params = list(self.mvf.parameters()) + params
        return params


class CheckpointManager:
    """
    Versioned checkpoint container: format version, the full run config, its
    model hash and one state dict per network part.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def save(self, model: MultiViewReposer, meta: dict | None = None) -> Path:
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": model.cfg.to_dict(),
            "config_hash": model.cfg.model_hash(),
            "meta": dict(meta or {}),
        }
        for part in PARTS:
            payload[part] = getattr(model, part).state_dict()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, self.path)
        logger.info(f"Saved checkpoint to {self.path}")
        return self.path

    def read(self) -> dict:
        if not self.path.is_file():
            raise CheckpointLoadError(f"Checkpoint not found: {self.path}")
        try:
            payload = torch.load(self.path, map_location="cpu", weights_only=False)
        except Exception as e:
            logger.error(f"Failed to read checkpoint {self.path}: {e}")
            raise CheckpointLoadError(f"Failed to read checkpoint {self.path}: {str(e)}")
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointLoadError(
                f"Unsupported checkpoint format {payload.get('format_version')} (expected {CHECKPOINT_FORMAT_VERSION})")
        return payload

    def config(self) -> RunConfig:
        return load_config(**self.read()["config"])

    def load(self, cfg: RunConfig | None = None, parts=PARTS, model: MultiViewReposer | None = None) -> MultiViewReposer:
        """
        Restore `parts` into `model` (built from the stored config when not
        given). A config whose model hash differs from the stored one is
        rejected.
        """
        payload = self.read()
        cfg = cfg or (model.cfg if model is not None else None)
        if cfg is None:
            cfg = load_config(**payload["config"])
        if cfg.model_hash() != payload["config_hash"]:
            raise ConfigMismatchError(
                f"Checkpoint {self.path} was built for a different model config "
                f"({payload['config_hash'][:12]} vs {cfg.model_hash()[:12]})")
        if model is None:
            model = MultiViewReposer(cfg)
        for part in parts:
            getattr(model, part).load_state_dict(payload[part])
        logger.info(f"Loaded {', '.join(parts)} from {self.path}")
        return model
