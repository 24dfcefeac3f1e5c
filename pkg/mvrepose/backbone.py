# mvrepose/backbone.py
"""
Single-view reposing backbone: a flow warper (visible / invisible flows and
a visibility map), a texture pyramid encoder, a pose encoder, a decoder
whose activations are modulated by the texture pyramid, and a pose
conditioned patch discriminator.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .domain import FeatureBundle
from .exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowField:
    """H×W×2 per-pixel displacement (dx, dy) in pixels."""
    grid: np.ndarray

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.float32, copy=True)
        if grid.ndim != 3 or grid.shape[2] != 2:
            raise ShapeMismatchError(f"FlowField expects H×W×2, got {grid.shape}")
        if not np.isfinite(grid).all():
            raise ShapeMismatchError("FlowField contains non-finite values")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def max_magnitude(self) -> float:
        return float(np.linalg.norm(self.grid, axis=2).max())

    @classmethod
    def from_tensor(cls, flow: torch.Tensor) -> "FlowField":
        """From a 2×H×W (or 1×2×H×W) tensor."""
        array = flow.detach().cpu().float().numpy()
        if array.ndim == 4:
            array = array[0]
        return cls(array.transpose(1, 2, 0))


@dataclass
class WarpOutput:
    """Batched warp results; every tensor shares H×W."""
    flow_visible: torch.Tensor
    flow_invisible: torch.Tensor
    warped_visible: torch.Tensor
    warped_invisible: torch.Tensor
    visibility: torch.Tensor


def warp(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """
    Backward bilinear warp: out(x) = image(x + flow(x)), zero outside the
    image. image B×C×H×W, flow B×2×H×W with (dx, dy) in pixels. Integer
    flows hit pixels exactly, so zero flow is an exact identity.
    """
    if image.shape[0] != flow.shape[0] or image.shape[-2:] != flow.shape[-2:] or flow.shape[1] != 2:
        raise ShapeMismatchError(f"warp: image {tuple(image.shape)} vs flow {tuple(flow.shape)}")
    b, c, h, w = image.shape
    ys, xs = torch.meshgrid(torch.arange(h, device=image.device), torch.arange(w, device=image.device),
                            indexing="ij")
    floor_x, floor_y = torch.floor(flow[:, 0]), torch.floor(flow[:, 1])
    wx, wy = flow[:, 0] - floor_x, flow[:, 1] - floor_y
    x0 = xs + floor_x.long()
    y0 = ys + floor_y.long()
    flat = image.reshape(b, c, h * w)

    def gather(yy, xx):
        inside = ((xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)).to(image.dtype).unsqueeze(1)
        index = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1)).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, index).reshape(b, c, h, w) * inside

    return (((1 - wx) * (1 - wy)).unsqueeze(1) * gather(y0, x0)
            + ((1 - wx) * wy).unsqueeze(1) * gather(y0 + 1, x0)
            + (wx * (1 - wy)).unsqueeze(1) * gather(y0, x0 + 1)
            + (wx * wy).unsqueeze(1) * gather(y0 + 1, x0 + 1))


def conv_block(in_channels: int, out_channels: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1),
        nn.LeakyReLU(0.2),
    )


def resize_to(x: torch.Tensor, size: tuple) -> torch.Tensor:
    """Area average when shrinking, bilinear when growing."""
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    if size[0] <= x.shape[-2] and size[1] <= x.shape[-1]:
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class FlowWarper(nn.Module):
    def __init__(self, num_joints: int, width: int):
        super().__init__()
        self.encoder = nn.Sequential(
            conv_block(3 + 2 * num_joints, width),
            conv_block(width, width * 2, stride=2),
            conv_block(width * 2, width * 2),
        )
        self.decoder = conv_block(width * 2 + width, width)
        self.stem = conv_block(3 + 2 * num_joints, width)
        self.head = nn.Conv2d(width, 5, kernel_size=3, padding=1)
        # zero flow and a flat 0.5 visibility before training
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, i_s, p_s, p_t) -> WarpOutput:
        x = torch.cat([i_s, p_s, p_t], dim=1)
        h, w = x.shape[-2:]
        coarse = F.interpolate(self.encoder(x), size=(h, w), mode="bilinear", align_corners=False)
        out = self.head(self.decoder(torch.cat([coarse, self.stem(x)], dim=1)))
        limit = max(h, w) / 2.0
        flow_v = torch.tanh(out[:, 0:2]) * limit
        flow_i = torch.tanh(out[:, 2:4]) * limit
        return WarpOutput(flow_v, flow_i, warp(i_s, flow_v), warp(i_s, flow_i), torch.sigmoid(out[:, 4:5]))


class TextureEncoder(nn.Module):
    """Pyramid of L levels, level l at H/2^l, finest first."""

    def __init__(self, num_joints: int, width: int, channels: tuple):
        super().__init__()
        self.stem = conv_block(3 + 3 + 1 + num_joints, width)
        self.levels = nn.ModuleList()
        previous = width
        for out in channels:
            self.levels.append(nn.Sequential(conv_block(previous, out, stride=2), conv_block(out, out)))
            previous = out

    def forward(self, warped_visible, warped_invisible, visibility, p_t) -> tuple:
        h = self.stem(torch.cat([warped_visible, warped_invisible, visibility, p_t], dim=1))
        pyramid = []
        for level in self.levels:
            h = level(h)
            pyramid.append(h)
        return tuple(pyramid)


class PoseEncoder(nn.Module):
    """(p_s, p_t) → C_p × A × A with A the ARMap size."""

    def __init__(self, num_joints: int, width: int, channels: int, size: int):
        super().__init__()
        self.size = size
        self.body = nn.Sequential(
            conv_block(2 * num_joints, width),
            conv_block(width, width, stride=2),
            conv_block(width, width),
        )
        self.out = nn.Conv2d(width, channels, kernel_size=3, padding=1)

    def forward(self, p_s, p_t) -> torch.Tensor:
        h = resize_to(self.body(torch.cat([p_s, p_t], dim=1)), (self.size, self.size))
        return self.out(h)


class StyleDecoder(nn.Module):
    """
    Starts from the pose encoding at the coarsest pyramid size and walks up
    the levels; at each level h ← h·γ_l + β_l with γ_l = 1 + conv(e_t,l),
    β_l = conv(e_t,l). Ends at full resolution with a sigmoid.
    """

    def __init__(self, pose_channels: int, texture_channels: tuple, width: int):
        super().__init__()
        self.inp = conv_block(pose_channels, width)
        self.gamma = nn.ModuleList(nn.Conv2d(c, width, kernel_size=1) for c in texture_channels)
        self.beta = nn.ModuleList(nn.Conv2d(c, width, kernel_size=1) for c in texture_channels)
        self.blocks = nn.ModuleList(conv_block(width, width) for _ in texture_channels)
        self.out = nn.Sequential(conv_block(width, width), nn.Conv2d(width, 3, kernel_size=3, padding=1))

    def forward(self, pose: torch.Tensor, texture: tuple, modulate: bool = True) -> torch.Tensor:
        h = self.inp(resize_to(pose, texture[-1].shape[-2:]))
        for level in reversed(range(len(texture))):
            if h.shape[-2:] != texture[level].shape[-2:]:
                h = F.interpolate(h, size=texture[level].shape[-2:], mode="bilinear", align_corners=False)
            if modulate:
                h = h * (1.0 + self.gamma[level](texture[level])) + self.beta[level](texture[level])
            h = self.blocks[level](h)
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.sigmoid(self.out(h))


class PatchDiscriminator(nn.Module):
    """LSGAN critic on cat(image, p_t); one raw score per H/2^depth patch."""

    def __init__(self, num_joints: int, channels: int, depth: int):
        super().__init__()
        layers, previous = [], 3 + num_joints
        for i in range(depth):
            out = channels * 2 ** min(i, 3)
            layers += [nn.Conv2d(previous, out, kernel_size=4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            previous = out
        layers.append(nn.Conv2d(previous, 1, kernel_size=3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, image, p_t) -> torch.Tensor:
        return self.net(torch.cat([image, p_t], dim=1))


class ReposeBackbone(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.warper = FlowWarper(cfg.num_joints, cfg.backbone_width)
        self.texture_encoder = TextureEncoder(cfg.num_joints, cfg.backbone_width, cfg.texture_channels)
        self.pose_encoder = PoseEncoder(cfg.num_joints, cfg.backbone_width, cfg.pose_channels, cfg.armap_size)
        self.decoder = StyleDecoder(cfg.pose_channels, cfg.texture_channels, cfg.backbone_width * 2)

    def _check(self, i_s, p_s, p_t) -> None:
        if i_s.shape[-2:] != p_s.shape[-2:] or p_s.shape != p_t.shape:
            raise ShapeMismatchError(
                f"Backbone inputs disagree: image {tuple(i_s.shape)}, p_s {tuple(p_s.shape)}, p_t {tuple(p_t.shape)}")

    def warp(self, i_s, p_s, p_t) -> WarpOutput:
        self._check(i_s, p_s, p_t)
        return self.warper(i_s, p_s, p_t)

    def encode_texture(self, i_s, p_s, p_t, warp_out: WarpOutput) -> tuple:
        return self.texture_encoder(warp_out.warped_visible, warp_out.warped_invisible, warp_out.visibility, p_t)

    def encode_pose(self, p_s, p_t) -> torch.Tensor:
        return self.pose_encoder(p_s, p_t)

    def encode(self, i_s, p_s, p_t) -> tuple:
        """(FeatureBundle, WarpOutput) for one (batched) view."""
        warp_out = self.warp(i_s, p_s, p_t)
        bundle = FeatureBundle(self.encode_texture(i_s, p_s, p_t, warp_out), self.encode_pose(p_s, p_t))
        return bundle, warp_out

    def decode(self, e_p, texture, modulate: bool = True) -> torch.Tensor:
        return self.decoder(e_p, texture, modulate)

    def generate(self, i_s, p_s, p_t) -> torch.Tensor:
        bundle, _ = self.encode(i_s, p_s, p_t)
        return self.decode(bundle.pose, bundle.texture)
