"""
Multi-view fusion network. Takes the three source images and pose maps plus
the target pose map, predicts one logit map per view at ARMap resolution and
turns them into per-pixel view weights with a softmax.

Two predictors share the interface: a two-stage shifted-window attention
encoder with a pyramid pooling / FPN head, and a plain conv UNet.
"""

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .config import NUM_VIEWS, RunConfig
from .domain import ARMap, ImageGrid
from .exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """B×H×W×C → (B·nW)×(window²)×C"""
    return rearrange(x, "b (nh wh) (nw ww) c -> (b nh nw) (wh ww) c", wh=window, ww=window)


def window_reverse(windows: torch.Tensor, window: int, height: int, width: int) -> torch.Tensor:
    return rearrange(windows, "(b nh nw) (wh ww) c -> b (nh wh) (nw ww) c",
                     nh=height // window, nw=width // window, wh=window, ww=window)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
    relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
    return relative[..., 0] * (2 * window - 1) + relative[..., 1]


def shifted_window_mask(height: int, width: int, window: int, shift: int) -> torch.Tensor:
    """nW×N×N additive mask keeping attention inside each pre-shift region."""
    regions = torch.zeros(1, height, width, 1)
    count = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            regions[:, hs, ws, :] = count
            count += 1
    ids = window_partition(regions, window).squeeze(-1)
    mask = ids.unsqueeze(1) - ids.unsqueeze(2)
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        self.register_buffer("bias_index", relative_position_index(window), persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        n = x.shape[1]
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d", three=3, h=self.heads)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.bias_table[self.bias_index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)
        if mask is not None:
            windows = mask.shape[0]
            attn = attn.reshape(-1, windows, self.heads, n, n) + mask[None, :, None].to(attn.dtype)
            attn = attn.reshape(-1, self.heads, n, n)
        out = attn.softmax(dim=-1) @ v
        return self.proj(rearrange(out, "b h n d -> b n (h d)"))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, shifted: bool):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: B×H×W×C"""
        b, h, w, c = x.shape
        window = self.window
        pad_h, pad_w = (-h) % window, (-w) % window
        y = F.pad(self.norm1(x), (0, 0, 0, pad_w, 0, pad_h))
        hp, wp = h + pad_h, w + pad_w
        # a single window already sees everything, so no shift
        shift = window // 2 if self.shifted and (hp > window or wp > window) else 0
        mask = None
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
            mask = shifted_window_mask(hp, wp, window, shift).to(y.device)
        y = window_reverse(self.attn(window_partition(y, window), mask), window, hp, wp)
        if shift:
            y = torch.roll(y, shifts=(shift, shift), dims=(1, 2))
        x = x + y[:, :h, :w]
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.pad(x, (0, 0, 0, x.shape[2] % 2, 0, x.shape[1] % 2))
        x = rearrange(x, "b (h p1) (w p2) c -> b h w (p2 p1 c)", p1=2, p2=2)
        return self.reduction(self.norm(x))


class PyramidHead(nn.Module):
    """Pyramid pooling on the deepest stage, top-down FPN over the rest."""

    def __init__(self, in_dims: list, channels: int, out_channels: int, pool_scales=(1, 2, 3, 6)):
        super().__init__()
        self.pool_scales = pool_scales
        self.ppm = nn.ModuleList(
            nn.Sequential(nn.Conv2d(in_dims[-1], channels, kernel_size=1), nn.ReLU()) for _ in pool_scales)
        self.bottleneck = nn.Sequential(
            nn.Conv2d(in_dims[-1] + len(pool_scales) * channels, channels, kernel_size=3, padding=1), nn.ReLU())
        self.lateral = nn.ModuleList(
            nn.Sequential(nn.Conv2d(d, channels, kernel_size=1), nn.ReLU()) for d in in_dims[:-1])
        self.fpn = nn.ModuleList(
            nn.Sequential(nn.Conv2d(channels, channels, kernel_size=3, padding=1), nn.ReLU()) for _ in in_dims[:-1])
        self.fuse = nn.Sequential(
            nn.Conv2d(len(in_dims) * channels, channels, kernel_size=3, padding=1), nn.ReLU())
        self.classifier = nn.Conv2d(channels, out_channels, kernel_size=1)

    def forward(self, features: list) -> torch.Tensor:
        deepest = features[-1]
        size = deepest.shape[-2:]
        pooled = [F.interpolate(branch(F.adaptive_avg_pool2d(deepest, scale)), size=size, mode="bilinear",
                                align_corners=False)
                  for scale, branch in zip(self.pool_scales, self.ppm)]
        laterals = [lateral(f) for lateral, f in zip(self.lateral, features[:-1])]
        laterals.append(self.bottleneck(torch.cat([deepest, *pooled], dim=1)))
        for i in range(len(laterals) - 1, 0, -1):
            laterals[i - 1] = laterals[i - 1] + F.interpolate(
                laterals[i], size=laterals[i - 1].shape[-2:], mode="bilinear", align_corners=False)
        outs = [fpn(lat) for fpn, lat in zip(self.fpn, laterals[:-1])] + [laterals[-1]]
        finest = outs[0].shape[-2:]
        outs = [outs[0]] + [F.interpolate(o, size=finest, mode="bilinear", align_corners=False) for o in outs[1:]]
        return self.classifier(self.fuse(torch.cat(outs, dim=1)))


class SwinMaskPredictor(nn.Module):
    def __init__(self, in_channels: int, cfg: RunConfig):
        super().__init__()
        dim = cfg.mvf_dim
        self.patch_embed = nn.Conv2d(in_channels, dim, kernel_size=2, stride=2)
        self.embed_norm = nn.LayerNorm(dim)
        self.merges = nn.ModuleList()
        self.stages = nn.ModuleList()
        dims = []
        for i, (depth, heads) in enumerate(zip(cfg.mvf_depths, cfg.mvf_heads)):
            if i:
                self.merges.append(PatchMerging(dim))
                dim *= 2
            self.stages.append(nn.Sequential(
                *(SwinBlock(dim, heads, cfg.window_size, shifted=j % 2 == 1) for j in range(depth))))
            dims.append(dim)
        self.head = PyramidHead(dims, cfg.head_channels, NUM_VIEWS)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.embed_norm(rearrange(self.patch_embed(x), "b c h w -> b h w c"))
        features = []
        for i, stage in enumerate(self.stages):
            if i:
                h = self.merges[i - 1](h)
            h = stage(h)
            features.append(rearrange(h, "b h w c -> b c h w"))
        return self.head(features)


class UNetMaskPredictor(nn.Module):
    def __init__(self, in_channels: int, cfg: RunConfig):
        super().__init__()
        dim = cfg.mvf_dim
        self.down = nn.ModuleList([
            nn.Sequential(nn.Conv2d(in_channels, dim, 3, padding=1), nn.ReLU(), nn.Conv2d(dim, dim, 3, padding=1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(dim, dim * 2, 3, stride=2, padding=1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(dim * 2, dim * 4, 3, stride=2, padding=1), nn.ReLU()),
        ])
        self.up = nn.ModuleList([
            nn.Sequential(nn.Conv2d(dim * 4 + dim * 2, dim * 2, 3, padding=1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(dim * 2 + dim, dim, 3, padding=1), nn.ReLU()),
        ])
        self.classifier = nn.Conv2d(dim, NUM_VIEWS, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for block in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return self.classifier(x)


def normalize(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the view axis (dim 1) in shifted form."""
    shifted = logits - logits.max(dim=1, keepdim=True).values
    weights = shifted.exp()
    return weights / weights.sum(dim=1, keepdim=True)


class MultiViewFusion(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.armap_size = cfg.armap_size
        in_channels = NUM_VIEWS * (3 + cfg.num_joints) + cfg.num_joints
        predictor = SwinMaskPredictor if cfg.mvf_arch == "swin" else UNetMaskPredictor
        self.predictor = predictor(in_channels, cfg)

    def predict_logits(self, images, poses, target_pose: torch.Tensor) -> torch.Tensor:
        """images, poses: three B×3×H×W / B×J×H×W tensors each → B×3×A×A logits."""
        images, poses = list(images), list(poses)
        if len(images) != NUM_VIEWS or len(poses) != NUM_VIEWS:
            raise ShapeMismatchError(f"MVF takes exactly {NUM_VIEWS} views, got {len(images)} images / {len(poses)} poses")
        size = target_pose.shape[-2:]
        for image, pose in zip(images, poses):
            if image.shape[-2:] != size or pose.shape != target_pose.shape:
                raise ShapeMismatchError(f"View {tuple(image.shape)}/{tuple(pose.shape)} vs target {tuple(target_pose.shape)}")
        x = torch.cat([t for pair in zip(images, poses) for t in pair] + [target_pose], dim=1)
        logits = self.predictor(x)
        return F.interpolate(logits, size=(self.armap_size, self.armap_size), mode="bilinear", align_corners=False)

    def forward(self, images, poses, target_pose) -> torch.Tensor:
        return normalize(self.predict_logits(images, poses, target_pose))

    def visibility_maps(self, image, pose, target_pose, full_size: bool = True) -> torch.Tensor:
        """
        One view replicated into all slots; sigmoid of every slot's logits,
        B×3×H×W (or B×3×A×A with full_size=False).
        """
        logits = self.predict_logits([image] * NUM_VIEWS, [pose] * NUM_VIEWS, target_pose)
        maps = torch.sigmoid(logits)
        if full_size:
            maps = F.interpolate(maps, size=image.shape[-2:], mode="bilinear", align_corners=False)
        return maps

    def predict_visibility(self, image, pose, target_pose, slot: int = 0, full_size: bool = True) -> torch.Tensor:
        return self.visibility_maps(image, pose, target_pose, full_size)[:, slot:slot + 1]


def rgb_visualize(armap: ARMap, used_views: int = NUM_VIEWS) -> ImageGrid:
    """
    View weights painted as R, G, B. With two used views the first two
    channels are renormalised and blue stays empty; one used view is red.
    """
    grid = armap.grid.astype("float64")
    if used_views == NUM_VIEWS:
        return ImageGrid(grid)
    if used_views not in (1, 2):
        raise ShapeMismatchError(f"used_views must be 1, 2 or 3, got {used_views}")
    painted = grid.copy()
    painted[..., used_views:] = 0.0
    painted /= painted.sum(axis=2, keepdims=True).clip(min=1e-12)
    return ImageGrid(painted)
