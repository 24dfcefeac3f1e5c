"""
Training objective: L1 reconstruction, feature (perceptual) and Gram
(style) differences from a pluggable extractor, and least-squares GAN terms.
"""

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from .domain import LossWeights
from .exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_shapes(a, b)
    return (a - b).abs().mean()


VISIBILITY_GROUPS = ("background", "visible", "occluded")


def visibility_groups(target: torch.Tensor, foreground: torch.Tensor) -> tuple:
    """Boolean masks of target background, visible foreground and occluded foreground."""
    _check_shapes(target, foreground)
    fg = foreground > 0.5
    visible = fg & (target > 0.5)
    return ~fg, visible, fg & ~visible


def visibility_group_errors(pred: torch.Tensor, target: torch.Tensor, foreground: torch.Tensor) -> tuple:
    """(summed L1 per group, pixel count per group), pooled over the batch."""
    _check_shapes(pred, target)
    err = (pred - target).abs()
    groups = visibility_groups(target, foreground)
    sums = torch.stack([(err * g).sum() for g in groups])
    counts = torch.stack([g.sum() for g in groups]).to(err.dtype)
    return sums, counts


def balanced_mean(sums: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
    """Mean of the per-group means over the groups that have pixels."""
    present = counts > 0
    if not bool(present.any()):
        return sums.sum() * 0.0
    return (sums[present] / counts[present]).mean()


def visibility_loss(pred: torch.Tensor, target: torch.Tensor, foreground: torch.Tensor) -> torch.Tensor:
    """
    L1 on visibility maps where background, visible and occluded pixels
    weigh as three equal groups. Background dominates the pixel count, so a
    plain mean is minimised by predicting 0 everywhere; here the all-zero
    map scores 1/3 while a perfect map scores 0.
    """
    sums, counts = visibility_group_errors(pred, target, foreground)
    return balanced_mean(sums, counts)


class IdentityExtractor(nn.Module):
    """Features are the pixels themselves (one level)."""

    def forward(self, x: torch.Tensor) -> list:
        return [x]


class RandomConvExtractor(nn.Module):
    """
    Fixed random-weight conv stack standing in for a pretrained feature net.
    Weights come from `seed` only, so two instances with the same arguments
    produce the same features. Parameters never train.
    """

    def __init__(self, levels: int = 3, width: int = 16, seed: int = 1234, in_channels: int = 3):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.blocks = nn.ModuleList()
        channels = in_channels
        for level in range(levels):
            out = width * 2 ** level
            conv = nn.Conv2d(channels, out, kernel_size=3, padding=1)
            with torch.no_grad():
                bound = (6.0 / (channels * 9)) ** 0.5
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=generator) * 2 - 1) * bound)
                conv.bias.zero_()
            self.blocks.append(conv)
            channels = out
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list:
        features = []
        h = x * 2.0 - 1.0
        for i, conv in enumerate(self.blocks):
            if i:
                h = F.avg_pool2d(h, 2, ceil_mode=True)
            h = F.relu(conv(h))
            features.append(h)
        return features


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Sum over feature levels of the mean squared feature difference."""
    _check_shapes(a, b)
    return sum(F.mse_loss(fa, fb) for fa, fb in zip(extractor(a), extractor(b)))


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """G[i,j] = sum_hw f_i f_j / (C·H·W) for C×H×W or B×C×H×W features."""
    batched = features.dim() == 4
    if not batched:
        features = features.unsqueeze(0)
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    gram = flat @ flat.transpose(1, 2) / (c * h * w)
    return gram if batched else gram[0]


def style_loss(a: torch.Tensor, b: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    _check_shapes(a, b)
    return sum(F.mse_loss(gram_matrix(fa), gram_matrix(fb)) for fa, fb in zip(extractor(a), extractor(b)))


def lsgan_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return ((fake_scores - 1.0) ** 2).mean()


def lsgan_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return ((real_scores - 1.0) ** 2).mean() + (fake_scores ** 2).mean()


def total_loss(i_p: torch.Tensor, i_gt: torch.Tensor, fake_scores: torch.Tensor | None,
               weights: LossWeights, extractor: nn.Module) -> tuple:
    """
    Weighted sum of the four terms. Terms with a zero weight are not
    evaluated, so with alpha_adv=0 the scores may be None.
    Returns (total tensor, {component: float}).
    """
    _check_shapes(i_p, i_gt)
    terms = {}
    if weights.alpha_rec:
        terms["rec"] = (weights.alpha_rec, l1_loss(i_p, i_gt))
    if weights.alpha_per:
        terms["per"] = (weights.alpha_per, perceptual_loss(i_p, i_gt, extractor))
    if weights.alpha_sty:
        terms["sty"] = (weights.alpha_sty, style_loss(i_p, i_gt, extractor))
    if weights.alpha_adv:
        if fake_scores is None:
            raise ShapeMismatchError("alpha_adv > 0 needs discriminator scores")
        terms["adv"] = (weights.alpha_adv, lsgan_g_loss(fake_scores))

    total = sum(alpha * value for alpha, value in terms.values())
    breakdown = {name: float(value.detach()) for name, (_, value) in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown
