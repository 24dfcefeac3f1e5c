"""
Evaluation metrics: PSNR and SSIM (scikit-image), an LPIPS-style feature
distance and FID statistics over a pluggable extractor, and rigidly aligned
keypoint similarity for picking the source pose closest to the target.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from skimage.metrics import mean_squared_error, peak_signal_noise_ratio, structural_similarity

from .domain import ImageGrid, KeypointSet, ViewTuple
from .exceptions import MetricError, ShapeMismatchError
from .utils import write_json

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PSD_TOLERANCE = 1e-8
OKS_KAPPA_FRACTION = 0.1


def _pixels(image) -> np.ndarray:
    if isinstance(image, ImageGrid):
        return image.values.astype(np.float64)
    if isinstance(image, torch.Tensor):
        array = image.detach().cpu().double().numpy()
        return array.transpose(1, 2, 0) if array.ndim == 3 else array
    return np.asarray(image, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """10·log10(peak²/MSE) in dB; identical images give +inf."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    if mean_squared_error(a, b) == 0:
        return math.inf
    return float(peak_signal_noise_ratio(a, b, data_range=peak))


def ssim(a, b, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Gaussian-window SSIM with C1=(0.01·peak)², C2=(0.03·peak)²."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < window:
        raise MetricError(f"Image {a.shape[:2]} smaller than the {window}×{window} SSIM window")
    channel_axis = -1 if a.ndim == 3 else None
    return float(structural_similarity(
        a, b, data_range=peak, channel_axis=channel_axis, gaussian_weights=True,
        sigma=SSIM_SIGMA, use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


def _as_batch(image) -> torch.Tensor:
    if isinstance(image, ImageGrid):
        return image.to_tensor().unsqueeze(0)
    if image.dim() == 3:
        return image.unsqueeze(0)
    return image


@torch.no_grad()
def feature_distance(a, b, extractor, eps: float = 1e-10) -> float:
    """
    Channel-normalise each feature level, square the difference, sum over
    channels, then average over positions and levels.
    """
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"feature_distance shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    levels = []
    for fa, fb in zip(extractor(a.float()), extractor(b.float())):
        na = fa / (fa.norm(dim=1, keepdim=True) + eps)
        nb = fb / (fb.norm(dim=1, keepdim=True) + eps)
        levels.append(((na - nb) ** 2).sum(dim=1).mean())
    return float(torch.stack(levels).mean())


@torch.no_grad()
def pooled_features(images: torch.Tensor, extractor) -> np.ndarray:
    """N×d descriptors: global average of the coarsest extractor level."""
    features = extractor(_as_batch(images).float())[-1]
    return features.mean(dim=(2, 3)).cpu().double().numpy()


def _psd_sqrt_eigenvalues(matrix: np.ndarray, name: str) -> np.ndarray:
    values = np.linalg.eigvalsh((matrix + matrix.T) / 2)
    tolerance = PSD_TOLERANCE * max(1.0, float(np.abs(values).max(initial=0.0)))
    if values.min(initial=0.0) < -tolerance:
        raise MetricError(f"{name} is not positive semidefinite (min eigenvalue {values.min():.3e})")
    return np.clip(values, 0.0, None)


def _psd_sqrt(matrix: np.ndarray, name: str) -> np.ndarray:
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2)
    tolerance = PSD_TOLERANCE * max(1.0, float(np.abs(values).max(initial=0.0)))
    if values.min(initial=0.0) < -tolerance:
        raise MetricError(f"{name} is not positive semidefinite (min eigenvalue {values.min():.3e})")
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def fid(stats_real: tuple, stats_gen: tuple) -> float:
    """
    ||mu1-mu2||² + Tr(S1 + S2 - 2 (S1 S2)^½). The trace term uses the
    eigenvalues of S1^½ S2 S1^½, which share the spectrum of S1 S2.
    """
    mu1, sigma1 = (np.asarray(x, dtype=np.float64) for x in stats_real)
    mu2, sigma2 = (np.asarray(x, dtype=np.float64) for x in stats_gen)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape or sigma1.shape != (mu1.size, mu1.size):
        raise MetricError(f"FID statistics dimension mismatch: {mu1.shape}/{sigma1.shape} vs {mu2.shape}/{sigma2.shape}")
    root1 = _psd_sqrt(sigma1, "Sigma_real")
    _psd_sqrt_eigenvalues(sigma2, "Sigma_gen")
    cross = _psd_sqrt_eigenvalues(root1 @ sigma2 @ root1, "Sigma_real·Sigma_gen")
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.sqrt(cross).sum())
    return max(value, 0.0) if value > -1e-6 else value


@dataclass
class FeatureStatistics:
    """Mergeable running (count, sum, outer-product sum) of feature vectors."""
    dim: int
    count: int = 0
    total: np.ndarray = field(default=None)
    outer: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.total is None:
            self.total = np.zeros(self.dim)
        if self.outer is None:
            self.outer = np.zeros((self.dim, self.dim))

    def update(self, features: np.ndarray) -> "FeatureStatistics":
        features = np.asarray(features, dtype=np.float64).reshape(-1, self.dim)
        self.count += features.shape[0]
        self.total += features.sum(axis=0)
        self.outer += features.T @ features
        return self

    def merge(self, other: "FeatureStatistics") -> "FeatureStatistics":
        if other.dim != self.dim:
            raise MetricError(f"Cannot merge statistics of dimension {other.dim} into {self.dim}")
        return FeatureStatistics(self.dim, self.count + other.count, self.total + other.total,
                                 self.outer + other.outer)

    @property
    def mean(self) -> np.ndarray:
        return self.total / max(self.count, 1)

    @property
    def covariance(self) -> np.ndarray:
        if self.count < 2:
            raise MetricError("Covariance needs at least two feature vectors")
        mu = self.mean
        return (self.outer - self.count * np.outer(mu, mu)) / (self.count - 1)

    def stats(self) -> tuple:
        return self.mean, self.covariance


def rigid_align(source: np.ndarray, target: np.ndarray, allow_scale: bool = False) -> np.ndarray:
    """
    Least-squares rotation + translation (optionally uniform scale) mapping
    the N×2 `source` points onto `target`; returns the transformed source.
    """
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    s, t = source - mu_s, target - mu_t
    u, singular, vt = np.linalg.svd(s.T @ t)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    correction = np.diag([1.0, d])
    rotation = vt.T @ correction @ u.T
    scale = 1.0
    if allow_scale:
        norm = (s ** 2).sum()
        scale = float((singular * np.diag(correction)).sum() / norm) if norm > 0 else 1.0
    return scale * s @ rotation.T + mu_t


def oks(p: KeypointSet, q: KeypointSet, scale: float = 1.0, kappa=None, image_shape: tuple | None = None,
        allow_scale: bool = False, align: bool = True) -> float:
    """
    Mean over mutually visible joints of exp(-d²/(2 s² κ²)) after aligning p
    onto q. κ defaults to 0.1 × the image diagonal.
    """
    if p.num_joints != q.num_joints:
        raise MetricError(f"Keypoint sets differ in joint count: {p.num_joints} vs {q.num_joints}")
    common = p.visible & q.visible
    if common.sum() < 2:
        raise MetricError(f"OKS needs >= 2 common visible joints, got {int(common.sum())}")
    if kappa is None:
        if image_shape is None:
            raise MetricError("OKS needs kappa or image_shape")
        kappa = OKS_KAPPA_FRACTION * math.hypot(*image_shape[:2])
    kappa = np.broadcast_to(np.asarray(kappa, dtype=np.float64), (p.num_joints,))[common]

    pts_p, pts_q = p.xy[common], q.xy[common]
    if align:
        pts_p = rigid_align(pts_p, pts_q, allow_scale)
    d2 = ((pts_p - pts_q) ** 2).sum(axis=1)
    return float(np.exp(-d2 / (2.0 * scale ** 2 * kappa ** 2)).mean())


def closest_view(view_tuple: ViewTuple, allow_scale: bool = False) -> int:
    """Index of the source whose pose best matches the target; ties go to the lowest index."""
    image_shape = (view_tuple.sources[0].image.height, view_tuple.sources[0].image.width)
    best, best_score = 0, -math.inf
    for i, source in enumerate(view_tuple.sources):
        try:
            score = oks(source.keypoints, view_tuple.target_keypoints, image_shape=image_shape,
                        allow_scale=allow_scale)
        except MetricError:
            score = -1.0
        if score > best_score:
            best, best_score = i, score
    return best


class MetricReport:
    """Per-tuple metric rows plus per-mode aggregates; FID is set-level only."""

    COLUMNS = ("mode", "person_id", "target", "sources")
    METRICS = ("l1", "ssim", "psnr", "lpips")

    def __init__(self, rows: list | None = None, fid_by_mode: dict | None = None, note: str = ""):
        self.rows = list(rows or [])
        self.fid_by_mode = dict(fid_by_mode or {})
        self.note = note

    def add(self, mode: str, person_id: str, target: str, sources, **metrics) -> None:
        self.rows.append({"mode": mode, "person_id": person_id, "target": target,
                          "sources": ",".join(sources), **{m: float(metrics[m]) for m in self.METRICS}})

    @property
    def records(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=[*self.COLUMNS, *self.METRICS])

    @property
    def modes(self) -> list:
        return list(dict.fromkeys(row["mode"] for row in self.rows))

    def aggregates(self) -> pd.DataFrame:
        records = self.records
        table = records.groupby("mode", sort=False)[list(self.METRICS)].mean()
        table["count"] = records.groupby("mode", sort=False).size()
        table["fid"] = [self.fid_by_mode.get(mode, math.nan) for mode in table.index]
        return table.reset_index()

    def aggregate(self, mode: str, metric: str) -> float:
        return float(self.aggregates().set_index("mode").loc[mode, metric])

    def summary(self) -> str:
        return self.aggregates().to_string(index=False, float_format=lambda v: f"{v:.4f}")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        write_json({
            "note": self.note,
            "records": self.rows,
            "aggregates": self.aggregates().to_dict(orient="records"),
        }, path)
        logger.info(f"Saved metric report ({len(self.rows)} records) to {path}")
        return path
