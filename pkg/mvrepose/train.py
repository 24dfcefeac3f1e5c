"""
Training pipelines: visibility pre-training of the fusion network and
end-to-end multi-view training (joint phase, then generator-only finetune).
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from .config import RUN_ROOT, RunConfig
from .dataset import TupleDataset, ViewStore, VisibilityPairDataset, visibility_pairs
from .domain import LossWeights
from .exceptions import EmptyManifestError, NonFiniteLossError
from .losses import (VISIBILITY_GROUPS, RandomConvExtractor, balanced_mean, lsgan_d_loss, total_loss,
                     visibility_group_errors, visibility_loss)
from .model import CheckpointManager, MultiViewReposer
from .tuples import TupleManifest, split_persons, truncate_views
from .utils import resolve_device, set_seed, write_run_metadata

logger = logging.getLogger(__name__)


@dataclass
class PretrainResult:
    """
    history is the held-out balanced visibility L1 (initial value first),
    foreground_history the same over visible and occluded target pixels only
    and l1_history the plain per-pixel mean. A constant 0.5 map scores
    `baseline` on the first two.
    """
    checkpoint: Path
    history: list = field(default_factory=list)
    foreground_history: list = field(default_factory=list)
    l1_history: list = field(default_factory=list)
    baseline: float = 0.5


@dataclass
class TrainResult:
    checkpoint: Path
    history: list = field(default_factory=list)
    steps: int = 0


def _check_finite(loss: torch.Tensor, breakdown: dict, where: str) -> None:
    if not torch.isfinite(loss):
        logger.error(f"Non-finite loss at {where}: {breakdown}")
        raise NonFiniteLossError(f"Non-finite loss at {where}", breakdown)


def _loader(dataset, batch_size: int, shuffle: bool, generator: torch.Generator, num_workers: int) -> DataLoader:
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator,
                      num_workers=num_workers, drop_last=False)


def _adam(params, lr: float, cfg: RunConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def _out_dir(out_dir, stage: str) -> Path:
    path = Path(out_dir) if out_dir is not None else RUN_ROOT / stage
    path.mkdir(parents=True, exist_ok=True)
    return path


@torch.no_grad()
def visibility_scores(model: MultiViewReposer, loader: DataLoader, device: torch.device) -> dict:
    """Held-out scores of the first-slot visibility prediction, pooled over every pixel of the loader."""
    model.mvf.eval()
    sums = torch.zeros(len(VISIBILITY_GROUPS), dtype=torch.float64)
    counts = torch.zeros(len(VISIBILITY_GROUPS), dtype=torch.float64)
    for batch in loader:
        pred = model.mvf.predict_visibility(batch["image"].to(device), batch["pose"].to(device),
                                            batch["target_pose"].to(device))
        group_sums, group_counts = visibility_group_errors(pred, batch["visibility"].to(device),
                                                           batch["target_mask"].to(device))
        sums += group_sums.double().cpu()
        counts += group_counts.double().cpu()
    return {
        "balanced": float(balanced_mean(sums, counts)),
        "foreground": float(balanced_mean(sums[1:], counts[1:])),
        "l1": float(sums.sum() / counts.sum().clamp(min=1)),
        **{name: float(s / c) if c else math.nan for name, s, c in zip(VISIBILITY_GROUPS, sums, counts)},
    }


def pretrain_mvf(cfg: RunConfig, data_dir=None, out_dir=None) -> PretrainResult:
    """
    Fit the fusion network to predict analytic visibility maps with the
    group-balanced L1 of `visibility_loss`. Train pairs come from train
    persons, the held-out curve from the remaining persons.
    """
    device = resolve_device()
    generator = set_seed(cfg.seed)
    out_dir = _out_dir(out_dir, "pretrain")
    store = ViewStore(data_dir or cfg.data_dir, cfg.pose_sigma)
    store.check_config(cfg)

    train_ids, test_ids = split_persons(store.groups(), cfg.test_fraction, cfg.seed)
    if not test_ids:
        logger.warning("No held-out persons; measuring the held-out curve on train persons")
        test_ids = train_ids
    train_pairs = visibility_pairs(store, train_ids, cfg.max_pretrain_pairs, cfg.seed)
    held_pairs = visibility_pairs(store, test_ids, cfg.max_pretrain_pairs, cfg.seed + 1)
    logger.info(f"Visibility pre-training on {len(train_pairs)} pairs, {len(held_pairs)} held out")

    train_loader = _loader(VisibilityPairDataset(store, train_pairs), cfg.pretrain_batch, True, generator,
                           cfg.num_workers)
    held_loader = _loader(VisibilityPairDataset(store, held_pairs), cfg.pretrain_batch, False, None,
                          cfg.num_workers)

    model = MultiViewReposer(cfg).to(device)
    optimizer = _adam(model.mvf.parameters(), cfg.pretrain_lr, cfg)
    scores = [visibility_scores(model, held_loader, device)]
    logger.info(f"Initial held-out visibility L1 {scores[0]['balanced']:.4f} (balanced)")

    rows, step = [], 0
    for epoch in range(cfg.pretrain_epochs):
        model.mvf.train()
        for batch in tqdm(train_loader, desc=f"pretrain {epoch + 1}/{cfg.pretrain_epochs}", leave=False):
            maps = model.mvf.visibility_maps(batch["image"].to(device), batch["pose"].to(device),
                                             batch["target_pose"].to(device))
            loss = visibility_loss(maps, batch["visibility"].to(device).expand_as(maps),
                                   batch["target_mask"].to(device).expand_as(maps))
            _check_finite(loss, {"vis": float(loss.detach())}, f"pretrain step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            rows.append({"step": step, "epoch": epoch, "vis": float(loss.detach())})
            if step % cfg.log_every == 0:
                logger.debug(f"pretrain step {step}: vis L1 {float(loss):.4f}")
            step += 1
        scores.append(visibility_scores(model, held_loader, device))
        logger.info(f"Epoch {epoch + 1}/{cfg.pretrain_epochs}: held-out visibility L1 {scores[-1]['balanced']:.4f} "
                    f"(foreground {scores[-1]['foreground']:.4f}, plain {scores[-1]['l1']:.4f})")

    history = [s["balanced"] for s in scores]

    checkpoint = CheckpointManager(out_dir / "mvf.pt").save(model, {"stage": "pretrain", "history": history})
    pd.DataFrame(rows, columns=["step", "epoch", "vis"]).to_csv(out_dir / "pretrain_loss.csv", index=False)
    pd.DataFrame(scores).rename_axis("epoch").to_csv(out_dir / "pretrain_heldout.csv")
    write_run_metadata(out_dir, cfg, "pretrain", history=history, pairs=len(train_pairs), held_out=len(held_pairs))
    return PretrainResult(checkpoint, history, [s["foreground"] for s in scores], [s["l1"] for s in scores])


def load_train_entries(cfg: RunConfig, tuples_path) -> list:
    manifest = TupleManifest.read(tuples_path)
    entries = [truncate_views(e, cfg.max_views) for e in manifest.split("train").entries]
    if not entries:
        raise EmptyManifestError(f"empty manifest: no train tuples in {tuples_path}")
    if cfg.max_train_tuples and len(entries) > cfg.max_train_tuples:
        keep = np.sort(np.random.default_rng(cfg.seed).choice(len(entries), cfg.max_train_tuples, replace=False))
        entries = [entries[i] for i in keep]
    return entries


def train_e2e(cfg: RunConfig, data_dir=None, tuples_path=None, out_dir=None, mvf_ckpt=None,
              backbone_ckpt=None, freeze_mvf: bool = False) -> TrainResult:
    """
    Joint training of fusion network, backbone and discriminator with
    alternating discriminator / generator steps, followed by a finetune of
    the backbone alone. max_views=1 trains the backbone on replicated views.
    """
    device = resolve_device()
    generator = set_seed(cfg.seed)
    out_dir = _out_dir(out_dir, "train")
    store = ViewStore(data_dir or cfg.data_dir, cfg.pose_sigma)
    store.check_config(cfg)
    entries = load_train_entries(cfg, tuples_path or Path(cfg.tuples_path))
    logger.info(f"Training on {len(entries)} tuples (max_views={cfg.max_views}, task={cfg.task})")
    loader = _loader(TupleDataset(store, entries, cfg.task), cfg.train_batch, True, generator, cfg.num_workers)

    model = MultiViewReposer(cfg).to(device)
    if mvf_ckpt:
        CheckpointManager(mvf_ckpt).load(cfg, parts=("mvf",), model=model)
    if backbone_ckpt:
        CheckpointManager(backbone_ckpt).load(cfg, parts=("backbone", "discriminator"), model=model)
    train_mvf = not freeze_mvf and cfg.max_views > 1
    model.mvf.requires_grad_(train_mvf)

    weights = LossWeights.from_config(cfg)
    extractor = RandomConvExtractor(cfg.extractor_levels, seed=cfg.extractor_seed).to(device)
    d_optimizer = _adam(model.discriminator.parameters(), cfg.train_lr, cfg)

    rows, history, step = [], [], 0
    for phase, epochs in (("joint", cfg.train_epochs), ("finetune", cfg.finetune_epochs)):
        joint = phase == "joint"
        if not joint:
            model.mvf.requires_grad_(False)
            model.discriminator.requires_grad_(False)
        g_optimizer = _adam(model.generator_parameters(include_mvf=joint and train_mvf), cfg.train_lr, cfg)
        for epoch in range(epochs):
            model.train()
            epoch_totals = []
            for batch in tqdm(loader, desc=f"{phase} {epoch + 1}/{epochs}", leave=False):
                images = batch["images"].to(device).unbind(1)
                poses = batch["poses"].to(device).unbind(1)
                target_pose = batch["target_pose"].to(device)
                target_image = batch["target_image"].to(device)
                out = model.generate(images, poses, target_pose)

                d_loss = math.nan
                if joint and weights.alpha_adv:
                    d_total = lsgan_d_loss(model.discriminator(target_image, target_pose),
                                           model.discriminator(out.image.detach(), target_pose))
                    _check_finite(d_total, {"d": float(d_total.detach())}, f"{phase} step {step}")
                    d_optimizer.zero_grad()
                    d_total.backward()
                    d_optimizer.step()
                    d_loss = float(d_total.detach())

                fake_scores = model.discriminator(out.image, target_pose) if weights.alpha_adv else None
                loss, breakdown = total_loss(out.image, target_image, fake_scores, weights, extractor)
                if cfg.alpha_vis and cfg.task == "repose":
                    visibility = batch["visibility"].to(device)
                    target_mask = batch["target_mask"].to(device)
                    vis = sum(visibility_loss(w.visibility, visibility[:, i], target_mask)
                              for i, w in enumerate(out.warps)) / len(out.warps)
                    loss = loss + cfg.alpha_vis * vis
                    breakdown["vis"] = float(vis.detach())
                    breakdown["total"] = float(loss.detach())
                _check_finite(loss, breakdown, f"{phase} step {step}")
                g_optimizer.zero_grad()
                loss.backward()
                g_optimizer.step()

                rows.append({"step": step, "phase": phase, "epoch": epoch, "d": d_loss, **breakdown})
                epoch_totals.append(breakdown["total"])
                if step % cfg.log_every == 0:
                    logger.debug(f"{phase} step {step}: {breakdown}")
                step += 1
            history.append(float(np.mean(epoch_totals)) if epoch_totals else math.nan)
            logger.info(f"{phase} epoch {epoch + 1}/{epochs}: mean total loss {history[-1]:.4f}")

    checkpoint = CheckpointManager(out_dir / "model.pt").save(model, {"stage": "train", "history": history})
    pd.DataFrame(rows).to_csv(out_dir / "loss.csv", index=False)
    write_run_metadata(out_dir, cfg, "train", history=history, tuples=len(entries), steps=step,
                       mvf_ckpt=str(mvf_ckpt) if mvf_ckpt else None,
                       backbone_ckpt=str(backbone_ckpt) if backbone_ckpt else None)
    return TrainResult(checkpoint, history, step)
