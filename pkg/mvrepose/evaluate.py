"""
Evaluation sweeps over a tuple manifest: every test tuple is generated once
per mode (1, 2 or 3 sources, or the single source closest to the target
pose) and scored per tuple, with FID computed per mode over the whole set.
"""

import logging

import numpy as np
from tqdm import tqdm

from .dataset import ViewStore
from .exceptions import ConfigError, EmptyManifestError, MetricError
from .losses import RandomConvExtractor
from .metrics import FeatureStatistics, MetricReport, closest_view, feature_distance, fid, pooled_features, psnr, ssim
from .model import MultiViewReposer
from .predict import armap_from_visibility, generate
from .tuples import TupleEntry, TupleManifest, pad_sources, truncate_views

logger = logging.getLogger(__name__)

MODES = ("1", "2", "3", "closest")
FUSIONS = ("learned", "visibility")


def parse_modes(text: str) -> tuple:
    modes = tuple(m.strip() for m in str(text).split(",") if m.strip())
    unknown = [m for m in modes if m not in MODES]
    if not modes or unknown:
        raise ConfigError(f"Modes must be a comma list of {', '.join(MODES)}, got '{text}'")
    return tuple(dict.fromkeys(modes))


def entry_for_mode(store: ViewStore, entry: TupleEntry, mode: str) -> TupleEntry:
    if mode == "closest":
        index = closest_view(store.view_tuple(entry))
        return TupleEntry(entry.split, entry.person_id, entry.target, pad_sources((entry.sources[index],)))
    return truncate_views(entry, int(mode))


def evaluation_entries(manifest: TupleManifest) -> list:
    entries = list(manifest.split("test").entries)
    if not entries and len(manifest):
        logger.warning("Manifest has no test tuples; evaluating every entry")
        entries = list(manifest.entries)
    if not entries:
        raise EmptyManifestError("empty manifest")
    return entries


def evaluate(model: MultiViewReposer, store: ViewStore, manifest: TupleManifest, modes=MODES,
             extractor=None, fusion: str = "learned", limit: int = 0) -> MetricReport:
    """
    Score generations for every requested mode. fusion="visibility" replaces
    the learned ARMap with normalised ground-truth visibility of the sources.
    """
    if fusion not in FUSIONS:
        raise ConfigError(f"Unknown fusion '{fusion}', expected one of {', '.join(FUSIONS)}")
    store.check_config(model.cfg)
    entries = evaluation_entries(manifest)
    if limit:
        entries = entries[:limit]
    if extractor is None:
        extractor = RandomConvExtractor(model.cfg.extractor_levels, seed=model.cfg.extractor_seed)
    extractor = extractor.cpu().eval()

    report = MetricReport(note=f"fusion={fusion}; lpips column is a random-feature distance")
    for mode in modes:
        real, fake = None, None
        for entry in tqdm(entries, desc=f"eval mode {mode}", leave=False):
            entry = entry_for_mode(store, entry, mode)
            view_tuple = store.view_tuple(entry)
            weights = None
            if fusion == "visibility":
                maps = [store.visibility(entry.person_id, v, entry.target) for v in entry.sources]
                weights = armap_from_visibility(maps, model.cfg.armap_size)
            output, _ = generate(model, view_tuple, weights)
            target = view_tuple.target_image
            report.add(mode, entry.person_id, entry.target, entry.sources,
                       l1=float(np.abs(output.values - target.values).mean()),
                       ssim=ssim(output, target), psnr=psnr(output, target),
                       lpips=feature_distance(output, target, extractor))

            real_features = pooled_features(target.to_tensor(), extractor)
            fake_features = pooled_features(output.to_tensor(), extractor)
            if real is None:
                real = FeatureStatistics(real_features.shape[1])
                fake = FeatureStatistics(fake_features.shape[1])
            real.update(real_features)
            fake.update(fake_features)
        try:
            report.fid_by_mode[mode] = fid(real.stats(), fake.stats())
        except MetricError as e:
            logger.warning(f"FID unavailable for mode {mode}: {e.message}")
        logger.info(f"Evaluated mode {mode} on {len(entries)} tuples")
    return report
