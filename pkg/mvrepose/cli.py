# mvrepose/cli.py

import argparse
import logging

from .config import load_config
from .dataset import ViewStore
from .evaluate import FUSIONS, MODES, evaluate, evaluation_entries, parse_modes
from .exceptions import DatasetError, ReposeError
from .model import CheckpointManager
from .predict import generate, mixmatch_compose, visualization_grid
from .synthetic import build_dataset
from .train import pretrain_mvf, train_e2e
from .tuples import TupleManifest, build_manifest
from .utils import resolve_device, save_image, set_seed

logger = logging.getLogger(__name__)

TUPLES_FILE = "tuples.jsonl"


def _config(args, **overrides):
    return load_config(getattr(args, "config", None), seed=getattr(args, "seed", None), **overrides)


def _restore(args):
    """Checkpoint model plus the dataset it is evaluated on; the two must agree."""
    manager = CheckpointManager(args.ckpt)
    model = manager.load().to(resolve_device())
    store = ViewStore(args.data or model.cfg.data_dir, model.cfg.pose_sigma)
    store.check_config(model.cfg)
    return model, store


def cmd_synth(args) -> None:
    cfg = _config(args)
    build_dataset(cfg, args.out)


def cmd_tuples(args) -> None:
    cfg = _config(args)
    store = ViewStore(args.data, cfg.pose_sigma)
    fraction = args.test_fraction if args.test_fraction is not None else cfg.test_fraction
    manifest = build_manifest(store.records, cfg.seed, fraction)
    manifest.write(args.out)
    logger.info(f"Tuple counts: {manifest.counts()}")


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    result = pretrain_mvf(cfg, args.data, args.out)
    logger.info(f"Held-out visibility L1: {result.history[0]:.4f} -> {result.history[-1]:.4f}")


def cmd_train(args) -> None:
    cfg = _config(args, max_views=args.max_views, task=args.task)
    result = train_e2e(cfg, args.data, args.tuples, args.out, mvf_ckpt=args.mvf, backbone_ckpt=args.backbone,
                       freeze_mvf=args.freeze_mvf)
    logger.info(f"Saved {result.checkpoint} after {result.steps} steps")


def cmd_eval(args) -> None:
    modes = parse_modes(args.modes)
    manifest = TupleManifest.read(args.tuples)
    evaluation_entries(manifest)
    model, store = _restore(args)
    set_seed(model.cfg.seed)
    report = evaluate(model, store, manifest, modes, fusion=args.fusion, limit=args.limit)
    report.save(args.report)
    print(report.summary())


def cmd_mixmatch(args) -> None:
    model, store = _restore(args)
    id_view, top_view, bottom_view, target = (store.view(*store.resolve(stem))
                                              for stem in (args.id, args.top, args.bottom, args.pose))
    output, _ = mixmatch_compose(model, id_view, top_view, bottom_view, target.keypoints, target.pose_map)
    save_image(output, args.out)
    logger.info(f"Saved composition to {args.out}")


def cmd_armap_viz(args) -> None:
    model, store = _restore(args)
    entries = evaluation_entries(TupleManifest.read(args.tuples or store.root / TUPLES_FILE))
    if not 0 <= args.tuple_index < len(entries):
        raise DatasetError(f"Tuple index {args.tuple_index} out of range (0..{len(entries) - 1})")
    view_tuple = store.view_tuple(entries[args.tuple_index])
    output, armap = generate(model, view_tuple)
    save_image(visualization_grid(view_tuple, output, armap), args.out)
    logger.info(f"Saved ARMap grid to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvrepose", description="Multi-view pose-guided human image generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic multi-view dataset")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tuples", help="build train/test tuple manifest")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--test-fraction", type=float, default=None)
    p.set_defaults(func=cmd_tuples)

    p = sub.add_parser("pretrain", help="visibility pre-training of the fusion network")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="end-to-end multi-view training")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--tuples", type=str, default=None)
    p.add_argument("--mvf", type=str, default=None, help="pre-trained fusion checkpoint")
    p.add_argument("--backbone", type=str, default=None, help="pre-trained backbone checkpoint")
    p.add_argument("--freeze-mvf", action="store_true")
    p.add_argument("--max-views", type=int, default=None, help="1 trains the backbone alone")
    p.add_argument("--task", type=str, default=None, help="repose|mixmatch")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on test tuples")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--tuples", type=str, required=True)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--modes", type=str, default=",".join(MODES))
    p.add_argument("--fusion", type=str, default="learned", choices=FUSIONS)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--report", type=str, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mixmatch", help="compose id, top and bottom from different views")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--id", type=str, required=True, help="view stem, e.g. p0003_v01")
    p.add_argument("--top", type=str, required=True)
    p.add_argument("--bottom", type=str, required=True)
    p.add_argument("--pose", type=str, required=True, help="view whose pose is the target")
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_mixmatch)

    p = sub.add_parser("armap-viz", help="render [sources | target | output | ARMap] for one tuple")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--tuples", type=str, default=None, help=f"defaults to the dataset's {TUPLES_FILE}")
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--tuple-index", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_armap_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ReposeError as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(f"error: {e.message}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}")
        return 1
    return 0
