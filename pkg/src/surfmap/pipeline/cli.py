"""Command-line entry point: ``surfmap <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from ..dataset import DataError, generate_dataset, load_dataset, write_f32, write_posmap
from ..metrics import EmptyEvaluationError, deformation_heatmap, evaluate_model, overlay_uv, write_report
from ..model import load_checkpoint
from .ablation import run_ablation_suite
from .config import ConfigError, RunConfig
from .train import NumericError, predict, predict_with, train

log = logging.getLogger("surfmap")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e


def _checkpoint_dataset(args, state):
    root = args.dataset or state.get("dataset")
    if not root:
        raise ConfigError("checkpoint does not name its dataset; pass --dataset")
    return load_dataset(root)


def cmd_gen_data(args):
    cfg = RunConfig.load(args.config)
    gen = cfg.gen_config()
    if cfg.dataset:
        gen.out_dir = cfg.dataset
    root = generate_dataset(gen)
    print(f"dataset written to {root}")


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    res = train(cfg)
    print(f"checkpoint: {res.checkpoint}")
    print(json.dumps(res.final))


def cmd_eval(args):
    model, state, _ = _load_checkpoint(args.checkpoint)
    ds = _checkpoint_dataset(args, state)
    report = evaluate_model(model, ds, args.split, weighting=args.weighting)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    write_report(report, out, state.get("config_hash", ""), Path(args.checkpoint).name)
    print((out / "report.md").read_text())


def cmd_predict(args):
    try:
        image = np.asarray(Image.open(args.image).convert("RGB"))
    except OSError as e:
        raise DataError(f"cannot read image {args.image}: {e}") from e
    try:
        pred = predict(args.checkpoint, image)
    except ValueError as e:
        raise DataError(str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    uv = pred.output.uv.numpy()
    write_f32(out / "uv.f32", uv)
    write_posmap(out / "posmap.f32", pred.posmap)
    Image.fromarray((pred.mask * 255).astype(np.uint8)).save(out / "mask.png")
    Image.fromarray(overlay_uv(image, uv, pred.mask)).save(out / "overlay.png")
    print(f"prediction written to {out}")


def cmd_ablate(args):
    cfg = RunConfig.load(args.config)
    result = run_ablation_suite(cfg, cells=args.cells, resume=args.resume)
    print(result.table.read_text())


def cmd_overlays(args):
    model, state, avg = _load_checkpoint(args.checkpoint)
    ds = _checkpoint_dataset(args, state)
    ids = ds.split_ids(args.split)
    if not ids:
        raise DataError(f"split {args.split!r} is empty")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "qualitative"
    out.mkdir(parents=True, exist_ok=True)
    avg = avg or ds.avg_posmap
    rng = np.random.default_rng(args.seed)
    for k in range(args.n):
        inst = int(ids[rng.integers(len(ids))])
        view = int(rng.integers(ds.n_views))
        image = ds.images[inst, view]
        pred = predict_with(model, avg, image)
        panel = np.concatenate([
            image,
            overlay_uv(image, pred.output.uv.numpy(), ds.masks[inst, view]),
            overlay_uv(image, ds.uvs[inst, view], ds.masks[inst, view]),
        ], axis=1)
        Image.fromarray(panel).save(out / f"overlay_{k:02d}_inst{inst:04d}_view{view:03d}.png")
        heat = deformation_heatmap(pred.posmap, avg)
        Image.fromarray(heat).save(out / f"deformation_{k:02d}_inst{inst:04d}.png")
    print(f"{args.n} overlays written to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surfmap", description="Weakly supervised surface mapping on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="render the synthetic multi-view dataset")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train one configuration")
    s.add_argument("--config", required=True)
    s.add_argument("--steps", type=int, help="override the configured step count")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="PCK/AUC evaluation of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--dataset", help="dataset root (defaults to the one the checkpoint was trained on)")
    s.add_argument("--weighting", default="pixel", choices=["pixel", "instance"])
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("predict", help="single-image inference")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("ablate", help="train and evaluate the full ablation ladder")
    s.add_argument("--config", required=True)
    s.add_argument("--cells", nargs="+", help="subset of cells to run")
    s.add_argument("--resume", action="store_true", help="reuse finished runs with an identical config")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("overlays", help="write UV overlays and deformation heatmaps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_overlays)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EmptyEvaluationError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
