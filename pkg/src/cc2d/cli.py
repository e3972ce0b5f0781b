"""Command-line entry point: ``cc2d <command> ...``.

Commands
    gen-synthetic   write a procedural landmark dataset
    train-ssl       stage I: self-supervised training of the two extractors
    gen-pseudo      stage I inference: transfer template landmarks to a split
    train-tpl       stage II: train the heatmap/offset detector on pseudo-labels
    evaluate        MRE / SDR report for detector or stage-I predictions
    ablate-levels   stage-I evaluation over the layer-ablation level subsets
    visualize       overlay predictions (green) and ground truth (red)
    run-cc2d        the whole chain in a resumable work directory

The compute device is taken from the CC2D_DEVICE environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline, plotting
from .config import ConfigError, load_config
from .data import (
    DatasetError,
    Split,
    generate_synthetic_dataset,
    load_annotation,
    load_dataset,
    load_image,
    load_pseudo_labels,
    SYNTHETIC_GEOMETRY,
)
from .geometry import GeometryError, ImageGeometry
from .metrics import EvaluationError
from .models import CheckpointError

logger = logging.getLogger("cc2d")


def _add_config_args(p):
    p.add_argument("--config", default=None,
                   help="YAML config file or preset name ('full', 'synthetic'); default: full settings")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. L=32, levels=5,4,3,2, ssl.epochs=100 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cc2d", description="One-shot landmark detection pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a procedural dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", type=int, default=8, help="training images")
    p.add_argument("--n-test", type=int, default=None, help="test images (default: same as --n-images)")
    p.add_argument("--k", type=int, default=6, help="landmarks per image")
    p.add_argument("--jitter-radius", type=float, default=8.0, help="max landmark displacement, original pixels")
    p.add_argument("--width", type=int, default=SYNTHETIC_GEOMETRY.original_width)
    p.add_argument("--height", type=int, default=SYNTHETIC_GEOMETRY.original_height)
    p.add_argument("--pixel-spacing", type=float, default=SYNTHETIC_GEOMETRY.pixel_spacing_mm)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train-ssl", help="stage I self-supervised training")
    p.add_argument("--data", type=Path, required=True)
    _add_config_args(p)
    p.add_argument("--out-ckpt", type=Path, required=True)
    p.add_argument("--log", type=Path, default=None, help="loss log CSV (default: next to the checkpoint)")
    p.add_argument("--max-steps", type=int, default=None)

    p = sub.add_parser("gen-pseudo", help="stage I inference / pseudo-label generation")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--template-id", required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    _add_config_args(p)
    p.add_argument("--split", choices=[s.value for s in Split], default="train", help="split to label")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--figures", type=Path, default=None, help="write similarity-pyramid panels here")
    p.add_argument("--skip-errors", action="store_true", help="log and skip unreadable images")

    p = sub.add_parser("train-tpl", help="stage II detector training")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--pseudo", type=Path, required=True)
    _add_config_args(p)
    p.add_argument("--out-ckpt", type=Path, required=True)
    p.add_argument("--log", type=Path, default=None)
    p.add_argument("--max-epochs", type=int, default=None)

    p = sub.add_parser("evaluate", help="MRE/SDR report")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=[s.value for s in Split], default="test")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path, help="detector checkpoint")
    src.add_argument("--pseudo", type=Path, help="stage-I prediction file")
    _add_config_args(p)
    p.add_argument("--exclude", action="append", default=[], help="image ids to leave out (e.g. the template)")
    p.add_argument("--report", type=Path, required=True, help="report path; .json/.txt/_errors.csv are written")
    p.add_argument("--figures", type=int, default=4, help="number of overlay figures to render")
    p.add_argument("--export", type=Path, default=None, help="write predictions as x,y files to this directory")

    p = sub.add_parser("ablate-levels", help="stage-I evaluation for each layer-ablation subset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--template-id", required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    _add_config_args(p)
    p.add_argument("--split", choices=[s.value for s in Split], default="test")
    p.add_argument("--report", type=Path, required=True)

    p = sub.add_parser("visualize", help="prediction overlay figure")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True, help="x,y-per-line prediction file")
    p.add_argument("--gt", type=Path, default=None, help="x,y-per-line ground-truth file")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("run-cc2d", help="full pipeline in a work directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--template-id", required=True)
    _add_config_args(p)
    p.add_argument("--workdir", type=Path, required=True)
    p.add_argument("--force", action="store_true", help="rerun stages even if their outputs exist")
    return parser


def _config(args):
    return load_config(args.config, args.override)


def cmd_gen_synthetic(args):
    geom = ImageGeometry(args.width, args.height, args.pixel_spacing, SYNTHETIC_GEOMETRY.network_size)
    n_test = args.n_images if args.n_test is None else args.n_test
    ds = generate_synthetic_dataset(args.out, args.seed, args.n_images, args.k, geom, n_test=n_test,
                                    jitter_radius=args.jitter_radius)
    print(f"wrote {len(ds.train)} train / {len(ds.test) if ds.test else 0} test images to {args.out}")


def cmd_train_ssl(args):
    cfg = _config(args)
    manifest = load_dataset(args.data, Split.TRAIN, cfg.network_size)
    log = args.log or args.out_ckpt.with_suffix(".loss.csv")
    res = pipeline.stage_train_ssl(manifest, cfg, args.out_ckpt, log, max_steps=args.max_steps)
    pipeline.plot_ssl_log(log, log.with_suffix(".png"))
    print(f"saved {args.out_ckpt} after {len(res.losses)} steps, final loss {res.losses[-1]:.4f}")


def cmd_gen_pseudo(args):
    cfg = _config(args)
    train = load_dataset(args.data, Split.TRAIN, cfg.network_size)
    query = load_dataset(args.data, Split(args.split), cfg.network_size) if args.split != "train" else None
    records = pipeline.stage_pseudo_labels(train, args.template_id, args.ckpt, cfg, args.out, query=query,
                                           figures_dir=args.figures, skip_errors=args.skip_errors)
    print(f"wrote {len(records)} records to {args.out}")


def cmd_train_tpl(args):
    cfg = _config(args)
    manifest = load_dataset(args.data, Split.TRAIN, cfg.network_size)
    records = load_pseudo_labels(args.pseudo, manifest.num_landmarks)
    log = args.log or args.out_ckpt.with_suffix(".loss.csv")
    res = pipeline.stage_train_tpl(manifest, records, cfg, args.out_ckpt, log, max_epochs=args.max_epochs)
    pipeline.plot_tpl_log(log, log.with_suffix(".png"))
    print(f"saved {args.out_ckpt} after {len(res.losses)} epochs, final loss {res.losses[-1]:.4f}")


def cmd_evaluate(args):
    cfg = _config(args)
    manifest = load_dataset(args.data, Split(args.split), cfg.network_size)
    if args.ckpt is not None:
        preds, _ = pipeline.detector_predictions(args.ckpt, manifest, cfg)
        label = "detector"
    else:
        records = load_pseudo_labels(args.pseudo)
        ks = {len(r.landmarks) for r in records}
        if ks and ks != {manifest.num_landmarks}:
            raise EvaluationError(f"K mismatch: prediction file has K={sorted(ks)}, dataset has K={manifest.num_landmarks}")
        preds = pipeline.records_to_predictions(records)
        label = "stage I"
    report = pipeline.evaluate_predictions(preds, manifest, exclude=args.exclude)
    ids = sorted(set(manifest.ids) - set(args.exclude))
    path = pipeline.write_report(report, args.report, f"{label} on the {args.split} split", ids=ids)
    fig_dir = args.report.parent / "figures"
    pipeline.save_overlays(manifest, preds, fig_dir, args.report.stem, limit=args.figures)
    plotting.plot_sdr_bars({label: report.to_dict()}, fig_dir / f"{args.report.stem}_sdr.png")
    if args.export is not None:
        pipeline.export_predictions(preds, args.export)
    print(report.to_table(f"{label} on the {args.split} split"), end="")
    print(f"report: {path}")


def cmd_ablate_levels(args):
    cfg = _config(args)
    train = load_dataset(args.data, Split.TRAIN, cfg.network_size)
    query = load_dataset(args.data, Split(args.split), cfg.network_size)
    reports = pipeline.level_ablation(args.ckpt, train, args.template_id, query, cfg)
    rows = {",".join(map(str, levels)): rep.to_dict() for levels, rep in reports.items()}
    args.report.parent.mkdir(parents=True, exist_ok=True)
    args.report.write_text(json.dumps(rows, indent=2) + "\n")
    for name, rep in rows.items():
        sdr = "  ".join(f"{v:6.2f}" for v in rep["sdr"].values())
        print(f"levels {name:<10} MRE {rep['mre_mm']:7.2f} mm  SDR {sdr}")


def cmd_visualize(args):
    img = load_image(args.image)
    h, w = img.shape
    geom = ImageGeometry(w, h, 1.0)
    pred = _read_points(args.pred, geom)
    gt = _read_points(args.gt, geom) if args.gt else None
    if gt is not None and len(gt) != len(pred):
        raise EvaluationError(f"K mismatch: {len(pred)} predictions vs {len(gt)} ground-truth points")
    plotting.plot_overlay(img, pred, gt, args.out)
    print(f"wrote {args.out}")


def _read_points(path: Path, geom: ImageGeometry):
    n = sum(1 for line in Path(path).read_text().splitlines() if line.strip())
    return load_annotation([path], geom, n).as_array()


def cmd_run_cc2d(args):
    cfg = _config(args)
    summary = pipeline.run_cc2d(args.data, args.template_id, cfg, args.workdir, force=args.force)
    for name, rep in summary["reports"].items():
        sdr = "  ".join(f"{k}mm {v:6.2f}%" for k, v in rep["sdr"].items())
        print(f"{name:<14} MRE {rep['mre_mm']:7.3f} mm  {sdr}")


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-ssl": cmd_train_ssl,
    "gen-pseudo": cmd_gen_pseudo,
    "train-tpl": cmd_train_tpl,
    "evaluate": cmd_evaluate,
    "ablate-levels": cmd_ablate_levels,
    "visualize": cmd_visualize,
    "run-cc2d": cmd_run_cc2d,
}

EXPECTED_ERRORS = (ConfigError, DatasetError, EvaluationError, CheckpointError, GeometryError,
                   pipeline.LockError, FileNotFoundError, ValueError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except EXPECTED_ERRORS as exc:
        print(f"cc2d {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
