"""Stage orchestration shared by the command-line entry points.

A work directory has a fixed layout::

    <workdir>/config.yaml        resolved run configuration
    <workdir>/ckpts/             ssl.pt, tpl.pt
    <workdir>/pseudo/            train.json (pseudo-labels), test.json (stage-I test predictions)
    <workdir>/reports/           <name>.json, <name>.txt, <name>_errors.csv
    <workdir>/figures/           overlays, loss curves, similarity panels
    <workdir>/logs/              ssl_loss.csv, tpl_loss.csv
"""
from __future__ import annotations

import csv
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import plotting
from .config import ConfigError, RunConfig
from .data import (
    DatasetError,
    DatasetManifest,
    PseudoLabelRecord,
    Split,
    load_dataset,
    load_pseudo_labels,
    save_pseudo_labels,
    write_annotation,
)
from .detector import load_tpl_model, predict_landmarks, train_tpl
from .geometry import LandmarkSet
from .inference import (
    build_template_bank,
    embed_query,
    generate_pseudo_labels,
    load_ssl_model,
    localize_from_embeddings,
    predictions_to_record,
)
from .metrics import EvalReport, EvaluationError, evaluate
from .ssl import read_loss_log, train_ssl

logger = logging.getLogger(__name__)

# rows of the layer ablation: every level but one, then all levels
TABLE3_LEVEL_SETS = (
    (4, 3, 2, 1),
    (5, 3, 2, 1),
    (5, 4, 2, 1),
    (5, 4, 3, 1),
    (5, 4, 3, 2),
    (5, 4, 3, 2, 1),
)

WORKDIR_SUBDIRS = ("ckpts", "pseudo", "reports", "figures", "logs")


@dataclass(frozen=True)
class WorkDir:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    def make(self) -> "WorkDir":
        for sub in WORKDIR_SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self

    config = property(lambda self: self.root / "config.yaml")
    ssl_ckpt = property(lambda self: self.root / "ckpts" / "ssl.pt")
    tpl_ckpt = property(lambda self: self.root / "ckpts" / "tpl.pt")
    pseudo_train = property(lambda self: self.root / "pseudo" / "train.json")
    ssl_test = property(lambda self: self.root / "pseudo" / "test.json")
    ssl_log = property(lambda self: self.root / "logs" / "ssl_loss.csv")
    tpl_log = property(lambda self: self.root / "logs" / "tpl_loss.csv")

    def report(self, name: str) -> Path:
        return self.root / "reports" / f"{name}.json"

    def figure(self, name: str) -> Path:
        return self.root / "figures" / f"{name}.png"


class LockError(RuntimeError):
    pass


@contextmanager
def workdir_lock(root: Path):
    """Exclusive lock on a work directory (lockfile created with O_EXCL)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"work directory {root} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# -------------------------------------------------------------------- helpers

def network_images(manifest: DatasetManifest) -> list[np.ndarray]:
    return [manifest.load_network_image(e) for e in manifest.entries]


def ground_truth(manifest: DatasetManifest) -> dict[str, LandmarkSet]:
    return {e.image_id: manifest.load_landmarks(e) for e in manifest.entries}


def records_to_predictions(records: Sequence[PseudoLabelRecord]) -> dict[str, LandmarkSet]:
    return {r.image_id: r.landmarks for r in records}


def evaluate_predictions(preds: Mapping[str, LandmarkSet], manifest: DatasetManifest,
                         exclude: Sequence[str] = ()) -> EvalReport:
    k = manifest.num_landmarks
    for image_id, p in preds.items():
        if len(p) != k:
            raise EvaluationError(f"K mismatch: predictions for {image_id} have K={len(p)}, dataset has K={k}")
    gts = {i: g for i, g in ground_truth(manifest).items() if i not in exclude}
    preds = {i: p for i, p in preds.items() if i not in exclude}
    return evaluate(preds, gts, manifest.geometry)


def write_report(report: EvalReport, path: Path, title: str = "", ids: Sequence[str] | None = None) -> Path:
    """Write ``<stem>.json``, ``<stem>.txt`` and a per-landmark ``<stem>_errors.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    Path(f"{stem}.json").write_text(report.to_json())
    Path(f"{stem}.txt").write_text(report.to_table(title))
    if report.errors_mm is not None:
        with open(f"{stem}_errors.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id"] + [f"landmark_{k}" for k in range(report.errors_mm.shape[1])])
            for i, row in enumerate(report.errors_mm):
                w.writerow([ids[i] if ids else i] + [f"{v:.6f}" for v in row])
    return Path(f"{stem}.json")


def save_overlays(manifest: DatasetManifest, preds: Mapping[str, LandmarkSet], out_dir: Path,
                  prefix: str, limit: int = 4) -> list[Path]:
    out = []
    for entry in manifest.entries[:limit]:
        if entry.image_id not in preds:
            continue
        gt = manifest.load_landmarks(entry).as_array() if entry.annotation_paths else None
        out.append(plotting.plot_overlay(manifest.load_image(entry), preds[entry.image_id].as_array(), gt,
                                         Path(out_dir) / f"{prefix}_{entry.image_id}.png",
                                         title=f"{prefix} {entry.image_id}"))
    return out


def plot_ssl_log(log_path: Path, out: Path) -> Path:
    rows = read_loss_log(log_path)
    steps = [int(r["step"]) for r in rows]
    series = {"total": [float(r["total"]) for r in rows]}
    for lvl in range(1, 6):
        vals = [r[f"loss_l{lvl}"] for r in rows]
        if vals and vals[0] != "":
            series[f"level {lvl}"] = [float(v) for v in vals]
    return plotting.plot_loss_curve(steps, series, out, title="self-supervised loss")


def plot_tpl_log(log_path: Path, out: Path) -> Path:
    with open(log_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return plotting.plot_loss_curve([int(r["epoch"]) for r in rows], {"total": [float(r["loss"]) for r in rows]},
                                    out, xlabel="epoch", title="detector loss")


# --------------------------------------------------------------------- stages

def stage_train_ssl(manifest: DatasetManifest, cfg: RunConfig, out_ckpt: Path, log_path: Path | None = None,
                    max_steps: int | None = None):
    return train_ssl(network_images(manifest), cfg, out_ckpt, log_path, max_steps=max_steps)


def _pyramid_figure_hook(manifest: DatasetManifest, figures_dir: Path, n_images: int = 2, n_landmarks: int = 2):
    shown = set(manifest.ids[:n_images])

    def hook(image_id, pyramids):
        if image_id not in shown:
            return
        entry = manifest.entry(image_id)
        img = manifest.load_network_image(entry)
        gt = manifest.load_landmarks(entry).to_network().as_array() if entry.annotation_paths else None
        for pyr in pyramids[:n_landmarks]:
            plotting.plot_similarity_pyramid(
                img, pyr.levels, pyr.fused, Path(figures_dir) / f"similarity_{image_id}_lm{pyr.anchor_source}.png",
                gt_xy=tuple(gt[pyr.anchor_source]) if gt is not None else None,
                title=f"image {image_id}, landmark {pyr.anchor_source}")

    return hook


def stage_pseudo_labels(train: DatasetManifest, template_id: str, ckpt: Path, cfg: RunConfig, out: Path,
                        query: DatasetManifest | None = None, figures_dir: Path | None = None,
                        skip_errors: bool = False) -> list[PseudoLabelRecord]:
    model = load_ssl_model(ckpt, cfg)
    hook = _pyramid_figure_hook(query or train, figures_dir) if figures_dir is not None else None
    records = generate_pseudo_labels(model, train, template_id, cfg, query_manifest=query,
                                     skip_errors=skip_errors, diagnostics=hook)
    save_pseudo_labels(records, out)
    return records


def stage_train_tpl(manifest: DatasetManifest, records: Sequence[PseudoLabelRecord], cfg: RunConfig,
                    out_ckpt: Path, log_path: Path | None = None, max_epochs: int | None = None):
    if not records:
        raise DatasetError("no pseudo-labels to train on")
    ks = {len(r.landmarks) for r in records}
    if len(ks) != 1:
        raise DatasetError(f"pseudo-labels disagree on K: {sorted(ks)}")
    if ks != {manifest.num_landmarks}:
        raise DatasetError(f"K mismatch: pseudo-labels have K={ks.pop()}, dataset has K={manifest.num_landmarks}")
    by_id = {r.image_id: r for r in records}
    entries = [e for e in manifest.entries if e.image_id in by_id]
    missing = sorted(set(by_id) - {e.image_id for e in entries})
    if missing:
        raise DatasetError(f"pseudo-labels reference images missing from the dataset: {missing[:5]}")
    images = [manifest.load_network_image(e) for e in entries]
    labels = [by_id[e.image_id].landmarks.to_network().as_array() for e in entries]
    return train_tpl(images, labels, cfg, out_ckpt, log_path, max_epochs=max_epochs)


def detector_predictions(ckpt: Path, manifest: DatasetManifest, cfg: RunConfig | None = None
                         ) -> tuple[dict[str, LandmarkSet], dict[str, np.ndarray]]:
    model, ccfg = load_tpl_model(ckpt, cfg)
    if ccfg["num_landmarks"] != manifest.num_landmarks:
        raise EvaluationError(f"K mismatch: detector predicts K={ccfg['num_landmarks']}, "
                              f"dataset has K={manifest.num_landmarks}")
    if ccfg["network_size"] != manifest.geometry.network_size:
        raise ConfigError(f"detector network_size {ccfg['network_size']} != dataset network_size "
                          f"{manifest.geometry.network_size}")
    preds, tallies = {}, {}
    for entry in manifest.entries:
        lms, votes = predict_landmarks(model, manifest.load_network_image(entry), manifest.geometry, ccfg["sigma"])
        preds[entry.image_id] = lms
        tallies[entry.image_id] = votes
    return preds, tallies


def export_predictions(preds: Mapping[str, LandmarkSet], out_dir: Path) -> None:
    """One ``x,y``-per-line file per image, ORIGINAL frame."""
    for image_id, lms in preds.items():
        write_annotation(Path(out_dir) / f"{image_id}.txt", lms.to_original().as_array())


def level_ablation(ckpt: Path, train: DatasetManifest, template_id: str, query: DatasetManifest, cfg: RunConfig,
                   level_sets: Sequence[Sequence[int]] = TABLE3_LEVEL_SETS) -> dict[tuple[int, ...], EvalReport]:
    """Evaluate stage-I predictions for several level subsets, embedding each query once."""
    model = load_ssl_model(ckpt, cfg)
    t_entry = train.entry(template_id)
    bank = build_template_bank(model, train.load_network_image(t_entry), train.load_landmarks(t_entry),
                               cfg.ssl.patch_size)
    exclude = [template_id] if query.split is train.split else []
    cached = {e.image_id: embed_query(model, query.load_network_image(e))
              for e in query.entries if e.image_id not in exclude}
    reports = {}
    for levels in level_sets:
        preds = {}
        for image_id, emb in cached.items():
            xy, conf, _ = localize_from_embeddings(emb, bank, levels, query.geometry.network_size)
            preds[image_id] = predictions_to_record(image_id, xy, conf, query.geometry).landmarks
        reports[tuple(levels)] = evaluate_predictions(preds, query, exclude)
    return reports


# ----------------------------------------------------------------- full chain

def run_cc2d(data_root: Path, template_id: str, cfg: RunConfig, workdir: Path, force: bool = False,
             ssl_max_steps: int | None = None, tpl_max_epochs: int | None = None) -> dict:
    """SSL training -> pseudo-labels -> detector training -> evaluation.

    Stages whose outputs already exist are skipped unless ``force``; a
    changed configuration invalidates an existing work directory.
    """
    wd = WorkDir(workdir)
    with workdir_lock(wd.root):
        wd.make()
        cfg_yaml = cfg.to_yaml()
        if wd.config.exists() and wd.config.read_text() != cfg_yaml and not force:
            raise ConfigError(f"{wd.config} holds a different configuration; use a fresh workdir or --force")
        wd.config.write_text(cfg_yaml)

        train = load_dataset(data_root, Split.TRAIN, cfg.network_size)
        try:
            test = load_dataset(data_root, Split.TEST, cfg.network_size)
        except DatasetError:
            test = None
        if test is not None and test.entries and test.entries[0].image_path == train.entries[0].image_path:
            test = None  # single-split dataset
        if template_id not in train.ids:
            raise DatasetError(f"template {template_id!r} is not in the training split")

        summary: dict = {"workdir": str(wd.root), "stages": {}}

        if force or not wd.ssl_ckpt.exists():
            logger.info("stage 1/4: self-supervised training")
            stage_train_ssl(train, cfg, wd.ssl_ckpt, wd.ssl_log, max_steps=ssl_max_steps)
            summary["stages"]["train_ssl"] = "ran"
        else:
            summary["stages"]["train_ssl"] = "cached"
        if wd.ssl_log.exists():
            plot_ssl_log(wd.ssl_log, wd.figure("ssl_loss"))

        if force or not wd.pseudo_train.exists():
            logger.info("stage 2/4: pseudo-labels")
            stage_pseudo_labels(train, template_id, wd.ssl_ckpt, cfg, wd.pseudo_train,
                                figures_dir=wd.root / "figures")
            summary["stages"]["gen_pseudo"] = "ran"
        else:
            summary["stages"]["gen_pseudo"] = "cached"
        records = load_pseudo_labels(wd.pseudo_train, train.num_landmarks)

        reports = {}
        has_train_gt = all(e.annotation_paths for e in train.entries)
        if has_train_gt:
            rep = evaluate_predictions(records_to_predictions(records), train, exclude=[template_id])
            write_report(rep, wd.report("pseudo_train"), "pseudo-labels vs. ground truth (train, template excluded)",
                         ids=sorted(set(train.ids) - {template_id}))
            reports["pseudo_train"] = rep

        if force or not wd.tpl_ckpt.exists():
            logger.info("stage 3/4: detector training on pseudo-labels")
            stage_train_tpl(train, records, cfg, wd.tpl_ckpt, wd.tpl_log, max_epochs=tpl_max_epochs)
            summary["stages"]["train_tpl"] = "ran"
        else:
            summary["stages"]["train_tpl"] = "cached"
        if wd.tpl_log.exists():
            plot_tpl_log(wd.tpl_log, wd.figure("tpl_loss"))

        logger.info("stage 4/4: evaluation")
        eval_set = test if test is not None else train
        if test is not None:
            if force or not wd.ssl_test.exists():
                stage_pseudo_labels(train, template_id, wd.ssl_ckpt, cfg, wd.ssl_test, query=test)
            ssl_preds = records_to_predictions(load_pseudo_labels(wd.ssl_test, test.num_landmarks))
            rep = evaluate_predictions(ssl_preds, test)
            write_report(rep, wd.report("ssl_test"), "stage I (self-supervised) on the test split", ids=sorted(test.ids))
            reports["ssl_test"] = rep
            save_overlays(test, ssl_preds, wd.root / "figures", "ssl")

        tpl_preds, _ = detector_predictions(wd.tpl_ckpt, eval_set, cfg)
        export_predictions(tpl_preds, wd.root / "reports" / f"predictions_{eval_set.split.value}")
        rep = evaluate_predictions(tpl_preds, eval_set)
        name = f"tpl_{eval_set.split.value}"
        write_report(rep, wd.report(name), f"detector on the {eval_set.split.value} split", ids=sorted(eval_set.ids))
        reports[name] = rep
        save_overlays(eval_set, tpl_preds, wd.root / "figures", "tpl")
        plotting.plot_sdr_bars({k: v.to_dict() for k, v in reports.items()}, wd.figure("sdr"))

        summary["reports"] = {k: v.to_dict() for k, v in reports.items()}
        (wd.root / "reports" / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        return summary
