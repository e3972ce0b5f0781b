"""Stage I training: cascade patch-to-image matching.

For a random point of a query image, a patch around it is cropped and
augmented; the patch embedding at the point (the anchor) is compared to the
whole query embedding by cosine similarity on every level. The deepest map is
scored in full, shallower maps through an ``alpha x alpha`` window centered on
the point's query-frame grid cell. Each scored matrix is turned into a
distribution by a tempered softmax and penalized by cross-entropy against the
one-hot of the true cell.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentParams, augment_patch, sample_patch
from .config import RunConfig
from .geometry import NUM_LEVELS, downsample_coord
from .models import SSLModel, get_device, save_checkpoint

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-8
SSL_CHECKPOINT = "ssl"


def cosine_similarity_map(anchor: torch.Tensor, feat: torch.Tensor, norm_floor: float = NORM_FLOOR) -> torch.Tensor:
    """Cosine similarity of ``anchor`` against every pixel of ``feat``.

    Accepts ``anchor`` (C,) with ``feat`` (C, H, W), or batched ``anchor``
    (B, C) with ``feat`` (B, C, H, W).
    """
    if anchor.shape[-1] != feat.shape[-3]:
        raise ValueError(f"anchor dim {anchor.shape[-1]} != feature channels {feat.shape[-3]}")
    dot = torch.einsum("...c,...chw->...hw", anchor, feat)
    denom = anchor.norm(dim=-1)[..., None, None] * feat.norm(dim=-3) + norm_floor
    return dot / denom


@dataclass
class MatrixOfInterest:
    level: int
    values: torch.Tensor              # (rows, cols)
    crop_center: tuple[int, int]      # (x, y) on the level grid
    target_onehot: torch.Tensor       # same shape as values, one cell set

    @property
    def target_index(self) -> int:
        return int(torch.argmax(self.target_onehot.reshape(-1)))


def build_matrix_of_interest(s: torch.Tensor, level: int, target: tuple[int, int], alpha: int = 19,
                             deepest: bool | None = None) -> MatrixOfInterest:
    """Select the part of a similarity map that enters the loss.

    On the deepest level the full map is used with the one-hot at ``target``.
    Elsewhere an ``alpha x alpha`` window centered on ``target`` is cut out,
    cells beyond the map are filled with 0, and the one-hot sits at the
    window center.
    """
    if deepest is None:
        deepest = level == NUM_LEVELS
    h, w = s.shape
    tx, ty = target
    if not (0 <= tx < w and 0 <= ty < h):
        raise ValueError(f"target {target} outside level-{level} grid {w}x{h}")
    if deepest:
        onehot = torch.zeros_like(s)
        onehot[ty, tx] = 1.0
        return MatrixOfInterest(level, s, (tx, ty), onehot)

    r = alpha // 2
    x0, y0 = tx - r, ty - r
    vx0, vy0 = max(x0, 0), max(y0, 0)
    vx1, vy1 = min(tx + r, w - 1), min(ty + r, h - 1)
    values = s.new_zeros((alpha, alpha))
    values[vy0 - y0:vy1 - y0 + 1, vx0 - x0:vx1 - x0 + 1] = s[vy0:vy1 + 1, vx0:vx1 + 1]
    onehot = torch.zeros_like(values)
    onehot[r, r] = 1.0
    return MatrixOfInterest(level, values, (tx, ty), onehot)


def ssl_level_losses(mats: Sequence[MatrixOfInterest], temperature: float) -> list[torch.Tensor]:
    """Cross-entropy of ``softmax(values * temperature)`` against each one-hot."""
    out = []
    for m in mats:
        logp = F.log_softmax(m.values.reshape(-1) * temperature, dim=0)
        out.append(-(logp * m.target_onehot.reshape(-1)).sum())
    return out


def ssl_loss(mats: Sequence[MatrixOfInterest], temperature: float) -> torch.Tensor:
    return torch.stack(ssl_level_losses(mats, temperature)).sum()


# -------------------------------------------------------------------- training

@dataclass
class SSLBatch:
    queries: torch.Tensor          # (B, N, N)
    patches: torch.Tensor          # (B, P, P)
    anchor_xy: list[tuple[float, float]]   # in patch pixels, after augmentation
    target_xy: list[tuple[int, int]]       # in query (network) pixels


def make_batch(images: Sequence[np.ndarray], indices: Sequence[int], cfg: RunConfig,
               rng: np.random.Generator) -> SSLBatch:
    scfg = cfg.ssl
    params = AugmentParams(scfg.augment.max_rotation_deg, scfg.augment.brightness,
                           scfg.augment.contrast, scfg.augment.margin_px)
    n = cfg.network_size
    m = scfg.target_margin
    queries, patches, anchors, targets = [], [], [], []
    for i in indices:
        img = images[i]
        tx, ty = (int(v) for v in rng.integers(m, n - m, size=2))
        sample = sample_patch(img, (tx, ty), rng, scfg.patch_size, scfg.augment.margin_px)
        sample = augment_patch(sample, rng, params)
        queries.append(img)
        patches.append(sample.patch)
        anchors.append(sample.target_in_patch)
        targets.append((tx, ty))
    return SSLBatch(torch.from_numpy(np.stack(queries)), torch.from_numpy(np.stack(patches)), anchors, targets)


def batch_loss(model: SSLModel, batch: SSLBatch, cfg: RunConfig, device=None) -> tuple[torch.Tensor, dict[int, float]]:
    """Mean over the batch of the summed per-level losses, plus per-level means."""
    device = device or torch.device("cpu")
    levels = sorted(cfg.ssl.levels_enabled)
    fq = model.embed_query(batch.queries.to(device))
    fp = model.embed_patch(batch.patches.to(device))
    b = batch.queries.shape[0]
    per_level = {lvl: [] for lvl in levels}
    for lvl in levels:
        cells = [downsample_coord(a, lvl) for a in batch.anchor_xy]
        gx = torch.tensor([c[0] for c in cells], device=device)
        gy = torch.tensor([c[1] for c in cells], device=device)
        anchors = fp[lvl][torch.arange(b, device=device), :, gy, gx]
        sims = cosine_similarity_map(anchors, fq[lvl])
        for j in range(b):
            moi = build_matrix_of_interest(sims[j], lvl, downsample_coord(batch.target_xy[j], lvl), cfg.ssl.alpha)
            per_level[lvl].append(ssl_level_losses([moi], cfg.ssl.temperature)[0])
    level_means = {lvl: torch.stack(v).mean() for lvl, v in per_level.items()}
    total = torch.stack(list(level_means.values())).sum()
    return total, {lvl: float(v.detach()) for lvl, v in level_means.items()}


def set_determinism(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def checkpoint_config(cfg: RunConfig) -> dict:
    """The part of the run config a stage-I checkpoint must agree with."""
    return {"network_size": cfg.network_size, "patch_size": cfg.ssl.patch_size, "model": cfg.to_dict()["model"]}


@dataclass
class SSLTrainResult:
    model: SSLModel
    losses: list[float] = field(default_factory=list)
    level_losses: list[dict[int, float]] = field(default_factory=list)
    checkpoint: Path | None = None


LOG_COLUMNS = ["step", "epoch"] + [f"loss_l{i}" for i in range(1, NUM_LEVELS + 1)] + ["total", "lr"]


def train_ssl(images: Sequence[np.ndarray], cfg: RunConfig, out_ckpt: Path | None = None,
              log_path: Path | None = None, max_steps: int | None = None,
              progress_every: int = 100) -> SSLTrainResult:
    """Train both extractors on NETWORK-frame images of side ``cfg.network_size``.

    One epoch is ``ceil(len(images) / batch_size)`` steps. The learning rate is
    halved every ``lr_halving_period`` epochs. ``max_steps`` truncates the run.
    """
    if len(images) == 0:
        raise ValueError("train_ssl needs at least one training image")
    n = cfg.network_size
    for img in images:
        if img.shape != (n, n):
            raise ValueError(f"training images must be {n}x{n} network-frame arrays, got {img.shape}")
    scfg = cfg.ssl
    set_determinism(cfg.seed, cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)
    device = get_device()
    model = SSLModel(cfg.model).to(device)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=scfg.lr)

    steps_per_epoch = math.ceil(len(images) / scfg.batch_size)
    total_steps = scfg.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    log_fh = None
    writer = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_COLUMNS)

    result = SSLTrainResult(model)
    stream: list[int] = []
    t0 = time.time()
    try:
        for step in range(1, total_steps + 1):
            epoch = (step - 1) // steps_per_epoch
            lr = scfg.lr * 0.5 ** (epoch // scfg.lr_halving_period)
            for group in opt.param_groups:
                group["lr"] = lr
            while len(stream) < scfg.batch_size:
                stream.extend(rng.permutation(len(images)).tolist())
            idx, stream = stream[:scfg.batch_size], stream[scfg.batch_size:]
            batch = make_batch(images, idx, cfg, rng)
            loss, per_level = batch_loss(model, batch, cfg, device)
            opt.zero_grad()
            loss.backward()
            opt.step()

            result.losses.append(float(loss.detach()))
            result.level_losses.append(per_level)
            if writer is not None:
                writer.writerow([step, epoch + 1] + [per_level.get(i, "") for i in range(1, NUM_LEVELS + 1)]
                                + [result.losses[-1], lr])
                log_fh.flush()
            if progress_every and step % progress_every == 0:
                logger.info("ssl step %d/%d loss %.4f (%.1fs)", step, total_steps, result.losses[-1], time.time() - t0)
            epoch_done = step % steps_per_epoch == 0
            if out_ckpt is not None and epoch_done and (epoch + 1) % scfg.checkpoint_every == 0 and step < total_steps:
                save_checkpoint(out_ckpt, SSL_CHECKPOINT, checkpoint_config(cfg), model, epoch + 1, opt,
                                run_config=cfg.to_dict())
    finally:
        if log_fh is not None:
            log_fh.close()

    if out_ckpt is not None:
        save_checkpoint(out_ckpt, SSL_CHECKPOINT, checkpoint_config(cfg), model,
                        math.ceil(total_steps / steps_per_epoch), opt, run_config=cfg.to_dict())
        result.checkpoint = Path(out_ckpt)
    model.eval()
    return result


def read_loss_log(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
