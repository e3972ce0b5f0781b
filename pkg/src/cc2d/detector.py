"""Stage II: heatmap + offset landmark detector trained on pseudo-labels.

For landmark ``k`` at ``(x_k, y_k)`` the heatmap target is the binary disc
``dist <= sigma`` and the offset targets are ``(x - x_k) / sigma`` and
``(y - y_k) / sigma``. Decoding lets every pixel with heat >= 0.5 vote for
the position its offsets point to; the most voted integer position wins.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import EncoderConfig, RunConfig, from_dict
from .geometry import Frame, ImageGeometry, LandmarkSet
from .models import CheckpointError, MultiTaskUNet, get_device, load_checkpoint, save_checkpoint
from .ssl import set_determinism

logger = logging.getLogger(__name__)

TPL_CHECKPOINT = "tpl"
VOTE_THRESHOLD = 0.5


@dataclass
class HeatmapOffsetMaps:
    heat: np.ndarray | torch.Tensor     # (..., K, H, W) probabilities in [0, 1]
    off_x: np.ndarray | torch.Tensor    # offsets in units of sigma
    off_y: np.ndarray | torch.Tensor
    heat_logits: torch.Tensor | None = None

    @property
    def num_landmarks(self) -> int:
        return self.heat.shape[-3]


def build_target_arrays(xy: np.ndarray, sigma: float, size: int | tuple[int, int]) -> HeatmapOffsetMaps:
    """Targets for landmarks ``xy`` (K, 2) in pixels of a ``size`` grid."""
    h, w = (size, size) if isinstance(size, int) else size
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx[None] - xy[:, 0, None, None]
    dy = yy[None] - xy[:, 1, None, None]
    heat = (dx * dx + dy * dy <= sigma * sigma).astype(np.float32)
    return HeatmapOffsetMaps(heat, (dx / sigma).astype(np.float32), (dy / sigma).astype(np.float32))


def build_targets(lms: LandmarkSet, sigma: float, size: int) -> HeatmapOffsetMaps:
    if len(lms) and lms.frame is not Frame.NETWORK:
        raise ValueError("build_targets expects NETWORK-frame landmarks")
    return build_target_arrays(lms.as_array(), sigma, size)


def _t(a) -> torch.Tensor:
    return a if isinstance(a, torch.Tensor) else torch.as_tensor(a)


def tpl_loss(pred: HeatmapOffsetMaps, gt: HeatmapOffsetMaps, eps: float = 1e-7) -> torch.Tensor:
    """Summed per-landmark loss, averaged over any leading batch dimension.

    Per landmark: binary cross-entropy of the heatmap plus, for each offset
    map, the absolute error masked to the ground-truth disc. Both terms are
    averaged over all pixels, so the offset term is zero when the disc is
    empty and the two terms keep a fixed relative weight.
    """
    gh, gx, gy = _t(gt.heat), _t(gt.off_x), _t(gt.off_y)
    px, py = _t(pred.off_x), _t(pred.off_y)
    for name, a in (("heat", pred.heat), ("off_x", px), ("off_y", py)):
        if tuple(a.shape) != tuple(gh.shape):
            raise ValueError(f"pred {name} shape {tuple(a.shape)} != gt shape {tuple(gh.shape)}")
    if pred.heat_logits is not None:
        logits = pred.heat_logits
    else:
        logits = torch.logit(_t(pred.heat).clamp(eps, 1 - eps))
    gh = gh.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, gh, reduction="none").mean(dim=(-2, -1))
    mask = (gh > 0).to(logits.dtype)
    off = ((px - gx.to(px.dtype)).abs() * mask).mean(dim=(-2, -1))
    off = off + ((py - gy.to(py.dtype)).abs() * mask).mean(dim=(-2, -1))
    per_image = (bce + off).sum(dim=-1)
    return per_image.mean() if per_image.dim() else per_image


def decode_network(heat: np.ndarray, off_x: np.ndarray, off_y: np.ndarray, sigma: float,
                   threshold: float = VOTE_THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Majority vote per landmark on maps of shape (K, H, W).

    Returns integer positions (K, 2) and the winning vote counts (K,); a zero
    count means no pixel passed ``threshold`` and the heat argmax was used.
    """
    heat, off_x, off_y = (np.asarray(a, dtype=np.float64) for a in (heat, off_x, off_y))
    k, h, w = heat.shape
    out = np.zeros((k, 2), dtype=np.int64)
    tallies = np.zeros(k, dtype=np.int64)
    for i in range(k):
        ys, xs = np.nonzero(heat[i] >= threshold)
        if len(xs) == 0:
            flat = int(np.argmax(heat[i]))
            out[i] = (flat % w, flat // w)
            continue
        vx = np.floor(xs - sigma * off_x[i, ys, xs] + 0.5).astype(np.int64)
        vy = np.floor(ys - sigma * off_y[i, ys, xs] + 0.5).astype(np.int64)
        vx = np.clip(vx, 0, w - 1)
        vy = np.clip(vy, 0, h - 1)
        counts = np.bincount(vy * w + vx, minlength=h * w)
        win = int(np.argmax(counts))
        out[i] = (win % w, win // w)
        tallies[i] = counts[win]
    return out, tallies


def decode(pred: HeatmapOffsetMaps, geom: ImageGeometry, sigma: float,
           threshold: float = VOTE_THRESHOLD) -> tuple[LandmarkSet, np.ndarray]:
    """Decode one image's maps into an ORIGINAL-frame landmark set plus vote tallies."""
    arrays = [a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else a
              for a in (pred.heat, pred.off_x, pred.off_y)]
    xy, tallies = decode_network(*arrays, sigma=sigma, threshold=threshold)
    net = LandmarkSet.from_array(xy, geom, Frame.NETWORK)
    return net.to_original(), tallies


# -------------------------------------------------------------------- training

def checkpoint_config(cfg: RunConfig, num_landmarks: int) -> dict:
    return {"network_size": cfg.network_size, "num_landmarks": num_landmarks, "sigma": cfg.tpl.sigma,
            "encoder": cfg.to_dict()["tpl"]["encoder"]}


@dataclass
class TPLTrainResult:
    model: MultiTaskUNet
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def train_tpl(images: Sequence[np.ndarray], landmarks: Sequence[np.ndarray], cfg: RunConfig,
              out_ckpt: Path | None = None, log_path: Path | None = None,
              max_epochs: int | None = None, progress_every: int = 25) -> TPLTrainResult:
    """Train the detector from scratch.

    ``images`` are NETWORK-frame arrays; ``landmarks`` the matching (K, 2)
    NETWORK-frame label positions (pseudo-labels or ground truth).
    """
    if len(images) == 0:
        raise ValueError("train_tpl needs at least one labeled image")
    if len(images) != len(landmarks):
        raise ValueError(f"{len(images)} images but {len(landmarks)} label sets")
    ks = {np.asarray(lm).shape[0] for lm in landmarks}
    if len(ks) != 1:
        raise ValueError(f"inconsistent number of landmarks across labels: {sorted(ks)}")
    k = ks.pop()
    n = cfg.network_size
    tcfg = cfg.tpl
    set_determinism(cfg.seed, cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)
    device = get_device()

    x_all = torch.from_numpy(np.stack(images).astype(np.float32))
    targets = [build_target_arrays(lm, tcfg.sigma, n) for lm in landmarks]
    heat_all = torch.from_numpy(np.stack([t.heat for t in targets]))
    offx_all = torch.from_numpy(np.stack([t.off_x for t in targets]))
    offy_all = torch.from_numpy(np.stack([t.off_y for t in targets]))

    model = MultiTaskUNet(tcfg.encoder, k).to(device)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    epochs = tcfg.epochs if max_epochs is None else min(tcfg.epochs, max_epochs)

    writer = log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(["epoch", "loss", "lr"])

    result = TPLTrainResult(model)
    t0 = time.time()
    try:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(images))
            epoch_loss = []
            for s in range(0, len(order), tcfg.batch_size):
                idx = torch.from_numpy(order[s:s + tcfg.batch_size])
                logits, ox, oy = model(x_all[idx].to(device))
                pred = HeatmapOffsetMaps(torch.sigmoid(logits), ox, oy, heat_logits=logits)
                gt = HeatmapOffsetMaps(heat_all[idx].to(device), offx_all[idx].to(device), offy_all[idx].to(device))
                loss = tpl_loss(pred, gt)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_loss.append(float(loss.detach()) * len(idx))
            result.losses.append(sum(epoch_loss) / len(order))
            if writer is not None:
                writer.writerow([epoch, result.losses[-1], tcfg.lr])
                log_fh.flush()
            if progress_every and epoch % progress_every == 0:
                logger.info("tpl epoch %d/%d loss %.4f (%.1fs)", epoch, epochs, result.losses[-1], time.time() - t0)
    finally:
        if log_fh is not None:
            log_fh.close()

    if out_ckpt is not None:
        save_checkpoint(out_ckpt, TPL_CHECKPOINT, checkpoint_config(cfg, k), model, epochs, opt,
                        run_config=cfg.to_dict())
        result.checkpoint = Path(out_ckpt)
    model.eval()
    return result


def load_tpl_model(path, cfg: RunConfig | None = None) -> tuple[MultiTaskUNet, dict]:
    """Load a detector checkpoint; with ``cfg`` given its settings must match."""
    ckpt = load_checkpoint(path, TPL_CHECKPOINT)
    ccfg = ckpt["config"]
    if cfg is not None:
        want = checkpoint_config(cfg, ccfg["num_landmarks"])
        if want != ccfg:
            diff = sorted(key for key in want if want[key] != ccfg.get(key))
            raise CheckpointError(f"{path}: detector checkpoint config differs from the run config in {diff}")
    model = MultiTaskUNet(from_dict(EncoderConfig, ccfg["encoder"]), ccfg["num_landmarks"])
    model.load_state_dict(ckpt["parameters"])
    model.to(get_device())
    model.eval()
    return model, ccfg


@torch.no_grad()
def predict_maps(model: MultiTaskUNet, image: np.ndarray) -> HeatmapOffsetMaps:
    model.eval()
    device = next(model.parameters()).device
    logits, ox, oy = model(torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None].to(device))
    return HeatmapOffsetMaps(torch.sigmoid(logits[0]).cpu(), ox[0].cpu(), oy[0].cpu(), heat_logits=logits[0].cpu())


def predict_landmarks(model: MultiTaskUNet, image: np.ndarray, geom: ImageGeometry,
                      sigma: float) -> tuple[LandmarkSet, np.ndarray]:
    return decode(predict_maps(model, image), geom, sigma)
