"""Stage I inference: transfer the template's landmarks to query images.

Each template landmark contributes one anchor vector per level, taken from a
patch centered on it. For a query image the per-level cosine maps are clipped
to [0, 1], upsampled bilinearly to the network resolution and multiplied; the
argmax of the product is the prediction and its value the confidence.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .data import DatasetManifest, LabelSource, PseudoLabelRecord
from .geometry import NUM_LEVELS, Frame, ImageGeometry, LandmarkSet
from .models import SSLModel, get_device, load_checkpoint
from .ssl import SSL_CHECKPOINT, checkpoint_config, cosine_similarity_map

logger = logging.getLogger(__name__)

ALL_LEVELS = tuple(range(1, NUM_LEVELS + 1))


@dataclass
class TemplateBank:
    anchors: dict[int, torch.Tensor]      # level -> (K, C)
    landmarks: np.ndarray                 # (K, 2) NETWORK frame
    patch_origins: np.ndarray             # (K, 2) integer (x, y)
    geometry: ImageGeometry

    def __len__(self):
        return self.landmarks.shape[0]


@dataclass
class SimilarityPyramid:
    levels: dict[int, np.ndarray]         # raw cosine maps at native resolution
    fused: np.ndarray                     # (N, N) product of clipped, upsampled maps
    anchor_source: int


def template_patch_origin(x: float, y: float, patch_size: int, size: int) -> tuple[int, int]:
    """Origin of the patch centered on (x, y), clamped into the image."""
    half = patch_size // 2
    ox = int(math.floor(x + 0.5)) - half
    oy = int(math.floor(y + 0.5)) - half
    return min(max(ox, 0), size - patch_size), min(max(oy, 0), size - patch_size)


@torch.no_grad()
def build_template_bank(model: SSLModel, template_image: np.ndarray, landmarks: LandmarkSet,
                        patch_size: int) -> TemplateBank:
    """Embed a patch around every template landmark and keep its anchor vectors.

    ``template_image`` is the NETWORK-frame image; ``landmarks`` are ORIGINAL-frame.
    """
    model.eval()
    n = template_image.shape[0]
    net = landmarks.to_network().as_array()
    origins = np.array([template_patch_origin(x, y, patch_size, n) for x, y in net], dtype=np.int64)
    patches = np.stack([template_image[oy:oy + patch_size, ox:ox + patch_size] for ox, oy in origins])
    device = next(model.parameters()).device
    emb = model.embed_patch(torch.from_numpy(patches).to(device))
    local = net - origins
    anchors = {}
    for lvl in ALL_LEVELS:
        stride = 2 ** lvl
        gx = torch.from_numpy(np.floor(local[:, 0] / stride).astype(np.int64)).to(device)
        gy = torch.from_numpy(np.floor(local[:, 1] / stride).astype(np.int64)).to(device)
        anchors[lvl] = emb[lvl][torch.arange(len(net), device=device), :, gy, gx]
    return TemplateBank(anchors, net, origins, landmarks.geometry)


def fuse_similarity_maps(maps: dict[int, torch.Tensor], size: int) -> torch.Tensor:
    """Clip each map (..., h, w) to [0, 1], upsample to ``size`` and multiply."""
    fused = None
    for lvl in sorted(maps):
        s = maps[lvl].clamp(min=0.0, max=1.0)
        lead = s.shape[:-2]
        up = F.interpolate(s.reshape(-1, 1, *s.shape[-2:]), size=(size, size), mode="bilinear",
                           align_corners=False).reshape(*lead, size, size)
        fused = up if fused is None else fused * up
    return fused


def argmax_2d(fused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Row-major first maximum of (..., H, W): returns x, y, value."""
    w = fused.shape[-1]
    flat = fused.reshape(*fused.shape[:-2], -1)
    idx = torch.argmax(flat, dim=-1)
    val = torch.gather(flat, -1, idx.unsqueeze(-1)).squeeze(-1)
    return idx % w, idx // w, val


@torch.no_grad()
def embed_query(model: SSLModel, query_image: np.ndarray) -> dict[int, torch.Tensor]:
    """Query embeddings (level -> (C, h, w)) for one NETWORK-frame image."""
    model.eval()
    device = next(model.parameters()).device
    emb = model.embed_query(torch.from_numpy(np.ascontiguousarray(query_image))[None].to(device))
    return {lvl: v[0] for lvl, v in emb.items()}


@torch.no_grad()
def localize_from_embeddings(query_emb: dict[int, torch.Tensor], bank: TemplateBank,
                             levels: Sequence[int] = ALL_LEVELS, size: int | None = None,
                             keep_maps: bool = False):
    """Predict all landmarks from cached query embeddings.

    Returns ``(xy (K, 2) int array, confidences (K,), pyramids or None)``.
    """
    if size is None:
        size = query_emb[1].shape[-1] * 2
    maps = {lvl: cosine_similarity_map(bank.anchors[lvl], query_emb[lvl].expand(len(bank), -1, -1, -1))
            for lvl in levels}
    fused = fuse_similarity_maps(maps, size)
    x, y, val = argmax_2d(fused)
    xy = torch.stack([x, y], dim=-1).cpu().numpy()
    conf = val.clamp(0.0, 1.0).cpu().numpy().astype(np.float64)
    pyramids = None
    if keep_maps:
        pyramids = [SimilarityPyramid({lvl: maps[lvl][k].cpu().numpy() for lvl in levels},
                                      fused[k].cpu().numpy(), k) for k in range(len(bank))]
    return xy, conf, pyramids


def fuse_and_localize(model: SSLModel, query_image: np.ndarray, bank: TemplateBank, k: int,
                      levels: Sequence[int] = ALL_LEVELS) -> tuple[tuple[int, int], float, SimilarityPyramid]:
    """Locate template landmark ``k`` in a NETWORK-frame query image."""
    emb = embed_query(model, query_image)
    single = TemplateBank({lvl: a[k:k + 1] for lvl, a in bank.anchors.items()}, bank.landmarks[k:k + 1],
                          bank.patch_origins[k:k + 1], bank.geometry)
    xy, conf, pyr = localize_from_embeddings(emb, single, levels, query_image.shape[0], keep_maps=True)
    pyr[0].anchor_source = k
    return (int(xy[0, 0]), int(xy[0, 1])), float(conf[0]), pyr[0]


def load_ssl_model(ckpt_path, cfg: RunConfig) -> SSLModel:
    ckpt = load_checkpoint(ckpt_path, SSL_CHECKPOINT, checkpoint_config(cfg))
    model = SSLModel(cfg.model)
    model.load_state_dict(ckpt["parameters"])
    model.to(get_device())
    model.eval()
    return model


def predictions_to_record(image_id: str, xy: np.ndarray, conf: np.ndarray, geom: ImageGeometry,
                          source: LabelSource = LabelSource.SSL) -> PseudoLabelRecord:
    net = LandmarkSet.from_array(xy, geom, Frame.NETWORK)
    return PseudoLabelRecord(image_id, net.to_original(), tuple(float(c) for c in conf), source)


def generate_pseudo_labels(model: SSLModel, train_manifest: DatasetManifest, template_id: str,
                           cfg: RunConfig, query_manifest: DatasetManifest | None = None,
                           skip_errors: bool = False, levels: Sequence[int] | None = None,
                           diagnostics=None) -> list[PseudoLabelRecord]:
    """One record per query image (the train split by default).

    The template image's record carries its own annotation with source
    GROUND_TRUTH. ``diagnostics(image_id, pyramids)`` is called per image when given.
    """
    if template_id not in train_manifest.ids:
        raise ValueError(f"template {template_id!r} is not in the training split")
    query_manifest = query_manifest or train_manifest
    levels = tuple(levels or cfg.infer.levels_enabled)
    geom = train_manifest.geometry
    t_entry = train_manifest.entry(template_id)
    t_landmarks = train_manifest.load_landmarks(t_entry)
    bank = build_template_bank(model, train_manifest.load_network_image(t_entry), t_landmarks, cfg.ssl.patch_size)

    records = []
    for entry in query_manifest.entries:
        if query_manifest.split is train_manifest.split and entry.image_id == template_id:
            records.append(PseudoLabelRecord(template_id, t_landmarks, (1.0,) * len(t_landmarks),
                                             LabelSource.GROUND_TRUTH))
            continue
        try:
            img = query_manifest.load_network_image(entry)
        except Exception as exc:
            if not skip_errors:
                raise
            logger.error("skipping %s: %s", entry.image_id, exc)
            continue
        emb = embed_query(model, img)
        xy, conf, pyr = localize_from_embeddings(emb, bank, levels, geom.network_size,
                                                 keep_maps=diagnostics is not None)
        if diagnostics is not None:
            diagnostics(entry.image_id, pyr)
        records.append(predictions_to_record(entry.image_id, xy, conf, geom))
    return records
