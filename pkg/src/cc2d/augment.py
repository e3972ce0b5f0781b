"""Patch sampling and augmentation for self-supervised training.

Every transform applied to a patch is also applied to the tracked target
point so the anchor can be read off the augmented patch exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchSample:
    patch: np.ndarray                 # (P, P) float32 in [0, 1]
    patch_origin: tuple[int, int]     # (x, y) of patch pixel (0, 0) in the NETWORK frame
    target_in_patch: tuple[float, float]
    target_in_image: tuple[float, float]

    @property
    def patch_size(self) -> int:
        return self.patch.shape[0]


@dataclass(frozen=True)
class AugmentParams:
    max_rotation_deg: float = 15.0
    brightness: float = 0.2
    contrast: float = 0.2
    margin_px: int = 8
    max_tries: int = 10


def _origin_range(t: float, size: int, patch_size: int, margin: int) -> tuple[int, int]:
    lo = max(0, math.ceil(t - (patch_size - 1 - margin)))
    hi = min(size - patch_size, math.floor(t - margin))
    return lo, hi


def sample_patch(image: np.ndarray, target: tuple[float, float], rng: np.random.Generator,
                 patch_size: int = 192, margin_px: int = 8) -> PatchSample:
    """Crop a random ``patch_size`` square containing ``target``.

    The origin is uniform over every position that keeps the target at least
    ``margin_px`` from the patch border. Near the image border the margin is
    reduced to the largest feasible value (with a warning).
    """
    h, w = image.shape[:2]
    if patch_size > min(h, w):
        raise ValueError(f"patch size {patch_size} larger than image {w}x{h}")
    x, y = target
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"target {target} outside image {w}x{h}")

    ranges = []
    for t, size in ((x, w), (y, h)):
        lo, hi = _origin_range(t, size, patch_size, margin_px)
        if lo > hi:
            m = margin_px
            while lo > hi and m > 0:
                m -= 1
                lo, hi = _origin_range(t, size, patch_size, m)
            if lo > hi:
                # target sits on the very border: clamp the only sensible origin
                lo = hi = int(min(max(0, math.floor(t)), size - patch_size))
            logger.warning("target %s too close to border for margin %d; using margin %d",
                           target, margin_px, m)
        ranges.append((lo, hi))
    ox = int(rng.integers(ranges[0][0], ranges[0][1] + 1))
    oy = int(rng.integers(ranges[1][0], ranges[1][1] + 1))
    patch = np.ascontiguousarray(image[oy:oy + patch_size, ox:ox + patch_size])
    return PatchSample(patch, (ox, oy), (x - ox, y - oy), (x, y))


def rotate_point(p: tuple[float, float], theta_deg: float, center: tuple[float, float]) -> tuple[float, float]:
    """Image of ``p`` when content is rotated by ``theta_deg`` about ``center``."""
    th = math.radians(theta_deg)
    c, s = math.cos(th), math.sin(th)
    dx, dy = p[0] - center[0], p[1] - center[1]
    return center[0] + c * dx - s * dy, center[1] + s * dx + c * dy


def rotate_image(img: np.ndarray, theta_deg: float) -> np.ndarray:
    """Rotate content about the image center with bilinear sampling and edge replication."""
    if theta_deg == 0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    th = math.radians(theta_deg)
    c, s = math.cos(th), math.sin(th)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    # inverse map: output pixel q samples input at R(-theta)(q - c) + c
    src_x = cx + c * dx + s * dy
    src_y = cy - s * dx + c * dy
    out = ndimage.map_coordinates(img, np.stack([src_y, src_x]), order=1, mode="nearest")
    return out.astype(img.dtype)


def _inside(p: tuple[float, float], size: int, margin: int) -> bool:
    return margin <= p[0] <= size - 1 - margin and margin <= p[1] <= size - 1 - margin


def augment_patch(s: PatchSample, rng: np.random.Generator, params: AugmentParams = AugmentParams(),
                  theta_deg: float | None = None) -> PatchSample:
    """Rotate and color-jitter a patch, tracking the target point.

    ``theta_deg`` forces the rotation angle (no resampling); otherwise it is
    drawn uniformly from ``[-max_rotation_deg, max_rotation_deg]`` and redrawn
    up to ``max_tries`` times if the target would leave the margin.
    """
    size = s.patch_size
    center = ((size - 1) / 2, (size - 1) / 2)
    margin = min(params.margin_px, int(min(s.target_in_patch)), int(size - 1 - max(s.target_in_patch)))
    margin = max(margin, 0)

    if theta_deg is None:
        theta = 0.0
        if params.max_rotation_deg > 0:
            for _ in range(params.max_tries):
                cand = float(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg))
                if _inside(rotate_point(s.target_in_patch, cand, center), size, margin):
                    theta = cand
                    break
    else:
        theta = float(theta_deg)
        if not _inside(rotate_point(s.target_in_patch, theta, center), size, 0):
            theta = 0.0

    patch = rotate_image(s.patch, theta)
    target = rotate_point(s.target_in_patch, theta, center) if theta != 0 else s.target_in_patch

    if params.brightness > 0 or params.contrast > 0:
        b = 1.0 + float(rng.uniform(-params.brightness, params.brightness))
        c = 1.0 + float(rng.uniform(-params.contrast, params.contrast))
        mean = float(patch.mean())
        patch = np.clip(((patch - mean) * c + mean) * b, 0.0, 1.0).astype(s.patch.dtype)

    return replace(s, patch=patch, target_in_patch=target)
