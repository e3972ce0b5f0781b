"""Coordinate frames and landmark containers.

Convention used throughout the package: ``x`` is the column, ``y`` the row,
origin at the top-left corner, pixel centers at integer coordinates.
Landmarks live either in the ORIGINAL frame (full-resolution image pixels)
or in the NETWORK frame (the square image the networks consume).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

NUM_LEVELS = 5


class Frame(enum.Enum):
    ORIGINAL = "original"
    NETWORK = "network"


class GeometryError(ValueError):
    """Raised for out-of-frame coordinates or inconsistent frames."""


@dataclass(frozen=True)
class ImageGeometry:
    original_width: int
    original_height: int
    pixel_spacing_mm: float
    network_size: int = 384

    def __post_init__(self):
        if self.original_width <= 0 or self.original_height <= 0:
            raise GeometryError(f"image size must be positive, got {self.original_width}x{self.original_height}")
        if self.network_size <= 0:
            raise GeometryError(f"network_size must be positive, got {self.network_size}")
        if not self.pixel_spacing_mm > 0:
            raise GeometryError(f"pixel_spacing_mm must be positive, got {self.pixel_spacing_mm}")

    @property
    def scale_x(self) -> float:
        """Network pixels per original pixel along x."""
        return self.network_size / self.original_width

    @property
    def scale_y(self) -> float:
        return self.network_size / self.original_height

    def size(self, frame: Frame) -> tuple[int, int]:
        """(width, height) of ``frame``."""
        if frame is Frame.ORIGINAL:
            return self.original_width, self.original_height
        return self.network_size, self.network_size

    def with_network_size(self, network_size: int) -> "ImageGeometry":
        return ImageGeometry(self.original_width, self.original_height, self.pixel_spacing_mm, network_size)

    def to_dict(self) -> dict:
        return {
            "original_width": self.original_width,
            "original_height": self.original_height,
            "pixel_spacing_mm": self.pixel_spacing_mm,
            "network_size": self.network_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageGeometry":
        return cls(int(d["original_width"]), int(d["original_height"]),
                   float(d["pixel_spacing_mm"]), int(d.get("network_size", 384)))


# ISBI 2015 cephalometric challenge images
ISBI_GEOMETRY = ImageGeometry(1935, 2400, 0.1, 384)


@dataclass(frozen=True)
class Landmark:
    index: int
    x: float
    y: float
    frame: Frame

    def check_bounds(self, geom: ImageGeometry) -> None:
        w, h = geom.size(self.frame)
        if not (0 <= self.x < w and 0 <= self.y < h):
            raise GeometryError(
                f"landmark {self.index} at ({self.x}, {self.y}) outside {self.frame.value} frame {w}x{h}")

    @property
    def xy(self) -> tuple[float, float]:
        return self.x, self.y


def to_network_frame(lm: Landmark, geom: ImageGeometry) -> Landmark:
    if lm.frame is not Frame.ORIGINAL:
        raise GeometryError(f"expected ORIGINAL frame, got {lm.frame.value}")
    lm.check_bounds(geom)
    return Landmark(lm.index, lm.x * geom.scale_x, lm.y * geom.scale_y, Frame.NETWORK)


def from_network_frame(lm: Landmark, geom: ImageGeometry) -> Landmark:
    if lm.frame is not Frame.NETWORK:
        raise GeometryError(f"expected NETWORK frame, got {lm.frame.value}")
    lm.check_bounds(geom)
    return Landmark(lm.index, lm.x / geom.scale_x, lm.y / geom.scale_y, Frame.ORIGINAL)


def downsample_coord(p: Sequence[float], level: int) -> tuple[int, int]:
    """Grid cell containing level-0 point ``p`` on the stride ``2**level`` grid."""
    if not 1 <= level <= NUM_LEVELS:
        raise ValueError(f"level must be in 1..{NUM_LEVELS}, got {level}")
    x, y = p
    if x < 0 or y < 0:
        raise GeometryError(f"negative coordinate {p}")
    stride = 2 ** level
    return int(math.floor(x / stride)), int(math.floor(y / stride))


@dataclass(frozen=True)
class LandmarkSet:
    geometry: ImageGeometry
    landmarks: tuple[Landmark, ...] = field(default_factory=tuple)

    def __post_init__(self):
        lms = tuple(self.landmarks)
        object.__setattr__(self, "landmarks", lms)
        if [lm.index for lm in lms] != list(range(len(lms))):
            raise GeometryError(f"landmark indices must be 0..K-1 in order, got {[lm.index for lm in lms]}")
        frames = {lm.frame for lm in lms}
        if len(frames) > 1:
            raise GeometryError("all landmarks of a set must share one frame")
        for lm in lms:
            lm.check_bounds(self.geometry)

    @classmethod
    def from_array(cls, xy: Iterable[Sequence[float]], geom: ImageGeometry, frame: Frame) -> "LandmarkSet":
        return cls(geom, tuple(Landmark(i, float(x), float(y), frame) for i, (x, y) in enumerate(xy)))

    def __len__(self) -> int:
        return len(self.landmarks)

    @property
    def frame(self) -> Frame | None:
        return self.landmarks[0].frame if self.landmarks else None

    def as_array(self) -> np.ndarray:
        """(K, 2) float array of (x, y)."""
        return np.array([[lm.x, lm.y] for lm in self.landmarks], dtype=np.float64).reshape(-1, 2)

    def to_network(self) -> "LandmarkSet":
        if self.frame is Frame.NETWORK:
            return self
        return LandmarkSet(self.geometry, tuple(to_network_frame(lm, self.geometry) for lm in self.landmarks))

    def to_original(self) -> "LandmarkSet":
        if self.frame is Frame.ORIGINAL or not self.landmarks:
            return self
        return LandmarkSet(self.geometry, tuple(from_network_frame(lm, self.geometry) for lm in self.landmarks))
