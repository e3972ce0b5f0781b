"""Dataset ingestion, synthetic data generation and pseudo-label persistence.

Supported on-disk layouts (``<split>`` is ``train`` or ``test``)::

    <root>/dataset.json                                  optional metadata
    <root>/<split>/images/<image_id>.{bmp,png}
    <root>/<split>/annotations/<annotator>/<image_id>.txt

A root without split directories (``<root>/images``, ``<root>/annotations``)
is treated as a single split. The layout of the public ISBI 2015 archive
(``RawImage/TrainingData``, ``RawImage/Test1Data``, ``RawImage/Test2Data``,
``AnnotationsByMD/400_senior``, ``AnnotationsByMD/400_junior``) is also
recognized.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import (
    ISBI_GEOMETRY,
    Frame,
    GeometryError,
    ImageGeometry,
    Landmark,
    LandmarkSet,
)

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".bmp", ".png", ".jpg", ".jpeg", ".tif", ".tiff")
PSEUDO_FORMAT_VERSION = 1
ISBI_NUM_LANDMARKS = 19


class DatasetError(Exception):
    pass


class AnnotationParseError(DatasetError):
    pass


class Split(enum.Enum):
    TRAIN = "train"
    TEST = "test"


class LabelSource(enum.Enum):
    SSL = "ssl"
    GROUND_TRUTH = "ground_truth"
    DETECTOR = "detector"


@dataclass(frozen=True)
class Entry:
    image_id: str
    image_path: Path
    annotation_paths: tuple[Path, ...] = ()


@dataclass
class DatasetManifest:
    split: Split
    entries: list[Entry]
    geometry: ImageGeometry
    num_landmarks: int

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def entry(self, image_id: str) -> Entry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise DatasetError(f"image id {image_id!r} not in {self.split.value} split")

    def load_image(self, entry: Entry) -> np.ndarray:
        img = load_image(entry.image_path)
        h, w = img.shape
        if (w, h) != (self.geometry.original_width, self.geometry.original_height):
            raise DatasetError(
                f"{entry.image_path}: size {w}x{h} does not match manifest geometry "
                f"{self.geometry.original_width}x{self.geometry.original_height}")
        return img

    def load_network_image(self, entry: Entry) -> np.ndarray:
        return resize_to_network(self.load_image(entry), self.geometry)

    def load_landmarks(self, entry: Entry) -> LandmarkSet:
        if not entry.annotation_paths:
            raise DatasetError(f"no annotations for image {entry.image_id}")
        return load_annotation(entry.annotation_paths, self.geometry, self.num_landmarks)


# ---------------------------------------------------------------- annotations

def _parse_annotation_file(path: Path, k: int) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise AnnotationParseError(f"{path}: cannot read ({exc})") from exc
    lines = text.splitlines()
    if len(lines) < k:
        raise AnnotationParseError(f"{path}: expected at least {k} lines, found {len(lines)}")
    pts = np.empty((k, 2), dtype=np.float64)
    for i, line in enumerate(lines[:k]):
        parts = line.strip().split(",")
        try:
            if len(parts) != 2:
                raise ValueError
            pts[i] = [int(parts[0].strip()), int(parts[1].strip())]
        except ValueError:
            raise AnnotationParseError(f"{path}:{i + 1}: malformed landmark line {line.strip()!r}") from None
    return pts


def load_annotation(paths: Sequence[Path], geom: ImageGeometry, k: int = ISBI_NUM_LANDMARKS) -> LandmarkSet:
    """Mean of the annotators' landmark files, in the ORIGINAL frame."""
    if not paths:
        raise AnnotationParseError("no annotation files given")
    per_file = []
    for path in paths:
        pts = _parse_annotation_file(path, k)
        for i, (x, y) in enumerate(pts):
            if not (0 <= x < geom.original_width and 0 <= y < geom.original_height):
                raise AnnotationParseError(
                    f"{path}:{i + 1}: landmark ({int(x)}, {int(y)}) outside image "
                    f"{geom.original_width}x{geom.original_height}")
        per_file.append(pts)
    mean = np.mean(np.stack(per_file), axis=0)
    return LandmarkSet.from_array(mean, geom, Frame.ORIGINAL)


def write_annotation(path: Path, xy: Iterable[Sequence[float]]) -> None:
    """Write landmarks as ``x,y`` integer lines (rounded half up)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{int(math.floor(x + 0.5))},{int(math.floor(y + 0.5))}" for x, y in xy]
    path.write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------- images

def load_image(path: Path) -> np.ndarray:
    """Grayscale float32 image in [0, 1], shape (H, W)."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float32)
            return arr / max(float(arr.max()), 1.0)
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def save_image(path: Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def resize_to_network(img: np.ndarray, geom: ImageGeometry) -> np.ndarray:
    """Resample an ORIGINAL-frame image onto the NETWORK grid.

    Network pixel ``(u, v)`` samples original coordinate ``(u / scale_x, v / scale_y)``,
    the same map used for landmark coordinates, so resizing and coordinate
    conversion agree exactly.
    """
    n = geom.network_size
    sx, sy = geom.scale_x, geom.scale_y
    src = np.asarray(img, dtype=np.float32)
    sigma = (max(0.0, (1.0 / sy - 1.0) / 2.0), max(0.0, (1.0 / sx - 1.0) / 2.0))
    if sigma[0] > 0 or sigma[1] > 0:
        src = ndimage.gaussian_filter(src, sigma=sigma, mode="nearest")
    v, u = np.mgrid[0:n, 0:n].astype(np.float64)
    coords = np.stack([v / sy, u / sx])
    out = ndimage.map_coordinates(src, coords, order=1, mode="nearest")
    return out.astype(np.float32)


# ------------------------------------------------------------------- manifests

def _index_images(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise DatasetError(f"image directory {directory} does not exist")
    found = {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    return found


def _annotation_paths(ann_root: Path, image_id: str) -> tuple[Path, ...]:
    if not ann_root.is_dir():
        return ()
    return tuple(p for p in (d / f"{image_id}.txt" for d in sorted(ann_root.iterdir()) if d.is_dir())
                 if p.is_file())


def read_metadata(root: Path) -> dict:
    meta_path = Path(root) / "dataset.json"
    if meta_path.is_file():
        return json.loads(meta_path.read_text())
    return {}


def load_dataset(root: Path, split: Split | str = Split.TRAIN, network_size: int = 384) -> DatasetManifest:
    """Build a manifest for one split of a dataset rooted at ``root``."""
    root = Path(root)
    split = Split(split) if not isinstance(split, Split) else split
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if (root / "RawImage").is_dir():
        return _load_isbi(root, split, network_size)

    meta = read_metadata(root)
    if meta:
        geom = ImageGeometry.from_dict({**meta["geometry"], "network_size": network_size})
        k = int(meta["num_landmarks"])
    else:
        geom = ISBI_GEOMETRY.with_network_size(network_size)
        k = ISBI_NUM_LANDMARKS
    split_root = root / split.value if (root / split.value).is_dir() else root
    images = _index_images(split_root / "images")
    entries = [Entry(image_id, path, _annotation_paths(split_root / "annotations", image_id))
               for image_id, path in images.items()]
    if not entries:
        raise DatasetError(f"no images found under {split_root / 'images'}")
    return DatasetManifest(split, entries, geom, k)


def _load_isbi(root: Path, split: Split, network_size: int) -> DatasetManifest:
    sub = ["TrainingData"] if split is Split.TRAIN else ["Test1Data", "Test2Data"]
    ann_root = root / "AnnotationsByMD"
    entries = []
    for s in sub:
        for image_id, path in _index_images(root / "RawImage" / s).items():
            entries.append(Entry(image_id, path, _annotation_paths(ann_root, image_id)))
    geom = ISBI_GEOMETRY.with_network_size(network_size)
    return DatasetManifest(split, entries, geom, ISBI_NUM_LANDMARKS)


# ------------------------------------------------------------------- synthetic

SYNTHETIC_GEOMETRY = ImageGeometry(160, 192, 0.5, 128)


def _shape_mask(kind: int, dx: np.ndarray, dy: np.ndarray, r: int) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    d2 = dx * dx + dy * dy
    if kind == 0:  # disk
        return d2 <= r * r
    if kind == 1:  # square
        return (ax <= r * 0.8) & (ay <= r * 0.8)
    if kind == 2:  # plus
        return ((ax <= 1) & (ay <= r)) | ((ay <= 1) & (ax <= r))
    if kind == 3:  # ring
        return (d2 <= r * r) & (d2 >= (r - 2.5) ** 2)
    if kind == 4:  # triangle, apex up
        return (dy <= r * 0.6) & (dy >= -r) & (ax <= (dy + r) * 0.6)
    if kind == 5:  # diamond
        return ax + ay <= r
    if kind == 6:  # x-cross
        return (np.abs(dx - dy) <= 1.5) & (ax <= r) | (np.abs(dx + dy) <= 1.5) & (ax <= r)
    if kind == 7:  # corner, landmark at the inner vertex
        return ((dx >= 0) & (dx <= r) & (dy >= 0) & (dy <= 2)) | ((dy >= 0) & (dy <= r) & (dx >= 0) & (dx <= 2))
    if kind == 8:  # T junction
        return ((ay <= 1) & (ax <= r)) | ((ax <= 1) & (dy >= 0) & (dy <= r))
    raise ValueError(kind)


NUM_SHAPES = 9


@dataclass
class SyntheticDataset:
    root: Path
    train: DatasetManifest
    test: DatasetManifest | None
    ground_truth: dict[str, LandmarkSet]
    base_locations: np.ndarray
    jitter_radius: float


def _place_bases(rng: np.random.Generator, geom: ImageGeometry, k: int, margin: tuple[float, float],
                 min_sep: float, tries: int = 5000) -> np.ndarray:
    mx, my = margin
    lo = np.array([mx, my])
    hi = np.array([geom.original_width - 1 - mx, geom.original_height - 1 - my])
    if np.any(hi <= lo):
        raise DatasetError("image too small for the requested landmark margin")
    pts: list[np.ndarray] = []
    for _ in range(tries):
        p = lo + rng.random(2) * (hi - lo)
        if all(np.hypot(*(p - q)) >= min_sep for q in pts):
            pts.append(p)
            if len(pts) == k:
                return np.array(pts)
    raise DatasetError(f"cannot place {k} non-overlapping structures in "
                       f"{geom.original_width}x{geom.original_height} (placed {len(pts)})")


def _atlas(rng: np.random.Generator, geom: ImageGeometry) -> np.ndarray:
    h, w = geom.original_height, geom.original_width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field_ = np.zeros((h, w))
    for _ in range(60):
        cx, cy = rng.random() * w, rng.random() * h
        s = 3.0 + rng.random() * 18.0
        field_ += rng.uniform(-1, 1) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    field_ = (field_ - field_.min()) / max(np.ptp(field_), 1e-9)
    return 0.3 + 0.4 * field_


def _displacement(rng: np.random.Generator, geom: ImageGeometry, bound: float):
    """Smooth global displacement field, |D| <= bound everywhere on the image."""
    w, h = geom.original_width, geom.original_height
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    t = rng.uniform(-1, 1, 2) * bound * 0.6
    ang = np.deg2rad(rng.uniform(-3, 3))
    s = 1.0 + rng.uniform(-0.03, 0.03)
    a = s * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]]) - np.eye(2)
    amp = rng.uniform(-1, 1, 2) * bound * 0.3
    freq = rng.uniform(0.5, 1.5, 2) * 2 * np.pi / np.array([w, h])
    phase = rng.uniform(0, 2 * np.pi, 2)

    def disp(x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        dx = t[0] + a[0, 0] * (x - c[0]) + a[0, 1] * (y - c[1]) + amp[0] * np.sin(freq[1] * y + phase[0])
        dy = t[1] + a[1, 0] * (x - c[0]) + a[1, 1] * (y - c[1]) + amp[1] * np.sin(freq[0] * x + phase[1])
        return dx, dy

    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = disp(xx, yy)
    peak = float(np.max(np.hypot(dx, dy)))
    shrink = min(1.0, bound / peak) if peak > 0 else 1.0

    def bounded(x, y):
        dx, dy = disp(x, y)
        return dx * shrink, dy * shrink

    return bounded


def _render(atlas: np.ndarray, disp, positions: np.ndarray, structure_radius: int,
            rng: np.random.Generator) -> np.ndarray:
    h, w = atlas.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = disp(xx, yy)
    img = ndimage.map_coordinates(atlas, np.stack([yy - dy, xx - dx]), order=1, mode="nearest")
    img = img * rng.uniform(0.9, 1.1) + rng.uniform(-0.05, 0.05)
    r = structure_radius
    oy, ox = np.mgrid[-r - 1:r + 2, -r - 1:r + 2]
    for k, (px, py) in enumerate(positions.astype(int)):
        mask = _shape_mask(k % NUM_SHAPES, ox, oy, r)
        value = 0.95 if (k // NUM_SHAPES) % 2 == 0 else 0.05
        ys, xs = np.nonzero(mask)
        ys, xs = ys + py - r - 1, xs + px - r - 1
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        img[ys[keep], xs[keep]] = value
    img = img + rng.normal(0, 0.015, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def generate_synthetic_dataset(root: Path, seed: int, n_images: int, k: int,
                               geom: ImageGeometry = SYNTHETIC_GEOMETRY, n_test: int = 0,
                               jitter_radius: float = 8.0, structure_radius: int = 6) -> SyntheticDataset:
    """Write a procedural landmark dataset to ``root`` and return its manifests.

    Landmark ``k`` of every image is drawn as shape ``k`` centered on an integer
    pixel ``base_k + D(base_k) + local_k``, where ``D`` is a smooth per-image
    deformation bounded by ``jitter_radius / 2`` and ``local_k`` is uniform in a
    disk of radius ``jitter_radius / 2 - 1``. After rounding, every landmark is
    strictly within ``jitter_radius`` original pixels of its base location.
    """
    if n_images < 1:
        raise DatasetError("n_images must be >= 1")
    if k < 1:
        raise DatasetError("k must be >= 1")
    if jitter_radius < 2:
        raise DatasetError("jitter_radius must be >= 2")
    root = Path(root)
    ss = np.random.SeedSequence(seed)
    base_ss, *img_ss = ss.spawn(1 + n_images + n_test)
    base_rng = np.random.default_rng(base_ss)

    reach = structure_radius + 2 + jitter_radius
    margin = (max(8.0 / geom.scale_x + jitter_radius, reach) + 1,
              max(8.0 / geom.scale_y + jitter_radius, reach) + 1)
    min_sep = 2 * reach + 2
    bases = _place_bases(base_rng, geom, k, margin, min_sep)
    atlas = _atlas(base_rng, geom)

    gts: dict[str, LandmarkSet] = {}
    manifests = {}
    counts = {Split.TRAIN: n_images, Split.TEST: n_test}
    idx = 0
    for split in (Split.TRAIN, Split.TEST):
        if counts[split] == 0:
            continue
        entries = []
        for _ in range(counts[split]):
            rng = np.random.default_rng(img_ss[idx])
            idx += 1
            image_id = f"{idx:03d}"
            disp = _displacement(rng, geom, jitter_radius / 2)
            ddx, ddy = disp(bases[:, 0], bases[:, 1])
            rad = (jitter_radius / 2 - 1) * np.sqrt(rng.random(k))
            ang = rng.uniform(0, 2 * np.pi, k)
            pos = bases + np.stack([ddx + rad * np.cos(ang), ddy + rad * np.sin(ang)], axis=1)
            pos = np.floor(pos + 0.5)
            img = _render(atlas, disp, pos, structure_radius, rng)
            split_root = root / split.value
            img_path = split_root / "images" / f"{image_id}.png"
            ann_path = split_root / "annotations" / "synthetic" / f"{image_id}.txt"
            save_image(img_path, img)
            write_annotation(ann_path, pos)
            gts[image_id] = LandmarkSet.from_array(pos, geom, Frame.ORIGINAL)
            entries.append(Entry(image_id, img_path, (ann_path,)))
        manifests[split] = DatasetManifest(split, entries, geom, k)

    meta = {
        "name": "synthetic",
        "num_landmarks": k,
        "geometry": geom.to_dict(),
        "seed": seed,
        "jitter_radius": jitter_radius,
        "structure_radius": structure_radius,
        "base_locations": bases.tolist(),
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n")
    return SyntheticDataset(root, manifests[Split.TRAIN], manifests.get(Split.TEST), gts, bases, jitter_radius)


# ---------------------------------------------------------------- pseudo labels

@dataclass
class PseudoLabelRecord:
    image_id: str
    landmarks: LandmarkSet
    confidences: tuple[float, ...]
    source: LabelSource = LabelSource.SSL

    def validate(self) -> None:
        k = len(self.landmarks)
        if len(self.confidences) != k:
            raise DatasetError(f"record {self.image_id}: {len(self.confidences)} confidences for {k} landmarks")
        for i, c in enumerate(self.confidences):
            if not (0.0 <= c <= 1.0) or math.isnan(c):
                raise DatasetError(f"record {self.image_id}: confidence {c} of landmark {i} outside [0, 1]")
        if k and self.landmarks.frame is not Frame.ORIGINAL:
            raise DatasetError(f"record {self.image_id}: landmarks must be in the ORIGINAL frame")


def _record_to_dict(rec: PseudoLabelRecord) -> dict:
    return {
        "image_id": rec.image_id,
        "K": len(rec.landmarks),
        "source": rec.source.value,
        "geometry": rec.landmarks.geometry.to_dict(),
        "landmarks": [[lm.x, lm.y, float(c)] for lm, c in zip(rec.landmarks.landmarks, rec.confidences)],
    }


def _record_from_dict(d: dict) -> PseudoLabelRecord:
    geom = ImageGeometry.from_dict(d["geometry"])
    rows = d["landmarks"]
    if len(rows) != int(d["K"]):
        raise DatasetError(f"record {d['image_id']}: K={d['K']} but {len(rows)} landmark rows")
    lms = LandmarkSet(geom, tuple(Landmark(i, float(x), float(y), Frame.ORIGINAL)
                                  for i, (x, y, _) in enumerate(rows)))
    return PseudoLabelRecord(str(d["image_id"]), lms, tuple(float(r[2]) for r in rows), LabelSource(d["source"]))


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_pseudo_labels(records: Sequence[PseudoLabelRecord], path: Path) -> None:
    ks = {len(r.landmarks) for r in records}
    if len(ks) > 1:
        raise DatasetError(f"records disagree on the number of landmarks: {sorted(ks)}")
    for rec in records:
        rec.validate()
    doc = {
        "format_version": PSEUDO_FORMAT_VERSION,
        "num_landmarks": ks.pop() if ks else 0,
        "records": [_record_to_dict(r) for r in records],
    }
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def load_pseudo_labels(path: Path, num_landmarks: int | None = None) -> list[PseudoLabelRecord]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"pseudo-label file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not a valid pseudo-label document ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != PSEUDO_FORMAT_VERSION or "records" not in doc:
        raise DatasetError(f"{path}: unsupported pseudo-label schema (format_version "
                           f"{doc.get('format_version') if isinstance(doc, dict) else None})")
    try:
        records = [_record_from_dict(d) for d in doc["records"]]
    except (KeyError, TypeError, ValueError, GeometryError) as exc:
        raise DatasetError(f"{path}: malformed record ({exc})") from exc
    for rec in records:
        rec.validate()
        if num_landmarks is not None and len(rec.landmarks) != num_landmarks:
            raise DatasetError(f"{path}: record {rec.image_id} has K={len(rec.landmarks)}, "
                               f"expected K={num_landmarks}")
    return records
