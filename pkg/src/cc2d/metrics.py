"""Challenge-protocol evaluation: mean radial error and detection rates."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .geometry import Frame, GeometryError, ImageGeometry, Landmark, LandmarkSet

SDR_RADII_MM = (2.0, 2.5, 3.0, 4.0)


class EvaluationError(ValueError):
    pass


def radial_error_mm(pred: Landmark, gt: Landmark, geom: ImageGeometry) -> float:
    if pred.frame is not gt.frame:
        raise GeometryError(f"frame mismatch: {pred.frame.value} vs {gt.frame.value}")
    if pred.frame is not Frame.ORIGINAL:
        raise GeometryError("radial errors are measured in the ORIGINAL frame")
    return float(np.hypot(pred.x - gt.x, pred.y - gt.y) * geom.pixel_spacing_mm)


@dataclass
class EvalReport:
    mre_mm: float
    sdr: dict[float, float]
    per_landmark: list[dict]
    n_images: int
    std_mm: float = 0.0
    errors_mm: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "mre_mm": self.mre_mm,
            "std_mm": self.std_mm,
            "sdr": {f"{r:g}": v for r, v in self.sdr.items()},
            "n_images": self.n_images,
            "per_landmark": self.per_landmark,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_table(self, title: str = "") -> str:
        head = f"{'':<12}{'MRE (mm)':>10}" + "".join(f"{f'SDR {r:g}mm':>13}" for r in self.sdr)

        def row(name, mre, sdr):
            return f"{name:<12}{mre:>10.2f}" + "".join(f"{v:>12.2f}%" for v in sdr)

        lines = [title] if title else []
        lines += [head, "-" * len(head), row("all", self.mre_mm, self.sdr.values())]
        for i, pl in enumerate(self.per_landmark):
            lines.append(row(f"landmark {i}", pl["mre_mm"], pl["sdr"].values()))
        lines.append(f"({self.n_images} images)")
        return "\n".join(lines) + "\n"


def _sdr(errors: np.ndarray, radii) -> dict[float, float]:
    n = errors.size
    return {float(r): (100.0 * np.count_nonzero(errors <= r) / n if n else 0.0) for r in radii}


def summarize_errors(errors_mm: np.ndarray, radii=SDR_RADII_MM) -> EvalReport:
    """Report for an (n_images, K) matrix of radial errors in millimeters."""
    errors_mm = np.asarray(errors_mm, dtype=np.float64)
    if errors_mm.ndim != 2 or errors_mm.size == 0:
        raise EvaluationError("need a non-empty (n_images, K) error matrix")
    per = [{"mre_mm": float(errors_mm[:, k].mean()), "sdr": {f"{r:g}": v for r, v in _sdr(errors_mm[:, k], radii).items()}}
           for k in range(errors_mm.shape[1])]
    return EvalReport(float(errors_mm.mean()), _sdr(errors_mm, radii), per, errors_mm.shape[0],
                      float(errors_mm.std()), errors_mm)


def evaluate(preds: Mapping[str, LandmarkSet], gts: Mapping[str, LandmarkSet], geom: ImageGeometry,
             radii=SDR_RADII_MM) -> EvalReport:
    """Aggregate radial errors over all (image, landmark) pairs."""
    if set(preds) != set(gts):
        missing = sorted(set(gts) - set(preds))
        extra = sorted(set(preds) - set(gts))
        raise EvaluationError(f"image ids differ: missing predictions {missing[:5]}, unexpected {extra[:5]}")
    ids = sorted(gts)
    if not ids:
        raise EvaluationError("nothing to evaluate")
    k = len(gts[ids[0]])
    rows = []
    for image_id in ids:
        p, g = preds[image_id], gts[image_id]
        if len(p) != k or len(g) != k:
            raise EvaluationError(f"image {image_id}: K mismatch (pred {len(p)}, gt {len(g)}, expected {k})")
        p, g = p.to_original(), g.to_original()
        rows.append([radial_error_mm(a, b, geom) for a, b in zip(p.landmarks, g.landmarks)])
    return summarize_errors(np.array(rows), radii)


def network_errors(preds: Mapping[str, LandmarkSet], gts: Mapping[str, LandmarkSet]) -> np.ndarray:
    """(n_images, K) Euclidean errors in NETWORK pixels, ids in sorted order."""
    out = []
    for image_id in sorted(gts):
        p = preds[image_id].to_network().as_array()
        g = gts[image_id].to_network().as_array()
        out.append(np.hypot(*(p - g).T))
    return np.array(out)


def original_errors(preds: Mapping[str, LandmarkSet], gts: Mapping[str, LandmarkSet]) -> np.ndarray:
    """(n_images, K) Euclidean errors in ORIGINAL pixels, ids in sorted order."""
    out = []
    for image_id in sorted(gts):
        p = preds[image_id].to_original().as_array()
        g = gts[image_id].to_original().as_array()
        out.append(np.hypot(*(p - g).T))
    return np.array(out)
