"""Dice overlap, landmark registration error and the metrics report."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .fields import DisplacementField, eval_deformation
from .grid import LabelVolume


@dataclass
class LandmarkSet:
    points: np.ndarray          # (K, 3) world coordinates in mm
    case_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("landmarks must be finite")

    def __len__(self):
        return len(self.points)


@dataclass
class MetricsReport:
    dice: dict = field(default_factory=dict)
    mean_dice: float | None = None
    tre_mean_mm: float | None = None
    tre_std_mm: float | None = None
    folding_fraction: float | None = None
    runtime_s: float | None = None

    def as_dict(self) -> dict:
        out = {}
        if self.dice:
            out["dice"] = {str(k): v for k, v in self.dice.items()}
            out["mean_dice"] = self.mean_dice
        for key in ("tre_mean_mm", "tre_std_mm", "folding_fraction", "runtime_s"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out


def dice(bF: LabelVolume, bW: LabelVolume, labels=None):
    """Per-label Dice ``2|A & B| / (|A| + |B|)`` and their mean.

    A label absent from both volumes scores 1.0 and triggers a warning.
    """
    if bF.dims != bW.dims:
        raise ValueError(f"label volumes differ in shape: {bF.dims} vs {bW.dims}")
    if labels is None:
        labels = sorted(set(bF.labels()) | set(bW.labels()))
    scores = {}
    for c in labels:
        a, b = bF.data == c, bW.data == c
        na, nb = int(a.sum()), int(b.sum())
        if na + nb == 0:
            warnings.warn(f"label {c} is empty in both volumes; Dice set to 1.0")
            scores[c] = 1.0
        else:
            scores[c] = 2.0 * int(np.count_nonzero(a & b)) / (na + nb)
    mean = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores, mean


def map_points(result, points) -> np.ndarray:
    """Fixed-to-moving mapping of world points by a result, a field or ``None``."""
    points = np.asarray(points, dtype=np.float64)
    if result is None:
        return points.copy()
    if isinstance(result, DisplacementField):
        return eval_deformation(result, points)
    from .multilevel import apply_to_points
    return apply_to_points(result, points)


def tre(result, fixed: LandmarkSet, moving: LandmarkSet):
    """Euclidean error between mapped fixed landmarks and moving landmarks.

    Returns ``(mean, population std, per-landmark errors)`` in mm.
    """
    if len(fixed) != len(moving):
        raise ValueError(f"landmark count mismatch: {len(fixed)} fixed vs {len(moving)} moving")
    err = np.linalg.norm(map_points(result, fixed.points) - moving.points, axis=1)
    if not len(err):
        return float("nan"), float("nan"), err
    return float(err.mean()), float(err.std()), err
