"""Synthetic lung-like phantoms with known ground-truth deformations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .fields import DisplacementField, eval_deformation, jacobian_folding, warp
from .grid import Grid, LabelVolume, Volume, gradient_array, trilinear
from .metrics import LandmarkSet

MAX_ATTEMPTS = 100


@dataclass
class SynthCase:
    F: Volume
    M: Volume
    bF: LabelVolume
    bM: LabelVolume
    truth: DisplacementField
    landmarks_fixed: LandmarkSet
    landmarks_moving: LandmarkSet
    seed: int


def phantom(grid: Grid, num_labels: int, rng: np.random.Generator):
    """Body ellipsoid with a lung split into ``num_labels`` angular lobes."""
    n = np.asarray(grid.dims, dtype=float)
    p = grid.points()
    center = np.asarray(grid.origin_mm) + 0.5 * n * np.asarray(grid.spacing_mm)
    extent = n * np.asarray(grid.spacing_mm)
    rel = p - center

    body_axes = extent * rng.uniform(0.24, 0.28, size=3)
    lung_axes = body_axes * rng.uniform(0.72, 0.8, size=3)
    body = np.sum((rel / body_axes) ** 2, axis=-1) <= 1.0
    lung = np.sum((rel / lung_axes) ** 2, axis=-1) <= 1.0

    phase = rng.uniform(0, 2 * np.pi)
    angle = np.mod(np.arctan2(rel[..., 1], rel[..., 0]) + phase, 2 * np.pi)
    sector = np.minimum((angle / (2 * np.pi) * num_labels).astype(int), num_labels - 1)
    labels = np.where(lung, sector + 1, 0)

    lobe_values = rng.permutation(np.linspace(150.0, 450.0, num_labels)) if num_labels > 1 \
        else np.array([300.0])
    image = np.where(body, 900.0, 0.0)
    image = np.where(lung, lobe_values[np.maximum(labels - 1, 0)], image)
    # vessel-like bright blobs
    sigma_vox = 1.2
    for _ in range(max(4, int(np.prod(n) ** (1 / 3) // 2))):
        c = center + rng.uniform(-0.8, 0.8, size=3) * lung_axes / np.sqrt(3)
        r2 = np.sum((p - c) ** 2, axis=-1)
        image += 500.0 * np.exp(-r2 / (2 * (sigma_vox * 1.5 * min(grid.spacing_mm)) ** 2)) * lung
    texture = gaussian_filter(rng.normal(size=grid.dims), 1.5)
    texture *= 40.0 / (texture.std() + 1e-12)
    image = gaussian_filter(image + texture * body, 0.7)
    return image, labels


def smooth_field(grid: Grid, max_disp_mm: float, rng: np.random.Generator,
                 sigma_vox: float | None = None, weight=None) -> np.ndarray:
    """Smoothed vector noise, optionally tapered by ``weight``, with largest magnitude ``max_disp_mm``."""
    sigma = sigma_vox if sigma_vox is not None else min(grid.dims) / 5.0
    raw = rng.normal(size=grid.dims + (3,))
    u = np.stack([gaussian_filter(raw[..., c], sigma, mode="reflect") for c in range(3)], axis=-1)
    if weight is not None:
        u *= weight[..., None]
    u *= max_disp_mm / np.linalg.norm(u, axis=-1).max()
    return u


def invert(f: DisplacementField, iterations: int = 50) -> DisplacementField:
    """Fixed-point inverse ``v(z) = -u(z + v(z))`` of a small-gradient field."""
    z = f.grid.points()
    v = -f.u.copy()
    for _ in range(iterations):
        v = -trilinear(f.u, f.grid, z + v)
    return DisplacementField(f.grid, v)


def _landmarks(image, grid, lung, count, rng):
    g = np.linalg.norm(gradient_array(image, grid.spacing_mm), axis=0)
    inner = np.zeros(grid.dims, dtype=bool)
    inner[2:-2, 2:-2, 2:-2] = True
    candidates = np.flatnonzero((g * (lung & inner)).ravel() > 0)
    if not len(candidates):
        return np.zeros((0, 3))
    scores = g.ravel()[candidates]
    top = candidates[scores >= np.quantile(scores, 0.9)]
    pick = rng.choice(top, size=min(count, len(top)), replace=False)
    return grid.points().reshape(-1, 3)[np.sort(pick)]


def generate_synth(seed: int, dims=(32, 32, 32), num_labels: int = 5, max_disp_mm: float = 4.0,
                   spacing_mm=(1.0, 1.0, 1.0), translation_mm=None, num_landmarks: int = 30,
                   sigma_vox: float | None = None) -> SynthCase:
    """Fixed phantom, fold-free ground truth and the moving image it implies.

    ``truth`` maps fixed coordinates into the moving image, so
    ``M(x + truth(x)) == F(x)`` up to interpolation.  ``translation_mm``
    adds a constant vector (or a random direction of that length when a
    scalar is given) to the smooth random part.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d % 4 for d in dims):
        raise ValueError(f"dims must be divisible by 4, got {dims}")
    if not max_disp_mm > 0:
        raise ValueError(f"max_disp_mm must be > 0, got {max_disp_mm}")
    rng = np.random.default_rng(seed)
    grid = Grid(dims, spacing_mm)
    image, labels = phantom(grid, num_labels, rng)

    t = np.zeros(3)
    if translation_mm is not None:
        t = np.asarray(translation_mm, dtype=float)
        if t.ndim == 0:
            d = rng.normal(size=3)
            t = float(t) * d / np.linalg.norm(d)

    # motion concentrated on the lung, fading towards the grid border
    taper = gaussian_filter((labels > 0).astype(float), min(dims) / 4.0)
    taper /= taper.max()
    for _ in range(MAX_ATTEMPTS):
        truth = DisplacementField(grid, smooth_field(grid, max_disp_mm, rng, sigma_vox, taper) + t)
        if jacobian_folding(truth)[1] == 0.0:
            break
    else:
        raise ValueError(f"no fold-free field in {MAX_ATTEMPTS} attempts; "
                         f"try a smaller max_disp_mm than {max_disp_mm}")

    inv = invert(truth).transformed_grid()
    F = Volume.on(grid, image)
    bF = LabelVolume.on(grid, labels)
    M = warp(F, inv)
    bM = warp(bF, inv)
    pf = _landmarks(image, grid, labels > 0, num_landmarks, rng)
    pm = eval_deformation(truth, pf)
    return SynthCase(F, M, bF, bM, truth, LandmarkSet(pf, f"synth-{seed}"),
                     LandmarkSet(pm, f"synth-{seed}"), seed)


def inverse_consistency(case: SynthCase) -> float:
    """Largest ``|y(y^-1(z)) - z|`` over the grid, in mm."""
    inv = invert(case.truth).transformed_grid()
    back = eval_deformation(case.truth, inv.points)
    return float(np.abs(back - case.truth.grid.points()).max())

