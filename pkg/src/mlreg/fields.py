"""Displacement fields, warping, composition and Jacobian analysis.

Displacements are stored in mm so a field defined on a coarse grid can be
evaluated at points of any finer grid without rescaling.  A deformation is
``y(x) = x + u(x)``; composition is ``(a o b)(x) = a(b(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid, LabelVolume, MaskChannels, Volume, gradient_array, sample_nearest, trilinear


@dataclass
class DisplacementField:
    grid: Grid
    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.shape != self.grid.dims + (3,):
            raise ValueError(f"field shape {self.u.shape} does not match grid {self.grid.dims}")
        if not np.isfinite(self.u).all():
            raise ValueError("displacement field contains non-finite values")

    def transformed_grid(self) -> "TransformedGrid":
        return TransformedGrid(self.grid, self.grid.points() + self.u)


@dataclass
class TransformedGrid:
    """World positions ``Y(x)`` for every voxel center ``x`` of ``grid``."""

    grid: Grid
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != self.grid.dims + (3,):
            raise ValueError(f"transformed grid shape {self.points.shape} does not match "
                             f"grid {self.grid.dims}")

    @classmethod
    def identity(cls, grid: Grid) -> "TransformedGrid":
        return cls(grid, grid.points())

    def displacement(self) -> DisplacementField:
        return DisplacementField(self.grid, self.points - self.grid.points())


def identity_field(g: Grid) -> DisplacementField:
    return DisplacementField(g, np.zeros(g.dims + (3,)))


def eval_deformation(f: DisplacementField, points) -> np.ndarray:
    """``p + u(p)`` with ``u`` interpolated trilinearly (clamp-to-edge)."""
    points = np.asarray(points, dtype=np.float64)
    return points + trilinear(f.u, f.grid, points)


def compose(outer: DisplacementField, inner: TransformedGrid) -> TransformedGrid:
    """Apply ``outer`` to already transformed points: ``outer(inner(x))``."""
    if inner.points.shape[-1] != 3:
        raise ValueError("inner points must be 3-vectors")
    return TransformedGrid(inner.grid, eval_deformation(outer, inner.points))


def warp(m, y: TransformedGrid):
    """Resample ``m`` at the transformed grid; output lives on ``y.grid``.

    Intensity volumes use trilinear interpolation, label volumes nearest
    neighbour, mask stacks trilinear per channel (soft masks).
    """
    if isinstance(m, LabelVolume):
        return LabelVolume.on(y.grid, sample_nearest(m.data, m.grid, y.points))
    if isinstance(m, MaskChannels):
        data = trilinear(np.moveaxis(m.data, 0, -1), m.grid, y.points)
        return MaskChannels(y.grid, m.labels, np.moveaxis(data, -1, 0))
    return Volume.on(y.grid, trilinear(np.asarray(m.data, dtype=np.float64), m.grid, y.points))


def jacobian_determinant(f: DisplacementField) -> np.ndarray:
    grads = np.stack([gradient_array(f.u[..., c], f.grid.spacing_mm) for c in range(3)])
    # jac[..., c, a] = d y_c / d x_a
    jac = np.moveaxis(grads, (0, 1), (-2, -1)) + np.eye(3)
    return np.linalg.det(jac)


def jacobian_folding(f: DisplacementField):
    """Determinant map of ``I + grad u`` and the fraction of voxels with det <= 0."""
    det = jacobian_determinant(f)
    return Volume.on(f.grid, det), float(np.count_nonzero(det <= 0)) / det.size
