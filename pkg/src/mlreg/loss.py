"""Registration energy: distance + alpha * curvature (+ segmentation overlap).

All integrals are weighted by the voxel volume so values at different
pyramid levels are comparable.  Every term returns its value together with
the analytic gradient.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .fields import DisplacementField, TransformedGrid
from .grid import Volume, as_channels, gradient_adjoint, gradient_array, trilinear


class DistanceKind(str, enum.Enum):
    NGF = "ngf"
    SSD = "ssd"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    ngf_eps: float = 100.0
    distance_kind: DistanceKind = DistanceKind.NGF

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if not self.ngf_eps > 0:
            raise ValueError(f"ngf_eps must be > 0, got {self.ngf_eps}")
        object.__setattr__(self, "distance_kind", DistanceKind(self.distance_kind))


@dataclass(frozen=True)
class LossValue:
    total: float
    distance: float
    regularizer: float
    seg_term: float

    def as_dict(self) -> dict:
        return {"total": self.total, "distance": self.distance,
                "regularizer": self.regularizer, "seg_term": self.seg_term}


def _check_same(a: Volume, b: Volume):
    if not a.grid.same_geometry(b.grid):
        raise ValueError(f"geometry mismatch: {a.grid} vs {b.grid}")


def ssd_distance(F: Volume, Mw: Volume):
    """Half the voxel-volume weighted sum of squared differences."""
    _check_same(F, Mw)
    h3 = F.grid.voxel_volume
    r = np.asarray(Mw.data, dtype=np.float64) - np.asarray(F.data, dtype=np.float64)
    return 0.5 * h3 * float(np.sum(r * r)), h3 * r


def ngf_distance(F: Volume, Mw: Volume, eps: float):
    """Normalized gradient fields distance.

    Integrand ``1 - (<gF, gM> + eps^2)^2 / ((|gF|^2 + eps^2)(|gM|^2 + eps^2))``,
    which is in [0, 1] and zero where the edges are parallel.
    """
    _check_same(F, Mw)
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    h3 = F.grid.voxel_volume
    e2 = eps * eps
    gf = gradient_array(F.data, F.spacing_mm)
    gm = gradient_array(Mw.data, Mw.spacing_mm)
    num = np.sum(gf * gm, axis=0) + e2
    nf = np.sum(gf * gf, axis=0) + e2
    nm = np.sum(gm * gm, axis=0) + e2
    ratio = num * num / (nf * nm)
    value = h3 * float(np.sum(1.0 - ratio))
    # d(-ratio)/d gm
    dg = -(2.0 * num / (nf * nm)) * gf + (2.0 * ratio / nm) * gm
    return value, h3 * gradient_adjoint(dg, Mw.spacing_mm)


def _laplacian(u: np.ndarray, spacing) -> np.ndarray:
    """7-point Laplacian of each component with edge replication.

    ``u`` has shape ``dims + (C,)``.  The operator is symmetric, so it is
    its own adjoint.
    """
    p = np.pad(u, [(1, 1)] * 3 + [(0, 0)], mode="edge")
    c = p[1:-1, 1:-1, 1:-1]
    out = (p[2:, 1:-1, 1:-1] - 2 * c + p[:-2, 1:-1, 1:-1]) / spacing[0] ** 2
    out += (p[1:-1, 2:, 1:-1] - 2 * c + p[1:-1, :-2, 1:-1]) / spacing[1] ** 2
    out += (p[1:-1, 1:-1, 2:] - 2 * c + p[1:-1, 1:-1, :-2]) / spacing[2] ** 2
    return out


def curvature_reg(f: DisplacementField, interior_only: bool = False):
    """Curvature energy ``1/2 h^3 sum_i sum_x (Lap u_i)^2`` and its gradient.

    ``interior_only`` restricts the sum to voxels whose stencil does not touch
    the boundary replication.
    """
    dims = f.grid.dims
    if min(dims) < 3:
        raise ValueError(f"curvature needs at least 3 voxels per axis, got {dims}")
    h3 = f.grid.voxel_volume
    lap = _laplacian(f.u, f.grid.spacing_mm)
    if interior_only:
        mask = np.zeros(dims + (1,))
        mask[1:-1, 1:-1, 1:-1] = 1.0
        lap = lap * mask
    return 0.5 * h3 * float(np.sum(lap * lap)), h3 * _laplacian(lap, f.grid.spacing_mm)


def _label_mismatch(a, b):
    if a.labels != b.labels:
        raise ValueError(f"label sets differ: fixed {list(a.labels)} vs moving {list(b.labels)}")


def seg_overlap_term(bF, bM, y_points: TransformedGrid, beta: float):
    """``beta/2 * h^3 * sum_c sum_x (bF_c(x) - bM_c(Y(x)))^2`` with soft moving masks.

    Returns the value and its gradient with respect to the transformed points.
    """
    bF, bM = as_channels(bF), as_channels(bM)
    if not bF.grid.same_geometry(y_points.grid):
        raise ValueError("fixed masks must share the geometry of the transformed grid")
    _label_mismatch(bF, bM)
    dims = y_points.grid.dims
    if not bF.labels:
        return 0.0, np.zeros(dims + (3,))
    h3 = y_points.grid.voxel_volume
    soft, dsoft = trilinear(np.moveaxis(bM.data, 0, -1), bM.grid, y_points.points, with_grad=True)
    r = soft - np.moveaxis(bF.data, 0, -1)  # dims + (C,)
    value = 0.5 * beta * h3 * float(np.sum(r * r))
    grad = beta * h3 * np.einsum("...c,...ca->...a", r, dsoft)
    return value, grad


def _evaluate(F, M, bF, bM, f: DisplacementField, cfg: LossConfig, with_grad: bool):
    if not F.grid.same_geometry(f.grid):
        raise ValueError("fixed image and displacement field must share a grid")
    y = f.transformed_grid()
    m = np.asarray(M.data, dtype=np.float64)
    if with_grad:
        mw, dmw = trilinear(m, M.grid, y.points, with_grad=True)
    else:
        mw = trilinear(m, M.grid, y.points)
    Mw = Volume.on(f.grid, mw)
    if cfg.distance_kind is DistanceKind.SSD:
        dist, ddist = ssd_distance(F, Mw)
    else:
        dist, ddist = ngf_distance(F, Mw, cfg.ngf_eps)
    reg, dreg = curvature_reg(f)
    seg, dseg = 0.0, 0.0
    if bF is not None and bM is not None and cfg.beta > 0:
        seg, dseg = seg_overlap_term(bF, bM, y, cfg.beta)
    value = LossValue(dist + cfg.alpha * reg + seg, dist, reg, seg)
    if not with_grad:
        return value, None
    grad = ddist[..., None] * dmw + cfg.alpha * dreg + dseg
    return value, grad


def total_cost(F: Volume, M: Volume, f: DisplacementField, cfg: LossConfig) -> LossValue:
    """Distance of ``F`` and ``M(x + u)`` plus ``alpha`` times the curvature."""
    return _evaluate(F, M, None, None, f, cfg, False)[0]


def training_loss(F, M, bF, bM, f: DisplacementField, cfg: LossConfig) -> LossValue:
    """:func:`total_cost` plus the soft mask overlap term."""
    return _evaluate(F, M, bF, bM, f, cfg, False)[0]


def loss_gradient_wrt_field(F, M, bF, bM, f: DisplacementField, cfg: LossConfig) -> np.ndarray:
    return _evaluate(F, M, bF, bM, f, cfg, True)[1]


def training_loss_and_gradient(F, M, bF, bM, f: DisplacementField, cfg: LossConfig):
    return _evaluate(F, M, bF, bM, f, cfg, True)
