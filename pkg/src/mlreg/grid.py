"""Cell-centered volumes, trilinear sampling and image pyramids.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x.  The on-disk order is
x-fastest, which is numpy's Fortran order for this indexing.

Voxel ``(i, j, k)`` has its center at ``origin + (i + 0.5, j + 0.5, k + 0.5) * spacing``,
so ``origin`` is the corner of the field of view and halving a volume keeps
the physical domain unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _triple(values, name, positive=False):
    t = tuple(float(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(t)}")
    if not all(np.isfinite(t)):
        raise ValueError(f"{name} must be finite, got {t}")
    if positive and min(t) <= 0:
        raise ValueError(f"{name} components must be > 0, got {t}")
    return t


@dataclass(frozen=True)
class Grid:
    """Cell-centered regular grid; enumerates all voxel centers."""

    dims: tuple
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", _triple(self.spacing_mm, "spacing_mm", positive=True))
        object.__setattr__(self, "origin_mm", _triple(self.origin_mm, "origin_mm"))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.dims[axis]
        return self.origin_mm[axis] + (np.arange(n) + 0.5) * self.spacing_mm[axis]

    def points(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape ``dims + (3,)``."""
        axes = [self.axis_centers(a) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def halved(self) -> "Grid":
        if any(d % 2 for d in self.dims):
            raise ValueError(f"cannot halve odd dims {self.dims}")
        return Grid(tuple(d // 2 for d in self.dims),
                    tuple(2 * s for s in self.spacing_mm), self.origin_mm)

    def same_geometry(self, other: "Grid") -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing_mm, other.spacing_mm, rtol=1e-12, atol=0)
                and np.allclose(self.origin_mm, other.origin_mm, rtol=0, atol=1e-9))


@dataclass
class Volume:
    """Scalar image on a cell-centered grid."""

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        # Grid validates spacing/origin.
        g = Grid(self.data.shape, self.spacing_mm, self.origin_mm)
        self.spacing_mm, self.origin_mm = g.spacing_mm, g.origin_mm

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def grid(self) -> Grid:
        return Grid(self.data.shape, self.spacing_mm, self.origin_mm)

    @classmethod
    def on(cls, grid: Grid, data) -> "Volume":
        data = np.asarray(data)
        if data.shape != grid.dims:
            raise ValueError(f"data shape {data.shape} does not match grid dims {grid.dims}")
        return cls(data, grid.spacing_mm, grid.origin_mm)

    def flat(self) -> np.ndarray:
        """Data in x-fastest order."""
        return self.data.ravel(order="F")


class LabelVolume(Volume):
    """Integer label map, 0 is background."""

    def __post_init__(self):
        super().__post_init__()
        if not np.issubdtype(self.data.dtype, np.integer):
            if not np.all(np.mod(self.data, 1) == 0):
                raise ValueError("label data must be integral")
            self.data = self.data.astype(np.int64)
        if self.data.size and self.data.min() < 0:
            raise ValueError("labels must be non-negative")

    def labels(self) -> tuple:
        """Sorted foreground labels present in the map."""
        return tuple(int(v) for v in np.unique(self.data) if v != 0)


@dataclass
class MaskChannels:
    """Per-label mask stack of shape ``(C, nx, ny, nz)``; binary or soft."""

    grid: Grid
    labels: tuple
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = tuple(int(v) for v in self.labels)
        if self.data.shape != (len(self.labels),) + self.grid.dims:
            raise ValueError(f"mask stack shape {self.data.shape} inconsistent with "
                             f"{len(self.labels)} labels on {self.grid.dims}")

    @classmethod
    def from_labels(cls, lv: LabelVolume, labels=None) -> "MaskChannels":
        labels = lv.labels() if labels is None else tuple(labels)
        data = np.stack([lv.data == c for c in labels]) if labels else \
            np.zeros((0,) + lv.dims)
        return cls(lv.grid, labels, data.astype(np.float64))


def as_channels(masks) -> MaskChannels:
    if isinstance(masks, MaskChannels):
        return masks
    if isinstance(masks, LabelVolume):
        return MaskChannels.from_labels(masks)
    raise TypeError(f"expected LabelVolume or MaskChannels, got {type(masks).__name__}")


# ---------------------------------------------------------------------------
# trilinear sampling

SNAP_TOL = 1e-9   # voxels


def _continuous_index(grid: Grid, points: np.ndarray):
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-1] != 3:
        raise ValueError(f"points must have trailing dimension 3, got {points.shape}")
    bad = ~np.isfinite(points).all(axis=-1)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise ValueError(f"non-finite point at index {idx}")
    origin = np.asarray(grid.origin_mm)
    spacing = np.asarray(grid.spacing_mm)
    c = (points - origin) / spacing - 0.5
    # world -> index rounding leaves voxel centres a few ulp off the integer;
    # snap them so nodal values are reproduced exactly
    r = np.rint(c)
    return np.where(np.abs(c - r) <= SNAP_TOL, r, c)


def _axis_setup(c: np.ndarray, n: int):
    inside = (c > 0) & (c < n - 1)
    c = np.clip(c, 0.0, n - 1)
    i0 = np.minimum(np.floor(c), n - 1).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, c - i0, inside


def trilinear(data: np.ndarray, grid: Grid, points, with_grad: bool = False):
    """Sample ``data`` (shape ``dims`` or ``dims + (C,)``) at world points.

    Clamp-to-edge outside the hull of voxel centers.  The blend is evaluated
    as lerps ``a + f * (b - a)`` along x, then y, then z, so constants and
    nodal values are reproduced exactly.

    With ``with_grad`` also returns the derivative of the interpolant with
    respect to the world coordinates, shape ``values.shape + (3,)``.  The
    derivative is zero along clamped axes.
    """
    c = _continuous_index(grid, points)
    (x0, x1, fx, inx), (y0, y1, fy, iny), (z0, z1, fz, inz) = (
        _axis_setup(c[..., a], grid.dims[a]) for a in range(3))
    extra = data.ndim - 3
    if extra:
        fx, fy, fz = (f.reshape(f.shape + (1,) * extra) for f in (fx, fy, fz))

    v000, v100 = data[x0, y0, z0], data[x1, y0, z0]
    v010, v110 = data[x0, y1, z0], data[x1, y1, z0]
    v001, v101 = data[x0, y0, z1], data[x1, y0, z1]
    v011, v111 = data[x0, y1, z1], data[x1, y1, z1]

    d00, d10, d01, d11 = v100 - v000, v110 - v010, v101 - v001, v111 - v011
    c00 = v000 + fx * d00
    c10 = v010 + fx * d10
    c01 = v001 + fx * d01
    c11 = v011 + fx * d11
    e0, e1 = c10 - c00, c11 - c01
    c0 = c00 + fy * e0
    c1 = c01 + fy * e1
    out = c0 + fz * (c1 - c0)
    if not with_grad:
        return out

    dx0 = d00 + fy * (d10 - d00)
    dx1 = d01 + fy * (d11 - d01)
    dfx = dx0 + fz * (dx1 - dx0)
    dfy = e0 + fz * (e1 - e0)
    dfz = c1 - c0
    grads = []
    for a, (df, ins) in enumerate(((dfx, inx), (dfy, iny), (dfz, inz))):
        scale = ins / grid.spacing_mm[a]
        if extra:
            scale = scale.reshape(scale.shape + (1,) * extra)
        grads.append(df * scale)
    return out, np.stack(grads, axis=-1)


def sample_trilinear(v: Volume, points) -> np.ndarray:
    """Trilinear interpolation of ``v`` at world-coordinate points (``(..., 3)``)."""
    return trilinear(np.asarray(v.data, dtype=np.float64), v.grid, points)


def sample_nearest(data: np.ndarray, grid: Grid, points) -> np.ndarray:
    c = _continuous_index(grid, points)
    idx = [np.clip(np.floor(c[..., a] + 0.5), 0, grid.dims[a] - 1).astype(np.intp)
           for a in range(3)]
    return data[idx[0], idx[1], idx[2]]


# ---------------------------------------------------------------------------
# pyramids

def _block_mean(data: np.ndarray) -> np.ndarray:
    nx, ny, nz = data.shape[-3:]
    lead = data.shape[:-3]
    blocks = data.reshape(lead + (nx // 2, 2, ny // 2, 2, nz // 2, 2))
    n = len(lead)
    return blocks.mean(axis=(n + 1, n + 3, n + 5))


def _check_even(dims):
    for axis, d in zip("xyz", dims):
        if d % 2:
            raise ValueError(f"dimension along {axis} is odd ({d}); pad first")


def downsample_halve(v: Volume) -> Volume:
    """Stride-2 low-pass: each output voxel is the mean of a 2x2x2 block."""
    _check_even(v.dims)
    return Volume.on(v.grid.halved(), _block_mean(np.asarray(v.data, dtype=np.float64)))


def downsample_masks(m: MaskChannels) -> MaskChannels:
    """Block mean per label channel, then threshold at 0.5."""
    _check_even(m.grid.dims)
    data = (_block_mean(m.data) >= 0.5).astype(np.float64)
    return MaskChannels(m.grid.halved(), m.labels, data)


def _check_levels(dims, levels):
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    q = 2 ** (levels - 1)
    for axis, d in zip("xyz", dims):
        if d % q:
            raise ValueError(f"dimension along {axis} ({d}) is not divisible by "
                             f"2^(levels-1) = {q}")


def build_pyramid(v: Volume, levels: int) -> list:
    """Return ``[v, half(v), ...]`` with ``levels`` entries, finest first."""
    _check_levels(v.dims, levels)
    out = [v]
    for _ in range(levels - 1):
        out.append(downsample_halve(out[-1]))
    return out


def build_mask_pyramid(masks, levels: int) -> list:
    m = as_channels(masks)
    _check_levels(m.grid.dims, levels)
    out = [m]
    for _ in range(levels - 1):
        out.append(downsample_masks(out[-1]))
    return out


# ---------------------------------------------------------------------------
# finite differences

def _diff_axis(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    f = np.moveaxis(f, axis, 0)
    g = np.empty_like(f, dtype=np.float64)
    g[1:-1] = (f[2:] - f[:-2]) / (2 * h)
    g[0] = (f[1] - f[0]) / h
    g[-1] = (f[-1] - f[-2]) / h
    return np.moveaxis(g, 0, axis)


def _diff_axis_adjoint(g: np.ndarray, axis: int, h: float) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    r = np.zeros_like(g, dtype=np.float64)
    r[2:] += g[1:-1] / (2 * h)
    r[:-2] -= g[1:-1] / (2 * h)
    r[1] += g[0] / h
    r[0] -= g[0] / h
    r[-1] += g[-1] / h
    r[-2] -= g[-1] / h
    return np.moveaxis(r, 0, axis)


def gradient_array(data: np.ndarray, spacing) -> np.ndarray:
    """Central differences over the first three axes, shape ``(3,) + data.shape``."""
    for axis, d in zip("xyz", data.shape[:3]):
        if d < 2:
            raise ValueError(f"dimension along {axis} must be >= 2 for differences, got {d}")
    data = np.asarray(data, dtype=np.float64)
    return np.stack([_diff_axis(data, a, spacing[a]) for a in range(3)])


def gradient_adjoint(g: np.ndarray, spacing) -> np.ndarray:
    """Transpose of :func:`gradient_array` applied to ``(3,) + shape`` input."""
    return sum(_diff_axis_adjoint(g[a], a, spacing[a]) for a in range(3))


def central_gradient(v: Volume) -> tuple:
    """Per-axis derivatives in mm^-1; one-sided at the boundary slabs."""
    g = gradient_array(v.data, v.spacing_mm)
    return tuple(Volume.on(v.grid, g[a]) for a in range(3))


def paired_channels(bF, bM) -> tuple:
    """Mask stacks for a fixed/moving pair sharing the fixed label order."""
    cf = as_channels(bF)
    if isinstance(bM, LabelVolume):
        if set(bM.labels()) != set(cf.labels):
            raise ValueError(f"label sets differ: fixed {list(cf.labels)} vs "
                             f"moving {list(bM.labels())}")
        return cf, MaskChannels.from_labels(bM, cf.labels)
    cm = as_channels(bM)
    if cm.labels != cf.labels:
        raise ValueError(f"label sets differ: fixed {list(cf.labels)} vs moving {list(cm.labels)}")
    return cf, cm
