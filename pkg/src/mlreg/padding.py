"""Edge-replicated padding to a multiple of the pyramid divisor, and its inverse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import DisplacementField
from .grid import Grid, Volume


@dataclass(frozen=True)
class CropRecord:
    """Original dims; cropping keeps ``[:dims[0], :dims[1], :dims[2]]``."""

    dims: tuple
    pad: tuple      # voxels appended at the high end of each axis

    @property
    def empty(self) -> bool:
        return not any(self.pad)


def pad_to_multiple(v: Volume, m: int):
    """Pad the high end of each axis by edge replication up to a multiple of ``m``.

    The origin is unchanged, so every original voxel keeps its world position.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    pad = tuple((-d) % m for d in v.dims)
    rec = CropRecord(tuple(v.dims), pad)
    if rec.empty:
        return v, rec
    data = np.pad(v.data, [(0, p) for p in pad], mode="edge")
    return type(v)(data, v.spacing_mm, v.origin_mm), rec


def crop(obj, rec: CropRecord):
    """Undo :func:`pad_to_multiple` on a volume or a displacement field."""
    sl = tuple(slice(0, d) for d in rec.dims)
    if isinstance(obj, DisplacementField):
        g = obj.grid
        return DisplacementField(Grid(rec.dims, g.spacing_mm, g.origin_mm), obj.u[sl].copy())
    return type(obj)(obj.data[sl].copy(), obj.spacing_mm, obj.origin_mm)
