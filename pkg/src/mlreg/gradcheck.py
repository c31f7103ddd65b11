"""Central finite-difference checks of every analytic gradient.

Each check returns the relative error ``max|analytic - fd| / max|fd|`` over
the entries it probes.  Tolerances follow the precision each path can
reach in double arithmetic.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .fields import DisplacementField, TransformedGrid
from .grid import Grid, LabelVolume, Volume
from .loss import (LossConfig, curvature_reg, ngf_distance, seg_overlap_term, ssd_distance,
                   training_loss, training_loss_and_gradient)
from .unet import UNetConfig, unet_backward, unet_forward, xavier_init

TOLERANCES = {
    "ssd": 1e-7,
    "ngf": 1e-5,
    "curvature": 1e-6,
    "seg": 1e-4,
    "training_loss": 1e-4,
    "network": 1e-3,
}


def rel_err(analytic, fd) -> float:
    analytic, fd = np.asarray(analytic, dtype=float), np.asarray(fd, dtype=float)
    scale = np.abs(fd).max()
    if scale == 0:
        return float(np.abs(analytic).max())
    return float(np.abs(analytic - fd).max() / scale)


def fd_gradient(fn, x: np.ndarray, step: float, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``x`` (all entries or ``indices``)."""
    x = np.array(x, dtype=np.float64)
    indices = list(np.ndindex(x.shape)) if indices is None else indices
    out = np.zeros(len(indices))
    for n, idx in enumerate(indices):
        old = x[idx]
        x[idx] = old + step
        fp = fn(x)
        x[idx] = old - step
        fm = fn(x)
        x[idx] = old
        out[n] = (fp - fm) / (2 * step)
    return out


def _subset(rng, shape, probes):
    idx = list(np.ndindex(shape))
    if probes is None or probes >= len(idx):
        return idx
    return [idx[i] for i in rng.choice(len(idx), probes, replace=False)]


def _random_grid(rng, n):
    spacing = tuple(rng.uniform(0.7, 1.6, size=3))
    origin = tuple(rng.uniform(-5, 5, size=3))
    return Grid((n, n, n), spacing, origin)


def _smooth_image(rng, grid, scale=100.0, sigma=1.0):
    return gaussian_filter(rng.normal(size=grid.dims), sigma) * scale


def _smooth_field(rng, grid, amp):
    u = np.stack([gaussian_filter(rng.normal(size=grid.dims), 1.0) for _ in range(3)], axis=-1)
    return amp * u / np.abs(u).max()


def check_ssd(rng, n=4) -> float:
    g = _random_grid(rng, n)
    F = Volume.on(g, rng.normal(size=g.dims))
    m = rng.normal(size=g.dims)
    _, grad = ssd_distance(F, Volume.on(g, m))
    fd = fd_gradient(lambda x: ssd_distance(F, Volume.on(g, x))[0], m, 1e-4)
    return rel_err(grad.ravel(), fd)


def check_ngf(rng, n=6, eps=0.1) -> float:
    g = _random_grid(rng, n)
    F = Volume.on(g, rng.normal(size=g.dims))
    m = rng.normal(size=g.dims)
    _, grad = ngf_distance(F, Volume.on(g, m), eps)
    fd = fd_gradient(lambda x: ngf_distance(F, Volume.on(g, x), eps)[0], m, 1e-6)
    return rel_err(grad.ravel(), fd)


def check_curvature(rng, n=5) -> float:
    g = _random_grid(rng, n)
    u = rng.normal(size=g.dims + (3,))
    _, grad = curvature_reg(DisplacementField(g, u))
    fd = fd_gradient(lambda x: curvature_reg(DisplacementField(g, x))[0], u, 1e-4)
    return rel_err(grad.ravel(), fd)


def _labels_with_all(rng, grid, k=2):
    """Smooth random label map using every label ``1..k``."""
    while True:
        score = np.stack([gaussian_filter(rng.normal(size=grid.dims), 1.0) for _ in range(k + 1)])
        lv = LabelVolume.on(grid, np.argmax(score, axis=0))
        if lv.labels() == tuple(range(1, k + 1)):
            return lv


def check_seg(rng, n=6, beta=2.0, probes=None) -> float:
    g = _random_grid(rng, n)
    bF, bM = _labels_with_all(rng, g), _labels_with_all(rng, g)
    Y = g.points() + _smooth_field(rng, g, 1.5 * min(g.spacing_mm))
    _, grad = seg_overlap_term(bF, bM, TransformedGrid(g, Y), beta)
    idx = _subset(rng, Y.shape, probes)
    fd = fd_gradient(lambda y: seg_overlap_term(bF, bM, TransformedGrid(g, y), beta)[0], Y, 1e-6, idx)
    return rel_err([grad[i] for i in idx], fd)


def _instance(rng, n, kind):
    g = _random_grid(rng, n)
    F = Volume.on(g, _smooth_image(rng, g))
    M = Volume.on(g, _smooth_image(rng, g))
    bF, bM = _labels_with_all(rng, g), _labels_with_all(rng, g)
    cfg = LossConfig(alpha=0.5, beta=20.0, ngf_eps=5.0, distance_kind=kind)
    return g, F, M, bF, bM, cfg


def check_training_loss(rng, n=6, probes=None) -> float:
    """Both distance kinds; ``probes`` limits the entries of ``u`` checked."""
    errs = []
    for kind in ("ngf", "ssd"):
        g, F, M, bF, bM, cfg = _instance(rng, n, kind)
        u = _smooth_field(rng, g, 1.5 * min(g.spacing_mm))
        _, grad = training_loss_and_gradient(F, M, bF, bM, DisplacementField(g, u), cfg)
        idx = _subset(rng, u.shape, probes)
        fd = fd_gradient(lambda x: training_loss(F, M, bF, bM, DisplacementField(g, x), cfg).total,
                         u, 1e-6, idx)
        errs.append(rel_err([grad[i] for i in idx], fd))
    return max(errs)


def network_loss_fn(w, F, M, bF, bM, cfg, key):
    def fn(x):
        trial = w.copy()
        trial.params[key] = x
        y, _ = unet_forward(trial, F, M, "train")
        return training_loss(F, M, bF, bM, y, cfg).total
    return fn


def check_network(rng, n=8, depth=2, base_filters=4, per_block=None, output_units="voxel") -> dict:
    """Relative error per parameter block of the end-to-end loss gradient.

    ``per_block`` limits the number of probed scalars per block (random
    subset); ``None`` probes every scalar.
    """
    g, F, M, bF, bM, cfg = _instance(rng, n, "ngf")
    w = xavier_init(UNetConfig(depth=depth, base_filters=base_filters, output_units=output_units),
                    int(rng.integers(1 << 31))).astype(np.float64)
    # undamp the output layer so every block carries a visible gradient
    w.params["out.w"] = w.params["out.w"] * 100
    w.params["out.b"] = rng.normal(size=w.params["out.b"].shape) * 0.3
    y, tape = unet_forward(w, F, M, "train")
    _, dL_du = training_loss_and_gradient(F, M, bF, bM, y, cfg)
    grads, _ = unet_backward(w, tape, dL_du)
    errs = {}
    for key in w.trainable():
        p = w.params[key]
        idx = _subset(rng, p.shape, per_block)
        fd = fd_gradient(network_loss_fn(w, F, M, bF, bM, cfg, key), p, 1e-6, idx)
        errs[key] = rel_err([grads[key][i] for i in idx], fd)
    return errs


def run_all(seed: int, per_block: int | None = 3, probes: int | None = 96) -> dict:
    """All checks for one seed; returns ``{name: relative error}``.

    The cheap operators are probed in full; the seg term, training loss and
    network use ``probes`` / ``per_block`` random entries.
    """
    rng = np.random.default_rng(seed)
    out = {
        "ssd": check_ssd(rng),
        "ngf": check_ngf(rng),
        "curvature": check_curvature(rng),
        "seg": check_seg(rng, probes=probes),
        "training_loss": check_training_loss(rng, probes=probes),
    }
    net = check_network(rng, per_block=per_block)
    out["network"] = max(net.values())
    return out


def passed(errors: dict, tolerance: float | None = None) -> bool:
    return all(v < (tolerance if tolerance is not None else TOLERANCES[k]) for k, v in errors.items())

