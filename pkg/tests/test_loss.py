import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import gaussian_filter

from mlreg.fields import DisplacementField, TransformedGrid, identity_field, warp
from mlreg.grid import Grid, LabelVolume, MaskChannels, Volume, gradient_array
from mlreg.loss import (DistanceKind, LossConfig, curvature_reg, loss_gradient_wrt_field,
                        ngf_distance, seg_overlap_term, ssd_distance, total_cost, training_loss,
                        training_loss_and_gradient)


def central_fd(fn, x, h, indices=None):
    x = np.array(x, dtype=float)
    indices = list(np.ndindex(x.shape)) if indices is None else indices
    out = []
    for idx in indices:
        old = x[idx]
        x[idx] = old + h
        a = fn(x)
        x[idx] = old - h
        b = fn(x)
        x[idx] = old
        out.append((a - b) / (2 * h))
    return np.array(out)


def rel(a, b):
    return np.abs(np.ravel(a) - np.ravel(b)).max() / np.abs(b).max()


def ngf_oracle(F, M, eps):
    """Direct per-voxel summation of the NGF integrand."""
    gF = gradient_array(F.data, F.spacing_mm)
    gM = gradient_array(M.data, M.spacing_mm)
    total = 0.0
    for idx in np.ndindex(F.dims):
        a, b = gF[(slice(None),) + idx], gM[(slice(None),) + idx]
        num = (float(a @ b) + eps ** 2) ** 2
        den = (float(a @ a) + eps ** 2) * (float(b @ b) + eps ** 2)
        total += 1.0 - num / den
    return F.grid.voxel_volume * total


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def smooth(rng, shape, sigma=1.0, scale=1.0):
    return scale * gaussian_filter(rng.normal(size=shape), sigma)


def label_map(rng, grid, k=2):
    while True:
        s = np.stack([gaussian_filter(rng.normal(size=grid.dims), 1.0) for _ in range(k + 1)])
        lv = LabelVolume.on(grid, np.argmax(s, axis=0))
        if lv.labels() == tuple(range(1, k + 1)):
            return lv


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=-1)
    with pytest.raises(ValueError):
        LossConfig(ngf_eps=0)
    assert LossConfig(distance_kind="ssd").distance_kind is DistanceKind.SSD


# --- SSD ---------------------------------------------------------------------

def test_ssd_zero_for_equal(rng):
    F = Volume(rng.normal(size=(4, 4, 4)))
    v, g = ssd_distance(F, F)
    assert v == 0 and not g.any()


def test_ssd_unit_example():
    v, g = ssd_distance(Volume(np.zeros((2, 2, 2))), Volume(np.ones((2, 2, 2))))
    assert v == 4.0
    np.testing.assert_array_equal(g, 1.0)


def test_ssd_voxel_volume_weighting():
    v, _ = ssd_distance(Volume(np.zeros((2, 2, 2)), (2.0, 1.0, 0.5)),
                        Volume(np.ones((2, 2, 2)), (2.0, 1.0, 0.5)))
    assert v == 4.0


def test_ssd_gradient_fd(rng):
    g = Grid((4, 4, 4), (0.8, 1.2, 1.5))
    F, m = Volume.on(g, rng.normal(size=g.dims)), rng.normal(size=g.dims)
    _, grad = ssd_distance(F, Volume.on(g, m))
    fd = central_fd(lambda x: ssd_distance(F, Volume.on(g, x))[0], m, 1e-4)
    assert rel(grad, fd) < 1e-7


def test_ssd_geometry_mismatch():
    with pytest.raises(ValueError, match="geometry"):
        ssd_distance(Volume(np.zeros((2, 2, 2))), Volume(np.zeros((2, 2, 2)), (2.0, 1.0, 1.0)))


# --- NGF ---------------------------------------------------------------------

def test_ngf_constant_volumes_zero():
    v, g = ngf_distance(Volume(np.full((4, 4, 4), 3.0)), Volume(np.full((4, 4, 4), -7.0)), 0.5)
    assert v == 0.0 and not g.any()


def test_ngf_matches_direct_summation(rng):
    g = Grid((5, 6, 4), (0.9, 1.1, 1.6))
    F, M = Volume.on(g, smooth(rng, g.dims, scale=10)), Volume.on(g, smooth(rng, g.dims, scale=10))
    assert ngf_distance(F, M, 0.3)[0] == pytest.approx(ngf_oracle(F, M, 0.3), rel=1e-12)


def test_ngf_affine_intensity_invariance(rng):
    g = Grid((8, 8, 8))
    x = g.points()
    F = Volume.on(g, np.sin(x[..., 0] / 2) * 100 + 30 * np.cos(x[..., 1] / 3) + x[..., 2] * 10)
    M = Volume.on(g, 2.5 * F.data + 40.0)
    U = Volume.on(g, smooth(rng, g.dims, scale=100))
    scale = np.abs(gradient_array(F.data, g.spacing_mm)).max()
    eps = 1e-6 * scale
    v_aff = ngf_distance(F, M, eps)[0]
    assert v_aff < 1e-9 * g.size
    assert v_aff < ngf_distance(F, U, eps)[0]
    assert v_aff == pytest.approx(ngf_oracle(F, M, eps), abs=1e-12)


def test_ngf_gradient_fd(rng):
    g = Grid((6, 6, 6), (1.0, 0.7, 1.3))
    F, m = Volume.on(g, rng.normal(size=g.dims)), rng.normal(size=g.dims)
    _, grad = ngf_distance(F, Volume.on(g, m), 0.1)
    fd = central_fd(lambda x: ngf_distance(F, Volume.on(g, x), 0.1)[0], m, 1e-6)
    assert rel(grad, fd) < 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), eps=st.floats(1e-3, 1e2))
def test_ngf_bounds_and_symmetry(seed, eps):
    r = np.random.default_rng(seed)
    g = Grid((4, 4, 4), tuple(r.uniform(0.5, 2, size=3)))
    F, M = Volume.on(g, r.normal(size=g.dims) * 10), Volume.on(g, r.normal(size=g.dims) * 10)
    v = ngf_distance(F, M, eps)[0]
    assert -1e-12 <= v <= g.voxel_volume * g.size * (1 + 1e-12)
    assert v == pytest.approx(ngf_distance(M, F, eps)[0], rel=1e-12, abs=1e-12)


def test_ngf_rejects_bad_eps():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        ngf_distance(v, v, 0.0)


# --- curvature ---------------------------------------------------------------

def test_curvature_constant_zero_everywhere():
    g = Grid((4, 5, 6), (0.5, 1.0, 2.0))
    v, grad = curvature_reg(DisplacementField(g, np.broadcast_to([1.0, -2.0, 3.0], g.dims + (3,))))
    assert v == 0.0 and not grad.any()


def test_curvature_affine_interior_zero(rng):
    g = Grid((6, 6, 6), (1.0, 0.5, 2.0))
    A = rng.normal(size=(3, 3))
    f = DisplacementField(g, g.points() @ A.T + rng.normal(size=3))
    v, grad = curvature_reg(f, interior_only=True)
    assert v < 1e-20
    assert np.abs(grad).max() < 1e-10
    assert curvature_reg(f)[0] > 0   # boundary replication does penalise affine fields


def test_curvature_gradient_fd(rng):
    g = Grid((5, 5, 5), (1.0, 1.4, 0.7))
    u = rng.normal(size=g.dims + (3,))
    _, grad = curvature_reg(DisplacementField(g, u))
    fd = central_fd(lambda x: curvature_reg(DisplacementField(g, x))[0], u, 1e-4)
    assert rel(grad, fd) < 1e-6


def test_curvature_interior_gradient_fd(rng):
    g = Grid((5, 5, 5))
    u = rng.normal(size=g.dims + (3,))
    _, grad = curvature_reg(DisplacementField(g, u), interior_only=True)
    fd = central_fd(lambda x: curvature_reg(DisplacementField(g, x), interior_only=True)[0], u, 1e-4)
    assert rel(grad, fd) < 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_curvature_nonnegative(seed):
    r = np.random.default_rng(seed)
    g = Grid((3, 4, 3))
    assert curvature_reg(DisplacementField(g, r.normal(size=g.dims + (3,))))[0] >= 0


def test_curvature_small_grid():
    with pytest.raises(ValueError):
        curvature_reg(identity_field(Grid((2, 4, 4))))


# --- segmentation term -------------------------------------------------------

def test_seg_identical_masks_zero(rng):
    g = Grid((6, 6, 6))
    lv = label_map(rng, g)
    v, grad = seg_overlap_term(lv, lv, TransformedGrid.identity(g), 3.0)
    assert v == 0.0 and not grad.any()


def test_seg_unit_example():
    g = Grid((2, 2, 2))
    bF = MaskChannels(g, (1,), np.ones((1, 2, 2, 2)))
    bM = MaskChannels(g, (1,), np.zeros((1, 2, 2, 2)))
    assert seg_overlap_term(bF, bM, TransformedGrid.identity(g), 2.0)[0] == 8.0


def test_seg_label_mismatch_lists_labels():
    g = Grid((2, 2, 2))
    a = LabelVolume.on(g, np.array([0, 1, 2, 0, 0, 0, 0, 0]).reshape(2, 2, 2))
    b = LabelVolume.on(g, np.array([0, 1, 3, 0, 0, 0, 0, 0]).reshape(2, 2, 2))
    with pytest.raises(ValueError, match=r"\[1, 2\].*\[1, 3\]"):
        seg_overlap_term(a, b, TransformedGrid.identity(g), 1.0)


def test_seg_gradient_fd(rng):
    g = Grid((6, 6, 6), (1.2, 0.9, 1.0), (1.0, 2.0, 3.0))
    bF, bM = label_map(rng, g), label_map(rng, g)
    u = np.stack([gaussian_filter(rng.normal(size=g.dims), 1.0) for _ in range(3)], -1)
    Y = g.points() + 1.3 * u / np.abs(u).max()
    _, grad = seg_overlap_term(bF, bM, TransformedGrid(g, Y), 2.0)
    fd = central_fd(lambda y: seg_overlap_term(bF, bM, TransformedGrid(g, y), 2.0)[0], Y, 1e-6)
    assert rel(grad, fd) < 1e-4


# --- combined losses ---------------------------------------------------------

def instance(rng, kind="ngf", alpha=0.5, beta=20.0):
    g = Grid((6, 6, 6), (1.1, 0.9, 1.3), (-2.0, 0.0, 1.0))
    F = Volume.on(g, smooth(rng, g.dims, scale=100))
    M = Volume.on(g, smooth(rng, g.dims, scale=100))
    bF, bM = label_map(rng, g), label_map(rng, g)
    u = np.stack([gaussian_filter(rng.normal(size=g.dims), 1.0) for _ in range(3)], -1)
    f = DisplacementField(g, 1.2 * u / np.abs(u).max())
    return F, M, bF, bM, f, LossConfig(alpha=alpha, beta=beta, ngf_eps=5.0, distance_kind=kind)


def test_total_cost_identity_aligned(rng):
    F = Volume(smooth(rng, (5, 5, 5), scale=50))
    v = total_cost(F, F, identity_field(F.grid), LossConfig())
    assert v.total == 0.0 and v.distance == 0.0 and v.regularizer == 0.0


@pytest.mark.parametrize("kind", ["ngf", "ssd"])
def test_total_cost_decomposition(rng, kind):
    F, M, bF, bM, f, cfg = instance(rng, kind)
    v = total_cost(F, M, f, cfg)
    Mw = warp(M, f.transformed_grid())
    d = (ssd_distance(F, Mw) if kind == "ssd" else ngf_distance(F, Mw, cfg.ngf_eps))[0]
    r = curvature_reg(f)[0]
    assert abs(v.distance - d) <= 1e-12 * max(1, abs(d))
    assert abs(v.regularizer - r) <= 1e-12 * max(1, abs(r))
    assert abs(v.total - (d + cfg.alpha * r)) <= 1e-12 * max(1, abs(v.total))
    assert v.seg_term == 0.0


def test_total_cost_alpha_zero_is_distance(rng):
    F, M, bF, bM, f, _ = instance(rng)
    v = total_cost(F, M, f, LossConfig(alpha=0.0))
    assert v.total == v.distance


def test_training_loss_beta_zero_equals_total_cost(rng):
    F, M, bF, bM, f, cfg = instance(rng, beta=0.0)
    assert training_loss(F, M, bF, bM, f, cfg) == total_cost(F, M, f, cfg)


def test_training_loss_decomposition(rng):
    F, M, bF, bM, f, cfg = instance(rng)
    v = training_loss(F, M, bF, bM, f, cfg)
    s = seg_overlap_term(bF, bM, f.transformed_grid(), cfg.beta)[0]
    assert abs(v.seg_term - s) <= 1e-12 * s
    assert abs(v.total - (v.distance + cfg.alpha * v.regularizer + v.seg_term)) <= 1e-12 * v.total


def test_training_loss_aligned_zero(rng):
    g = Grid((6, 6, 6))
    F = Volume.on(g, smooth(rng, g.dims, scale=50))
    lv = label_map(rng, g)
    v, grad = training_loss_and_gradient(F, F, lv, lv, identity_field(g), LossConfig())
    assert v.total == 0.0
    assert np.linalg.norm(grad) < 1e-10


@pytest.mark.parametrize("kind", ["ngf", "ssd"])
def test_training_loss_full_gradient_fd(rng, kind):
    F, M, bF, bM, f, cfg = instance(rng, kind)
    _, grad = training_loss_and_gradient(F, M, bF, bM, f, cfg)
    fd = central_fd(lambda x: training_loss(F, M, bF, bM, DisplacementField(f.grid, x), cfg).total,
                    f.u, 1e-6)
    assert rel(grad, fd) < 1e-4


def test_gradient_dominated_by_curvature_for_large_alpha(rng):
    F, M, bF, bM, _, _ = instance(rng)
    f = DisplacementField(F.grid, rng.normal(size=F.dims + (3,)))
    cfg = LossConfig(alpha=1e6, beta=1.0, ngf_eps=5.0)
    g = loss_gradient_wrt_field(F, M, bF, bM, f, cfg)
    c = cfg.alpha * curvature_reg(f)[1]
    cos = np.sum(g * c) / (np.linalg.norm(g) * np.linalg.norm(c))
    assert cos > 0.99


def test_loss_rejects_field_on_other_grid(rng):
    F, M, bF, bM, f, cfg = instance(rng)
    with pytest.raises(ValueError):
        training_loss(F, M, bF, bM, identity_field(Grid((6, 6, 6))), cfg)
