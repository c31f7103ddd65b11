import csv

import numpy as np
import pytest

from mlreg.fields import DisplacementField, TransformedGrid, compose, warp
from mlreg.grid import Grid, Volume
from mlreg.loss import LossConfig
from mlreg.multilevel import (LOG_COLUMNS, MultilevelConfig, apply_to_points, level_transform, register,
                              train_progressive)
from mlreg.solver import SolverConfig
from mlreg.synth import generate_synth
from mlreg.unet import UNetConfig, unet_forward, xavier_init

NGF = LossConfig(alpha=10.0, beta=0.0, ngf_eps=20.0)
SOLVER = SolverConfig(max_iters=50, step_mm=2.0, smooth_sigma_vox=1.5)
SMALL = UNetConfig(depth=2, base_filters=4)


@pytest.fixture(scope="module")
def case16():
    return generate_synth(3, (16, 16, 16), 3, 1.0)


def constant_predictor(t):
    def predict(F, Mw, bF, bMw):
        return DisplacementField(F.grid, np.broadcast_to(t, F.dims + (3,)).copy())
    return predict


def test_self_registration_is_identity(case16):
    F = case16.F
    res = register(F, F, MultilevelConfig(levels=3, predictors=(SOLVER,) * 3, loss=NGF))
    err = np.linalg.norm(res.Y.points - F.grid.points(), axis=-1).mean()
    assert err < 0.1
    assert res.folding_fraction == 0.0


def test_single_level_is_one_predictor_call(case16):
    w = xavier_init(SMALL, 4)
    res = register(case16.F, case16.M, MultilevelConfig(levels=1, predictors=(w,)))
    direct = unet_forward(w, case16.F, case16.M, "eval")[0]
    assert res.levels == 1
    assert np.array_equal(res.fields[0].u, direct.u)
    assert np.array_equal(res.Y.points, case16.F.grid.points() + direct.u)


def translated_pair(t, n=32):
    case = generate_synth(11, (n, n, n), 3, 0.5)
    F = case.F
    # M(x + t) = F(x)
    M = warp(F, TransformedGrid(F.grid, F.grid.points() - t))
    return F, M


def test_translation_capture_multilevel_vs_single():
    t = 8.0 * np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
    F, M = translated_pair(t)
    body = F.data > 100.0          # background carries no NGF signal
    solver = SolverConfig(max_iters=50, step_mm=2.0, smooth_sigma_vox=5.0)
    loss = LossConfig(alpha=10.0, beta=0.0, ngf_eps=100.0)
    ml = register(F, M, MultilevelConfig(levels=3, predictors=(solver,) * 3, loss=loss))
    assert np.linalg.norm(ml.displacement().u[body].mean(axis=0) - t) < 0.5
    # same per-level budget, one level: the motion is beyond its capture range
    sl = register(F, M, MultilevelConfig(levels=1, predictors=(solver,), loss=loss))
    assert np.linalg.norm(sl.displacement().u[body].mean(axis=0) - t) > 2.0


def test_stored_transform_recomputes_exactly(case16):
    preds = (xavier_init(SMALL, 1), SOLVER, constant_predictor([0.5, -0.25, 1.0]))
    res = register(case16.F, case16.M, MultilevelConfig(levels=3, predictors=preds, loss=NGF))
    again = level_transform(res.fields, case16.F.grid, 0)
    assert np.array_equal(again.points, res.Y.points)
    pts = case16.F.grid.points().reshape(-1, 3)
    assert np.array_equal(apply_to_points(res, pts).reshape(res.Y.points.shape), res.Y.points)
    # full-resolution warping through either route
    warped = warp(case16.M, TransformedGrid(case16.F.grid, apply_to_points(res, pts).reshape(res.Y.points.shape)))
    assert np.array_equal(warped.data, warp(case16.M, res.Y).data)


def test_translations_add_up(case16):
    ts = [np.array([0.5, 0, 0]), np.array([0, -1.0, 0.25]), np.array([2.0, 0, 0])]
    preds = tuple(constant_predictor(t) for t in ts)
    res = register(case16.F, case16.M, MultilevelConfig(levels=3, predictors=preds))
    p = np.array([[3.2, 7.7, 1.1], [8.0, 8.0, 8.0]])
    assert np.allclose(apply_to_points(res, p), p + sum(ts), atol=1e-12)
    assert np.allclose(res.displacement().u, sum(ts), atol=1e-12)


def test_identity_result_leaves_points(case16):
    res = register(case16.F, case16.M, MultilevelConfig(levels=2, predictors=(constant_predictor([0, 0, 0]),) * 2))
    p = np.random.default_rng(0).uniform(0, 16, size=(10, 3))
    assert np.array_equal(apply_to_points(res, p), p)


def _affine(S, b, c):
    return lambda x: c + (x - c) @ S.T + b


def test_composition_order_finest_applied_first():
    """A level field acts in fixed coordinates before every coarser field.

    The fine predictor sees ``Mw = M o y2`` and returns ``y1`` with
    ``Mw(y1(x)) = F(x)``, so ``M(y2(y1(x))) = F(x)``.  Two non-commuting
    affine maps show that the reverse order does not reproduce ``F``.
    """
    n = 16
    g = Grid((n, n, n))
    c = np.full(3, n / 2.0)
    A = _affine(np.array([[1.0, 0.25, 0], [0, 1.0, 0], [0, 0, 1.0]]), np.array([0.7, 0, 0]), c)
    Binv = _affine(np.array([[1.0, 0, 0], [0, 1.0, 0.2], [0, -0.15, 1.0]]), np.array([0, 0.4, -0.3]), c)
    Ainv_S = np.linalg.inv(np.array([[1.0, 0.25, 0], [0, 1.0, 0], [0, 0, 1.0]]))
    Ainv = lambda z: c + (z - c - np.array([0.7, 0, 0])) @ Ainv_S.T
    B_S = np.linalg.inv(np.array([[1.0, 0, 0], [0, 1.0, 0.2], [0, -0.15, 1.0]]))
    B = lambda x: c + (x - c - np.array([0, 0.4, -0.3])) @ B_S.T

    f = lambda x: np.sin(x[..., 0] / 2.0) + np.cos(x[..., 1] / 4.0) * x[..., 2] / 8.0
    m = lambda z: f(B(Ainv(z)))           # so that m(A(Binv(x))) = f(x)
    F, M = Volume.on(g, f(g.points())), Volume.on(g, m(g.points()))

    def coarse(Fl, Mw, bF, bMw):
        x = Fl.grid.points()
        return DisplacementField(Fl.grid, A(x) - x)

    def fine(Fl, Mw, bF, bMw):
        x = Fl.grid.points()
        return DisplacementField(Fl.grid, Binv(x) - x)

    res = register(F, M, MultilevelConfig(levels=2, predictors=(fine, coarse)))
    x = g.points()
    inner = (slice(3, -3),) * 3
    assert np.allclose(res.Y.points[inner], A(Binv(x))[inner], atol=1e-9)
    assert np.abs(res.Y.points[inner] - Binv(A(x))[inner]).max() > 0.1
    assert np.allclose(m(res.Y.points[inner]), f(x[inner]), atol=1e-9)
    assert np.abs(m(Binv(A(x)))[inner] - f(x[inner])).max() > 0.05
    # the point route agrees with the grid route
    p = x[inner].reshape(-1, 3)
    assert np.allclose(apply_to_points(res, p), A(Binv(p)), atol=1e-9)


def test_fresh_networks_give_near_identity(case16):
    for units in ("mm", "voxel"):
        cfg = UNetConfig(depth=2, base_filters=4, output_units=units)
        preds = tuple(xavier_init(cfg, s) for s in range(3))
        res = register(case16.F, case16.M, MultilevelConfig(levels=3, predictors=preds))
        assert np.linalg.norm(res.displacement().u, axis=-1).mean() < 1.0


def test_mixed_predictors_and_per_level_losses(case16):
    preds = (xavier_init(SMALL, 0), xavier_init(SMALL, 1), SOLVER)
    losses = (NGF, NGF, LossConfig(alpha=5.0, beta=0.0, ngf_eps=20.0))
    res = register(case16.F, case16.M, MultilevelConfig(levels=3, predictors=preds, loss=losses))
    assert [f.grid.dims for f in res.fields] == [(16,) * 3, (8,) * 3, (4,) * 3]
    assert all(v is not None for v in res.loss_before + res.loss_after)
    # the iterative coarse level does not increase its loss
    assert res.loss_after[2].total <= res.loss_before[2].total


def test_register_errors(case16):
    cfg = MultilevelConfig(levels=3, predictors=(SOLVER,) * 2)
    with pytest.raises(ValueError, match="predictors"):
        register(case16.F, case16.M, cfg)
    odd = Volume(np.zeros((12, 12, 10)))
    with pytest.raises(ValueError):
        register(odd, odd, MultilevelConfig(levels=3, predictors=(SOLVER,) * 3))
    shifted = Volume(case16.M.data, case16.M.spacing_mm, (1.0, 0, 0))
    with pytest.raises(ValueError, match="geometry"):
        register(case16.F, shifted, MultilevelConfig(levels=1, predictors=(SOLVER,)))

    def broken(F, Mw, bF, bMw):
        raise ValueError("boom")
    with pytest.raises(ValueError, match="level 2: boom"):
        register(case16.F, case16.M, MultilevelConfig(levels=2, predictors=(SOLVER, broken)))


def test_epoch_split():
    assert MultilevelConfig(levels=3, epochs=30).epoch_split() == [10, 10, 10]
    assert MultilevelConfig(levels=3, epochs=32).epoch_split() == [10, 10, 12]
    assert MultilevelConfig(levels=1, epochs=7).epoch_split() == [7]
    with pytest.raises(ValueError):
        MultilevelConfig(levels=0)
    with pytest.raises(ValueError):
        MultilevelConfig(init="zeros")


@pytest.fixture(scope="module")
def small_training(tmp_path_factory):
    cases = [generate_synth(s, (16, 16, 16), 3, 1.0, translation_mm=2.0) for s in range(4)]
    cfg = MultilevelConfig(levels=2, epochs=12, lr=1e-2, loss=LossConfig(alpha=1.0, beta=10.0, ngf_eps=20.0),
                           unet=UNetConfig(depth=2, base_filters=4, output_units="voxel"))
    path = tmp_path_factory.mktemp("train") / "log.csv"
    return cases, cfg, train_progressive(cases, cfg, seed=0, validation=cases[:1], log_path=path), path


def test_training_loss_decreases_per_level(small_training):
    _, cfg, res, _ = small_training
    for level in (1, 2):
        losses = [r["mean_loss"] for r in res.log if r["level"] == level]
        assert len(losses) == 6
        assert losses[-1] < losses[0]
    assert [r["level"] for r in res.log] == [2] * 6 + [1] * 6
    assert set(res.validation) == {1, 2}


def test_training_log_file(small_training):
    _, _, res, path = small_training
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == LOG_COLUMNS
    assert len(rows) == len(res.log)
    assert float(rows[0]["mean_loss"]) == res.log[0]["mean_loss"]


def test_trained_weights_register(small_training):
    cases, cfg, res, _ = small_training
    cfg2 = MultilevelConfig(levels=2, predictors=tuple(res.weights), loss=cfg.loss)
    out = register(cases[0].F, cases[0].M, cfg2)
    assert out.levels == 2 and np.isfinite(out.Y.points).all()


def test_training_is_deterministic(small_training):
    cases, cfg, res, _ = small_training
    again = train_progressive(cases, cfg, seed=0)
    assert [r["mean_loss"] for r in again.log] == [r["mean_loss"] for r in res.log]


def test_training_preconditions():
    cases = [generate_synth(0, (16, 16, 16), 3, 1.0)]
    with pytest.raises(ValueError, match="epochs"):
        train_progressive(cases, MultilevelConfig(levels=3, epochs=2))
    with pytest.raises(ValueError, match="empty"):
        train_progressive([], MultilevelConfig(levels=1, epochs=1))
    other = generate_synth(1, (8, 8, 8), 3, 1.0)
    with pytest.raises(ValueError, match="dims"):
        train_progressive(cases + [other], MultilevelConfig(levels=1, epochs=1, unet=SMALL))
