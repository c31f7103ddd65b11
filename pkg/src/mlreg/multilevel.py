"""Coarse-to-fine registration by composing per-level deformations.

Level 1 is the finest, level L the coarsest.  On level ``l`` the moving
image is warped with all coarser deformations and the level predictor
registers the fixed image against that warped image.  Its field therefore
acts in fixed-image coordinates *before* the coarser ones::

    Y_l(x) = y_L( ... y_{l+2}( y_{l+1}(x) ) )
    Y(x)   = y_L( ... y_2( y_1(x) ) )

which is the composition under which ``M(Y(x))`` matches ``F(x)``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .fields import DisplacementField, TransformedGrid, compose, eval_deformation, identity_field, jacobian_folding, warp
from .grid import Volume, build_mask_pyramid, build_pyramid, paired_channels
from .loss import LossConfig, LossValue, training_loss, training_loss_and_gradient
from .solver import NumericalError, SolverConfig, iterative_solve
from .unet import AdamState, NetWeights, UNetConfig, adam_step, check_input_shape, unet_backward, unet_forward, with_running_stats, xavier_init

log = logging.getLogger(__name__)


@dataclass
class MultilevelConfig:
    """Settings shared by :func:`register` and :func:`train_progressive`.

    ``predictors`` and per-level ``loss`` tuples are ordered finest first.
    A predictor is a :class:`NetWeights`, a :class:`SolverConfig` (iterative
    solve on that level) or a callable ``(F, Mw, bF, bMw) -> DisplacementField``.
    """

    levels: int = 3
    predictors: tuple = ()
    loss: object = field(default_factory=LossConfig)
    epochs: int = 30
    lr: float = 1e-3
    init: str = "pretrained"
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.init not in ("pretrained", "xavier"):
            raise ValueError(f"init must be 'pretrained' or 'xavier', got {self.init!r}")
        self.predictors = tuple(self.predictors)

    def loss_at(self, level: int) -> LossConfig:
        """Loss configuration for 1-based ``level``."""
        if isinstance(self.loss, LossConfig):
            return self.loss
        return tuple(self.loss)[level - 1]

    def epoch_split(self) -> list:
        """Epochs per level, finest first; the remainder goes to the coarsest."""
        base, rest = divmod(self.epochs, self.levels)
        split = [base] * self.levels
        split[-1] += rest
        return split


@dataclass
class MultilevelResult:
    fields: list            # y_1 .. y_L, finest first
    Y: TransformedGrid      # on the finest grid
    loss_before: list
    loss_after: list
    folding_fraction: float
    runtime_s: float = 0.0

    @property
    def levels(self) -> int:
        return len(self.fields)

    def displacement(self) -> DisplacementField:
        return self.Y.displacement()


def level_transform(fields, grid, level: int) -> TransformedGrid:
    """``Y_level`` on ``grid``: apply every field coarser than ``level``, finest first.

    ``fields`` is finest first and may contain ``None`` for levels that are
    not computed yet.
    """
    Y = TransformedGrid.identity(grid)
    for f in fields[level:]:
        Y = compose(f, Y)
    return Y


def apply_to_points(result: MultilevelResult, points) -> np.ndarray:
    """Map fixed-space world points through ``y_1`` first, ``y_L`` last."""
    p = np.asarray(points, dtype=np.float64)
    for f in result.fields:
        p = eval_deformation(f, p)
    return p


def _predict(predictor, F, Mw, bF, bMw, loss_cfg):
    if isinstance(predictor, NetWeights):
        return unet_forward(predictor, F, Mw, "eval")[0]
    if isinstance(predictor, SolverConfig):
        return iterative_solve(F, Mw, bF, bMw, loss_cfg, predictor)
    if callable(predictor):
        return predictor(F, Mw, bF, bMw)
    raise TypeError(f"unsupported predictor {type(predictor).__name__}")


def register(F: Volume, M: Volume, cfg: MultilevelConfig, bF=None, bM=None) -> MultilevelResult:
    """Multilevel registration; with ``levels == 1`` this is a single predictor call."""
    t0 = time.perf_counter()
    L = cfg.levels
    if not F.grid.same_geometry(M.grid):
        raise ValueError("fixed and moving images must share geometry")
    if len(cfg.predictors) != L:
        raise ValueError(f"need {L} predictors (finest first), got {len(cfg.predictors)}")
    Fp, Mp = build_pyramid(F, L), build_pyramid(M, L)
    use_masks = bF is not None and bM is not None
    if use_masks:
        bF, bM = paired_channels(bF, bM)
    bFp = build_mask_pyramid(bF, L) if use_masks else [None] * L
    bMp = build_mask_pyramid(bM, L) if use_masks else [None] * L
    for l, pred in enumerate(cfg.predictors):
        if isinstance(pred, NetWeights):
            check_input_shape(pred.config, Fp[l].dims)

    fields = [None] * L
    before, after = [None] * L, [None] * L
    for l in reversed(range(L)):
        grid = Fp[l].grid
        Y = level_transform(fields, grid, l + 1)
        Mw = warp(Mp[l], Y)
        bMw = warp(bMp[l], Y) if use_masks else None
        loss_cfg = cfg.loss_at(l + 1)
        try:
            y = _predict(cfg.predictors[l], Fp[l], Mw, bFp[l], bMw, loss_cfg)
        except (ValueError, NumericalError) as exc:
            raise type(exc)(f"level {l + 1}: {exc}") from exc
        if not y.grid.same_geometry(grid):
            raise ValueError(f"level {l + 1}: predictor returned a field on the wrong grid")
        fields[l] = y
        before[l] = training_loss(Fp[l], Mw, bFp[l], bMw, identity_field(grid), loss_cfg)
        after[l] = training_loss(Fp[l], Mw, bFp[l], bMw, y, loss_cfg)

    Y = level_transform(fields, Fp[0].grid, 0)
    _, fold = jacobian_folding(Y.displacement())
    return MultilevelResult(fields, Y, before, after, fold, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# progressive training

@dataclass
class TrainCase:
    F: Volume
    M: Volume
    bF: object = None
    bM: object = None


@dataclass
class TrainResult:
    weights: list                      # finest first
    log: list                          # dict rows, one per (level, epoch)
    validation: dict = field(default_factory=dict)   # level -> final validation loss


LOG_COLUMNS = ("level", "epoch", "mean_loss", "mean_distance", "mean_seg_term", "mean_regularizer")


def _as_case(c) -> TrainCase:
    if isinstance(c, TrainCase):
        return c
    if hasattr(c, "F") and hasattr(c, "M"):
        return TrainCase(c.F, c.M, getattr(c, "bF", None), getattr(c, "bM", None))
    return TrainCase(*c)


class _LevelData:
    """Pyramids of one case; warped inputs recomputed from the frozen coarse nets."""

    def __init__(self, case: TrainCase, L: int):
        self.Fp = build_pyramid(case.F, L)
        self.Mp = build_pyramid(case.M, L)
        self.masks = case.bF is not None and case.bM is not None
        if self.masks:
            bF, bM = paired_channels(case.bF, case.bM)
            self.bFp = build_mask_pyramid(bF, L)
            self.bMp = build_mask_pyramid(bM, L)

    def inputs(self, l: int, frozen: list):
        L = len(self.Fp)
        fields = [None] * L
        for k in reversed(range(l + 1, L)):
            grid = self.Fp[k].grid
            Y = level_transform(fields, grid, k + 1)
            fields[k] = unet_forward(frozen[k], self.Fp[k], warp(self.Mp[k], Y), "eval")[0]
        Y = level_transform(fields, self.Fp[l].grid, l + 1)
        Mw = warp(self.Mp[l], Y)
        if not self.masks:
            return self.Fp[l], Mw, None, None
        return self.Fp[l], Mw, self.bFp[l], warp(self.bMp[l], Y)


def validation_loss(weights: list, data: list, l: int, cfg: MultilevelConfig) -> float:
    """Mean level-``l`` training loss of the eval-mode net over prepared cases."""
    losses = []
    for d in data:
        F, Mw, bF, bMw = d.inputs(l, weights)
        y = unet_forward(weights[l], F, Mw, "eval")[0]
        losses.append(training_loss(F, Mw, bF, bMw, y, cfg.loss_at(l + 1)).total)
    return float(np.mean(losses))


def train_progressive(dataset, cfg: MultilevelConfig, seed: int = 0, validation=None,
                      log_path=None) -> TrainResult:
    """Train one network per level, coarsest first, freezing each once trained.

    Finer levels start from the next coarser level's learned weights
    (``cfg.init == "pretrained"``) or from a fresh Xavier draw.
    """
    L = cfg.levels
    if cfg.epochs < L:
        raise ValueError(f"epochs ({cfg.epochs}) must be >= levels ({L})")
    cases = [_as_case(c) for c in dataset]
    if not cases:
        raise ValueError("empty training set")
    dims = cases[0].F.dims
    for i, c in enumerate(cases):
        if c.F.dims != dims or c.M.dims != dims:
            raise ValueError(f"case {i} has dims {c.F.dims}, expected {dims}")
    data = [_LevelData(c, L) for c in cases]
    vdata = [_LevelData(_as_case(c), L) for c in validation or []]
    for p in data[0].Fp:
        check_input_shape(cfg.unet, p.dims)

    rng = np.random.default_rng(seed)
    split = cfg.epoch_split()
    weights = [None] * L
    rows, val = [], {}
    for l in reversed(range(L)):
        if l == L - 1 or cfg.init == "xavier":
            w = xavier_init(cfg.unet, seed + 7919 * (L - 1 - l) if cfg.init == "xavier" else seed)
        else:
            w = weights[l + 1].copy()
        state = AdamState()
        loss_cfg = cfg.loss_at(l + 1)
        for epoch in range(1, split[l] + 1):
            acc = []
            for ci in rng.permutation(len(data)):
                F, Mw, bF, bMw = data[ci].inputs(l, weights)
                y, tape = unet_forward(w, F, Mw, "train")
                value, g = training_loss_and_gradient(F, Mw, bF, bMw, y, loss_cfg)
                if not np.isfinite(value.total):
                    raise NumericalError(f"non-finite loss at level {l + 1}, epoch {epoch}, case {ci}")
                grads, _ = unet_backward(w, tape, g)
                w = with_running_stats(w, tape)
                w, state = adam_step(w, grads, state, lr=cfg.lr)
                acc.append(value)
            row = {"level": l + 1, "epoch": epoch,
                   "mean_loss": float(np.mean([v.total for v in acc])),
                   "mean_distance": float(np.mean([v.distance for v in acc])),
                   "mean_seg_term": float(np.mean([v.seg_term for v in acc])),
                   "mean_regularizer": float(np.mean([v.regularizer for v in acc]))}
            rows.append(row)
            log.info("level %d epoch %d loss %.6g", l + 1, epoch, row["mean_loss"])
        weights[l] = w
        if vdata:
            val[l + 1] = validation_loss(weights, vdata, l, cfg)
    if log_path is not None:
        write_training_log(rows, log_path)
    return TrainResult(weights, rows, val)


def write_training_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in LOG_COLUMNS})
