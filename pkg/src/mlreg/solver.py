"""Gradient descent with Armijo backtracking on the registration loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .fields import DisplacementField, identity_field
from .loss import LossConfig, training_loss_and_gradient

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 100
    step_mm: float = 1.0
    backtrack: float = 0.5
    max_backtracks: int = 20
    grad_tol: float = 1e-8
    armijo_c: float = 1e-4
    step_growth: float = 2.0
    smooth_sigma_vox: float = 2.0

    def __post_init__(self):
        if self.max_iters < 0 or self.max_backtracks < 1:
            raise ValueError("max_iters must be >= 0 and max_backtracks >= 1")
        if not (self.step_mm > 0 and 0 < self.backtrack < 1 and self.grad_tol > 0
                and self.armijo_c > 0 and self.step_growth >= 1 and self.smooth_sigma_vox >= 0):
            raise ValueError(f"invalid solver configuration {self}")


@dataclass
class SolveResult:
    field: DisplacementField
    losses: list
    iterations: int
    converged: bool


def _smooth(g: np.ndarray, sigma: float) -> np.ndarray:
    # zero-padded Gaussian is a symmetric operator, so K(K g) is a PSD preconditioner
    s = (sigma / np.sqrt(2.0),) * 3 + (0,)
    return gaussian_filter(gaussian_filter(g, s, mode="constant"), s, mode="constant")


def descent_direction(grad: np.ndarray, scfg: SolverConfig) -> np.ndarray:
    if scfg.smooth_sigma_vox <= 0:
        return -grad
    d = -_smooth(grad, scfg.smooth_sigma_vox)
    if float(np.sum(d * grad)) >= 0:
        return -grad
    return d


def solve(F, M, bF, bM, cfg: LossConfig, scfg: SolverConfig,
          init: DisplacementField | None = None) -> SolveResult:
    """Minimise the training loss over the displacement field.

    The search direction is the negative gradient smoothed twice with a
    Gaussian of ``smooth_sigma_vox`` (plain steepest descent when 0).
    Steps are measured as the largest voxel update in mm: a trial step moves
    ``step * d / max|d|``.  After an accepted step the trial length grows by
    ``step_growth`` (capped at ``step_mm``); on rejection it shrinks by
    ``backtrack``.  Accepted losses never increase.
    """
    f = init if init is not None else identity_field(F.grid)
    value, grad = training_loss_and_gradient(F, M, bF, bM, f, cfg)
    if not np.isfinite(value.total):
        raise NumericalError(f"non-finite initial loss {value.total}")
    losses = [value.total]
    step = scfg.step_mm
    converged = False
    it = 0
    for it in range(1, scfg.max_iters + 1):
        gmax = float(np.abs(grad).max())
        if not np.isfinite(gmax):
            raise NumericalError(f"non-finite gradient at iteration {it}")
        if gmax <= scfg.grad_tol:
            converged = True
            it -= 1
            break
        d = descent_direction(grad, scfg)
        dmax = float(np.abs(d).max())
        slope = float(np.sum(grad * d))
        accepted = False
        for _ in range(scfg.max_backtracks):
            t = step / dmax
            trial = DisplacementField(f.grid, f.u + t * d)
            tv, tg = training_loss_and_gradient(F, M, bF, bM, trial, cfg)
            if not np.isfinite(tv.total):
                raise NumericalError(f"non-finite loss at iteration {it}")
            if tv.total <= value.total + scfg.armijo_c * t * slope:
                accepted = True
                break
            step *= scfg.backtrack
        if not accepted:
            log.debug("no Armijo decrease after %d backtracks at iteration %d",
                      scfg.max_backtracks, it)
            converged = True
            it -= 1
            break
        f, value, grad = trial, tv, tg
        losses.append(value.total)
        step = min(step * scfg.step_growth, scfg.step_mm)
    return SolveResult(f, losses, it, converged)


def iterative_solve(F, M, bF, bM, cfg: LossConfig, scfg: SolverConfig,
                    init: DisplacementField | None = None) -> DisplacementField:
    return solve(F, M, bF, bM, cfg, scfg, init).field
