"""Multilevel learned deformable 3D image registration.

Images live on cell-centered grids (:mod:`mlreg.grid`), deformations are
displacement fields in mm (:mod:`mlreg.fields`), and each pyramid level has
its own predictor: a U-Net (:mod:`mlreg.unet`) or an iterative solver
(:mod:`mlreg.solver`).  :func:`register` chains them coarse to fine and
:func:`train_progressive` trains the networks level by level.
"""

from .fields import DisplacementField, TransformedGrid, compose, jacobian_folding, warp
from .grid import Grid, LabelVolume, MaskChannels, Volume, build_pyramid
from .loss import DistanceKind, LossConfig, LossValue, total_cost, training_loss
from .metrics import LandmarkSet, MetricsReport, dice, tre
from .multilevel import (MultilevelConfig, MultilevelResult, apply_to_points, register,
                         train_progressive)
from .solver import NumericalError, SolverConfig, iterative_solve
from .unet import NetWeights, UNetConfig, unet_forward, xavier_init

__version__ = "0.1.0"

__all__ = [
    "DisplacementField", "TransformedGrid", "compose", "jacobian_folding", "warp",
    "Grid", "LabelVolume", "MaskChannels", "Volume", "build_pyramid",
    "DistanceKind", "LossConfig", "LossValue", "total_cost", "training_loss",
    "LandmarkSet", "MetricsReport", "dice", "tre",
    "MultilevelConfig", "MultilevelResult", "apply_to_points", "register", "train_progressive",
    "NumericalError", "SolverConfig", "iterative_solve",
    "NetWeights", "UNetConfig", "unet_forward", "xavier_init",
]
