"""Filtered Neural Galerkin: Gaussian moment propagation of reduced-model weights."""
from .colora import ColoraModel, GaussianBelief, HyperNet
from .filtered import (EnsembleRun, MomentState, ensemble_solve, fng_solve,
                       psd_project, quantile_interval, sample_weights,
                       velocity_jacobian)
from .galerkin import CollocationSet, ng_solve, velocity

__version__ = "0.1.0"

__all__ = [
    "ColoraModel", "GaussianBelief", "HyperNet", "EnsembleRun", "MomentState",
    "ensemble_solve", "fng_solve", "psd_project", "quantile_interval",
    "sample_weights", "velocity_jacobian", "CollocationSet", "ng_solve",
    "velocity",
]
