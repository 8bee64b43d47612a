"""Learned descent for nonsmooth, nonconvex image reconstruction.

Minimizes ``phi(x) = f(x) + sum_i |g_i(x)|`` where ``f`` is a least-squares
fidelity and ``g`` a (possibly learned) feature map, by gradient steps on
the Nesterov-smoothed objective with a shrinking smoothing level.
"""
from ldarecon._backend import BACKEND
from ldarecon.errors import (
    InvalidArgument, InvalidConfiguration, InvalidData, LdaError, NumericalFailure,
    TrainingFailure, Unsupported)
from ldarecon.feature_map import (
    ConvNetMap, ConvNetParams, IdentityMap, LinearDiffMap, make_feature_map)
from ldarecon.fidelity import (
    DenseOperator, IdentityOperator, LeastSquares, MaskedDftOperator, make_radial_mask)
from ldarecon.solver import (
    IterateTrace, LipschitzBudget, SolverConfig, StepSchedule, agd_baseline, gd_baseline,
    lda_step, reduce_eps, solve)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConvNetMap", "ConvNetParams", "DenseOperator", "IdentityMap",
    "IdentityOperator", "InvalidArgument", "InvalidConfiguration", "InvalidData",
    "IterateTrace", "LdaError", "LeastSquares", "LinearDiffMap", "LipschitzBudget",
    "MaskedDftOperator", "NumericalFailure", "SolverConfig", "StepSchedule",
    "TrainingFailure", "Unsupported", "agd_baseline", "gd_baseline", "lda_step",
    "make_feature_map", "make_radial_mask", "reduce_eps", "solve",
]
