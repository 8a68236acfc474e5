"""Numerical substrate: dual numbers, finite differences, quadrature,
matrix exponential and a small first-order optimizer."""

from probe.numeric.calculus import (
    finite_diff_gradient,
    finite_diff_jacobian,
    mixed_partial_2d,
    quadrature,
    simpson_2d,
)
from probe.numeric.dual import Dual, dual_forward, jacobian_dual
from probe.numeric.expm import matrix_exp
from probe.numeric.optim import OptimizerState, sgd_step

__all__ = [
    "Dual",
    "OptimizerState",
    "dual_forward",
    "finite_diff_gradient",
    "finite_diff_jacobian",
    "jacobian_dual",
    "matrix_exp",
    "mixed_partial_2d",
    "quadrature",
    "sgd_step",
    "simpson_2d",
]
