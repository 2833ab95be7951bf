"""Generalized Kalman smoothing: classic block-tridiagonal smoothers, a
piecewise linear-quadratic penalty calculus, first-order splitting solvers,
and a structure-exploiting interior-point method."""

from . import statespace, blocktridiag, plq, firstorder, interior, bench

__version__ = "0.1.0"
