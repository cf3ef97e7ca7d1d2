"""Finite-difference Newton solvers and learned Newton-step operators."""

__version__ = "0.1.0"

from newtonop.grid import Boundary, Grid, GridFunction, laplacian, norm  # noqa: E402
from newtonop.newton import NewtonConfig, Status, newton_solve, sweep_solutions  # noqa: E402
from newtonop.problems import convex2d, example1d, grayscott, make_problem, nonconvex2d  # noqa: E402
