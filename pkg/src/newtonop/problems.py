"""Nonlinear elliptic problems in residual form F(u) = 0.

Sign convention everywhere: the Newton step solves J(u) du = -F(u) with
J = dF/du. Scalar problems read

    F(u) = -Lap_h u + r(u) - g

with a polynomial reaction r and a source g; the Gray-Scott system uses
replicate (homogeneous Neumann) padding and interleaves the unknowns per
node as (A_0, S_0, A_1, S_1, ...).

Besides the GridFunction-level API, every problem exposes a vector API
(``residual_vec``, ``jvp``, ``jtvp``, ``jacobian_band``) on storage-order
arrays, batched over leading axes, which the solver and the losses use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from newtonop.grid import (
    Boundary,
    Grid,
    GridFunction,
    boundary_frame,
    laplacian_values,
)
from newtonop.errors import GridMismatchError


def _poly(coeffs, x):
    out = np.zeros_like(x)
    for c in reversed(coeffs):
        out = out * x + c
    return out


def _poly_deriv(coeffs):
    return tuple(k * c for k, c in enumerate(coeffs))[1:]


def _band_from_entries(size, kl, ku, rows, cols, vals):
    ab = np.zeros((kl + ku + 1, size))
    np.add.at(ab, (ku + rows - cols, cols), vals)
    return ab


def _stencil_entries(grid: Grid, neumann: bool = False):
    """(rows, cols, weights) of the unscaled 5/3-point Laplacian pattern.

    Dirichlet: diagonal -2*dim, neighbours +1. Neumann (replicate padding):
    a missing neighbour cancels against the centre.
    """
    n = grid.n_interior
    idx = np.arange(grid.size).reshape(grid.shape)
    rows, cols, w = [], [], []
    diag = np.full(grid.size, -2.0 * grid.dim)
    for ax in range(grid.dim):
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        a, b = idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()
        rows += [a, b]
        cols += [b, a]
        w += [np.ones(a.size), np.ones(a.size)]
        if neumann:
            for edge in (0, n - 1):
                sel = [slice(None)] * grid.dim
                sel[ax] = edge
                diag[idx[tuple(sel)].ravel()] += 1.0
    rows.append(np.arange(grid.size))
    cols.append(np.arange(grid.size))
    w.append(diag)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(w)


@dataclass(frozen=True, eq=False)
class ScalarProblem:
    """-Lap u + r(u) - g = 0 with Dirichlet data; r is a polynomial in u."""

    name: str
    grid: Grid
    reaction: tuple
    source: np.ndarray
    boundary: Boundary = field(default_factory=Boundary.zero)
    params: tuple = ()
    diffusion_sign: int = 1

    def __post_init__(self):
        src = np.array(self.source, dtype=np.float64).ravel()
        if src.size != self.grid.size:
            raise GridMismatchError("source must live on the problem grid")
        src.flags.writeable = False
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "reaction", tuple(float(c) for c in self.reaction))
        self.boundary.check(self.grid)
        object.__setattr__(self, "_frame", boundary_frame(self.grid, self.boundary))

    @property
    def n_unknowns(self):
        return self.grid.size

    @property
    def bandwidth(self):
        k = 1 if self.grid.dim == 1 else self.grid.n_interior
        return k, k

    def _check(self, u: GridFunction):
        if u.grid != self.grid:
            raise GridMismatchError(f"field on {u.grid}, problem on {self.grid}")

    # -- field-level API -------------------------------------------------
    def residual(self, u: GridFunction) -> GridFunction:
        self._check(u)
        lap = laplacian_values(self.grid, u.values, frame=u.padded())
        r = -lap + _poly(self.reaction, u.values) - self.source
        return GridFunction(self.grid, r)

    def jacobian_diag(self, u: GridFunction) -> GridFunction:
        self._check(u)
        return GridFunction(self.grid, _poly(_poly_deriv(self.reaction), u.values))

    def to_vector(self, u: GridFunction) -> np.ndarray:
        self._check(u)
        return np.array(u.values)

    def from_vector(self, x) -> GridFunction:
        return GridFunction(self.grid, x, self.boundary)

    def step_field(self, dx) -> GridFunction:
        return GridFunction(self.grid, dx)

    # -- vector API --------------------------------------------------------
    def residual_vec(self, x):
        x = np.asarray(x, dtype=np.float64)
        lap = laplacian_values(self.grid, x, frame=self._frame)
        return -lap + _poly(self.reaction, x) - self.source

    def jacobian_diag_vec(self, x):
        return _poly(_poly_deriv(self.reaction), np.asarray(x, dtype=np.float64))

    def jvp(self, x, v, diag=None):
        """J(x) v; ``diag`` may carry a precomputed reaction derivative."""
        d = self.jacobian_diag_vec(x) if diag is None else diag
        return -laplacian_values(self.grid, v) + d * v

    def jtvp(self, x, w, diag=None):
        return self.jvp(x, w, diag)

    def jacobian_band(self, x):
        x = np.asarray(x, dtype=np.float64)
        rows, cols, w = _stencil_entries(self.grid)
        vals = -w / self.grid.h ** 2
        kl, ku = self.bandwidth
        ab = _band_from_entries(self.grid.size, kl, ku, rows, cols, vals)
        ab[ku] += self.jacobian_diag_vec(x)
        return ab, kl, ku

    def residual_floor(self, x):
        """Size of the residual that float64 rounding of the iterate alone produces."""
        x = np.asarray(x, dtype=np.float64)
        scale = max(np.max(np.abs(x), initial=0.0), np.max(np.abs(self._frame), initial=0.0))
        stencil = 4.0 * self.grid.dim / self.grid.h ** 2
        react = np.max(np.abs(_poly(self.reaction, x)), initial=0.0)
        return np.finfo(float).eps * (stencil * scale + react + np.max(np.abs(self.source), initial=0.0))

    def initial_lift(self) -> GridFunction:
        """Harmonic-ish lift of the boundary data: linear in x for 1D, zero otherwise."""
        if self.grid.dim == 1 and self.boundary.kind == "constant":
            a, b = self.boundary.values
            return GridFunction(self.grid, a + (b - a) * self.grid.axis(), self.boundary)
        return GridFunction.zeros(self.grid, self.boundary)


@dataclass(frozen=True, eq=False)
class GrayScottProblem:
    """Steady Gray-Scott system with homogeneous Neumann data.

    F_A = D_A Lap A - S A^2 + (mu + rho) A
    F_S = D_S Lap S + S A^2 - rho (1 - S)
    """

    grid: Grid
    D_A: float = 2.5e-4
    D_S: float = 5.0e-4
    mu: float = 0.065
    rho: float = 0.04
    name: str = "grayscott"

    def __post_init__(self):
        if self.grid.dim != 2:
            raise ValueError("Gray-Scott is defined on 2D grids")
        if not (self.D_A > 0 and self.D_S > 0 and self.mu >= 0 and self.rho >= 0):
            raise ValueError("need D_A, D_S > 0 and mu, rho >= 0")

    @property
    def params(self):
        return (self.D_A, self.D_S, self.mu, self.rho)

    @property
    def n_unknowns(self):
        return 2 * self.grid.size

    @property
    def bandwidth(self):
        k = 2 * self.grid.n_interior + 1
        return k, k

    def _check(self, *fields):
        for f in fields:
            if f.grid != self.grid:
                raise GridMismatchError(f"field on {f.grid}, problem on {self.grid}")

    # -- field-level API -------------------------------------------------
    def residual_system(self, A: GridFunction, S: GridFunction):
        self._check(A, S)
        fa, fs = self._residual_parts(A.values, S.values)
        return GridFunction(self.grid, fa), GridFunction(self.grid, fs)

    def jacobian_blocks(self, A: GridFunction, S: GridFunction):
        """Reaction parts of dF_A/dA, dF_A/dS, dF_S/dA, dF_S/dS as diagonal fields."""
        self._check(A, S)
        blocks = self._blocks(A.values, S.values)
        return tuple(GridFunction(self.grid, b) for b in blocks)

    def _residual_parts(self, a, s):
        lap_a = laplacian_values(self.grid, a, mode="replicate")
        lap_s = laplacian_values(self.grid, s, mode="replicate")
        sa2 = s * a * a
        fa = self.D_A * lap_a - sa2 + (self.mu + self.rho) * a
        fs = self.D_S * lap_s + sa2 - self.rho * (1.0 - s)
        return fa, fs

    def _blocks(self, a, s):
        return (
            -2.0 * s * a + (self.mu + self.rho),
            -a * a,
            2.0 * s * a,
            a * a + self.rho,
        )

    def to_vector(self, state) -> np.ndarray:
        A, S = state
        self._check(A, S)
        x = np.empty(self.n_unknowns)
        x[0::2] = A.values
        x[1::2] = S.values
        return x

    def from_vector(self, x):
        x = np.asarray(x, dtype=np.float64)
        return GridFunction(self.grid, x[0::2]), GridFunction(self.grid, x[1::2])

    def step_field(self, dx):
        return self.from_vector(dx)

    def split(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x[..., 0::2], x[..., 1::2]

    def _merge(self, a, b):
        out = np.empty(a.shape[:-1] + (2 * a.shape[-1],))
        out[..., 0::2] = a
        out[..., 1::2] = b
        return out

    # -- vector API --------------------------------------------------------
    def residual_vec(self, x):
        a, s = self.split(x)
        return self._merge(*self._residual_parts(a, s))

    def jacobian_diag_vec(self, x):
        a, s = self.split(x)
        return np.stack(self._blocks(a, s))

    def jvp(self, x, v, diag=None):
        aa, as_, sa, ss = self.jacobian_diag_vec(x) if diag is None else diag
        va, vs = self.split(v)
        ja = self.D_A * laplacian_values(self.grid, va, mode="replicate") + aa * va + as_ * vs
        js = self.D_S * laplacian_values(self.grid, vs, mode="replicate") + sa * va + ss * vs
        return self._merge(ja, js)

    def jtvp(self, x, w, diag=None):
        aa, as_, sa, ss = self.jacobian_diag_vec(x) if diag is None else diag
        wa, ws = self.split(w)
        ja = self.D_A * laplacian_values(self.grid, wa, mode="replicate") + aa * wa + sa * ws
        js = self.D_S * laplacian_values(self.grid, ws, mode="replicate") + as_ * wa + ss * ws
        return self._merge(ja, js)

    def jacobian_band(self, x):
        a, s = self.split(x)
        rows, cols, w = _stencil_entries(self.grid, neumann=True)
        h2 = self.grid.h ** 2
        aa, as_, sa, ss = self._blocks(a, s)
        node = np.arange(self.grid.size)
        all_rows = np.concatenate([2 * rows, 2 * rows + 1, 2 * node, 2 * node, 2 * node + 1, 2 * node + 1])
        all_cols = np.concatenate([2 * cols, 2 * cols + 1, 2 * node, 2 * node + 1, 2 * node, 2 * node + 1])
        all_vals = np.concatenate([self.D_A * w / h2, self.D_S * w / h2, aa, as_, sa, ss])
        kl, ku = self.bandwidth
        return _band_from_entries(self.n_unknowns, kl, ku, all_rows, all_cols, all_vals), kl, ku

    def residual_floor(self, x):
        x = np.asarray(x, dtype=np.float64)
        a, s = self.split(x)
        scale = np.max(np.abs(x), initial=0.0)
        stencil = 8.0 * max(self.D_A, self.D_S) / self.grid.h ** 2
        react = np.max(np.abs(s * a * a), initial=0.0) + (self.mu + self.rho) * scale + self.rho
        return np.finfo(float).eps * (stencil * scale + react)

    def initial_lift(self):
        return GridFunction.zeros(self.grid), GridFunction.from_function(self.grid, lambda x, y: np.ones_like(x))


# -- catalog ---------------------------------------------------------------


def example1d(n: int = 1023) -> ScalarProblem:
    """-u'' + u^2 = 0 on (0, 1), u(0) = 0, u(1) = 1; two solutions."""
    grid = Grid(1, n)
    return ScalarProblem("example1d", grid, (0.0, 0.0, 1.0), np.zeros(grid.size), Boundary.constant((0.0, 1.0)))


def convex2d(n: int = 63) -> ScalarProblem:
    """-Lap u + u^2 - sin(5 pi (x + y)) = 0 with zero boundary."""
    grid = Grid(2, n)
    x, y = grid.mesh()
    src = np.sin(5.0 * np.pi * (x + y))
    return ScalarProblem("convex2d", grid, (0.0, 0.0, 1.0), src, Boundary.zero())


def nonconvex2d(n: int = 63, s: float = 1600.0) -> ScalarProblem:
    """-Lap u - u^2 + s sin(pi x) sin(pi y) = 0 with zero boundary."""
    grid = Grid(2, n)
    x, y = grid.mesh()
    src = -s * np.sin(np.pi * x) * np.sin(np.pi * y)
    return ScalarProblem("nonconvex2d", grid, (0.0, 0.0, -1.0), src, Boundary.zero(), params=(float(s),))


def grayscott(n: int = 63, D_A: float = 2.5e-4, D_S: float = 5.0e-4, mu: float = 0.065, rho: float = 0.04):
    return GrayScottProblem(Grid(2, n), D_A, D_S, mu, rho)


def polynomial_problem(grid: Grid, coeffs, source=None, boundary=None) -> ScalarProblem:
    """User problem -Lap u + sum_k c_k u^k - g = 0."""
    src = np.zeros(grid.size) if source is None else source
    bc = boundary or Boundary.zero()
    params = (float(len(coeffs)),) + tuple(float(c) for c in coeffs)
    if not bc.is_zero:
        params += bc.values
    return ScalarProblem("polynomial", grid, tuple(coeffs), src, bc, params=params)


PROBLEM_TAGS = {"example1d": 0, "convex2d": 1, "nonconvex2d": 2, "grayscott": 3, "polynomial": 4}


def make_problem(name: str, n: int | None = None, **params):
    """Build a catalog problem by name; unknown names raise ``ValueError``."""
    kw = {} if n is None else {"n": int(n)}
    if name == "example1d":
        return example1d(**kw)
    if name == "convex2d":
        return convex2d(**kw)
    if name == "nonconvex2d":
        if "s" in params:
            kw["s"] = float(params["s"])
        return nonconvex2d(**kw)
    if name == "grayscott":
        for key in ("D_A", "D_S", "mu", "rho"):
            if key in params:
                kw[key] = float(params[key])
        return grayscott(**kw)
    raise ValueError(f"unknown problem {name!r}")


def problem_descriptor(p):
    """(tag, params) used by the binary dataset format."""
    if isinstance(p, GrayScottProblem):
        return PROBLEM_TAGS["grayscott"], tuple(p.params)
    if p.name == "polynomial" and p.source.any():
        raise ValueError("polynomial problems with a source cannot be serialised")
    return PROBLEM_TAGS[p.name], tuple(p.params)


def problem_from_descriptor(tag: int, params, grid: Grid):
    name = {v: k for k, v in PROBLEM_TAGS.items()}.get(tag)
    if name is None:
        raise ValueError(f"unknown problem tag {tag}")
    params = list(params)
    if name == "example1d":
        return example1d(grid.n_interior)
    if name == "convex2d":
        return convex2d(grid.n_interior)
    if name == "nonconvex2d":
        return nonconvex2d(grid.n_interior, params[0])
    if name == "grayscott":
        return grayscott(grid.n_interior, *params)
    k = int(params[0])
    coeffs = params[1:1 + k]
    rest = params[1 + k:]
    bc = Boundary.constant(rest) if rest else Boundary.zero()
    return polynomial_problem(grid, coeffs, boundary=bc)
