"""Banded Newton solver, multi-start solution sweeps and batched single steps."""

from __future__ import annotations

import csv
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from newtonop import kernels
from newtonop.errors import SingularJacobianError
from newtonop.grid import norm_values


@dataclass
class BandedMatrix:
    """Square band matrix in column band storage.

    ``storage[ku + i - j, j]`` holds entry (i, j) for ``j - ku <= i <= j + kl``.
    """

    n: int
    kl: int
    ku: int
    storage: np.ndarray

    def __post_init__(self):
        self.storage = np.asarray(self.storage, dtype=np.float64)
        if self.storage.shape != (self.kl + self.ku + 1, self.n):
            raise ValueError(f"band storage shape {self.storage.shape} for n={self.n}, kl={self.kl}, ku={self.ku}")
        if self.n > 1 and (self.kl >= self.n or self.ku >= self.n):
            raise ValueError("bandwidths must be smaller than the order")

    @classmethod
    def from_dense(cls, a, kl, ku):
        a = np.asarray(a, dtype=np.float64)
        n = a.shape[0]
        ab = np.zeros((kl + ku + 1, n))
        for d in range(-kl, ku + 1):
            diag = np.diagonal(a, d)
            if d >= 0:
                ab[ku - d, d:] = diag
            else:
                ab[ku - d, : n + d] = diag
        return cls(n, kl, ku, ab)

    def to_dense(self):
        a = np.zeros((self.n, self.n))
        for d in range(-self.kl, self.ku + 1):
            if d >= 0:
                vals = self.storage[self.ku - d, d:]
            else:
                vals = self.storage[self.ku - d, : self.n + d]
            a += np.diag(vals, d)
        return a

    def matvec(self, x):
        x = np.asarray(x, dtype=np.float64)
        y = np.zeros(self.n)
        for d in range(-self.kl, self.ku + 1):
            row = self.storage[self.ku - d]
            if d >= 0:
                y[: self.n - d] += row[d:] * x[d:]
            else:
                y[-d:] += row[: self.n + d] * x[: self.n + d]
        return y

    def skewed(self):
        """Row-skewed working copy for the LU kernel: width 2*kl + ku + 1."""
        n, kl, ku = self.n, self.kl, self.ku
        work = np.zeros((n, 2 * kl + ku + 1))
        for d in range(-kl, ku + 1):
            lo, hi = max(0, -d), min(n, n - d)
            work[lo:hi, d + kl] = self.storage[ku - d, lo + d:hi + d]
        return work


def banded_lu_solve(M: BandedMatrix, rhs) -> np.ndarray:
    """Solve ``M x = rhs`` by LU with partial pivoting inside the band.

    Raises :class:`SingularJacobianError` when a pivot falls below
    ``1e-14 * max|M|``.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (M.n,):
        raise ValueError(f"rhs of shape {rhs.shape} for order {M.n}")
    scale = np.max(np.abs(M.storage), initial=0.0)
    work = M.skewed()
    mult, piv = kernels.band_lu_factor(work, M.kl, M.ku, 1e-14 * scale)
    return kernels.band_lu_solve(work, mult, piv, M.kl, M.ku, rhs)


def assemble_jacobian(problem, u) -> BandedMatrix:
    """J = dF/du as a band matrix; ``u`` is a state or a raw storage vector."""
    x = u if isinstance(u, np.ndarray) else problem.to_vector(u)
    ab, kl, ku = problem.jacobian_band(x)
    return BandedMatrix(problem.n_unknowns, kl, ku, ab)


class Status(enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    DIVERGED = "Diverged"
    SINGULAR = "SingularJacobian"


@dataclass
class NewtonConfig:
    tol_residual: float = 1e-10
    max_iter: int = 50
    divergence_cap: float = 1e6
    damping: float = 1.0

    def __post_init__(self):
        if not self.tol_residual > 0:
            raise ValueError("tol_residual must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class NewtonTrajectory:
    iterates: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    status: Status = Status.MAX_ITER
    # max(tol_residual, float64 rounding floor of the final iterate)
    tol_effective: float = 0.0

    @property
    def converged(self):
        return self.status is Status.CONVERGED

    @property
    def solution(self):
        return self.iterates[-1]

    @property
    def iterations(self):
        return len(self.steps)


def newton_step_vec(problem, x):
    """Newton step at storage vector ``x``: solves J(x) dx = -F(x)."""
    return banded_lu_solve(assemble_jacobian(problem, x), -problem.residual_vec(x))


def newton_solve(problem, u0, cfg: NewtonConfig | None = None) -> NewtonTrajectory:
    """Full-step (optionally damped) Newton iteration from ``u0``.

    Non-convergence is reported through ``status``, never raised. The
    tolerance is floored at the residual that rounding of the iterate to
    float64 produces on its own (see ``problem.residual_floor``).
    """
    cfg = cfg or NewtonConfig()
    x = np.array(problem.to_vector(u0), dtype=np.float64)
    traj = NewtonTrajectory()
    traj.iterates.append(problem.from_vector(x))
    while True:
        r = problem.residual_vec(x)
        rn = float(np.max(np.abs(r)))
        if not np.isfinite(rn):
            traj.status = Status.DIVERGED
            break
        traj.residual_norms.append(rn)
        traj.tol_effective = max(cfg.tol_residual, float(problem.residual_floor(x)))
        if rn <= traj.tol_effective:
            traj.status = Status.CONVERGED
            break
        if traj.iterations >= cfg.max_iter:
            traj.status = Status.MAX_ITER
            break
        try:
            dx = banded_lu_solve(assemble_jacobian(problem, x), -r)
        except SingularJacobianError:
            traj.status = Status.SINGULAR
            break
        x_new = x + cfg.damping * dx
        if not np.all(np.isfinite(x_new)) or np.max(np.abs(x_new)) > cfg.divergence_cap:
            traj.status = Status.DIVERGED
            break
        x = x_new
        traj.steps.append(problem.step_field(dx))
        traj.iterates.append(problem.from_vector(x))
    return traj


def _pmap(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def relative_distance(problem, a, b):
    va, vb = problem.to_vector(a), problem.to_vector(b)
    denom = max(np.linalg.norm(va), np.linalg.norm(vb), np.finfo(float).tiny)
    return float(np.linalg.norm(va - vb) / denom)


@dataclass
class SweepResult:
    solutions: list
    trajectories: list
    # index into ``solutions`` for each guess, or None when it did not converge
    assignment: list


def sweep(problem, guesses, cfg=None, dedup_tol=1e-4, threads=1) -> SweepResult:
    """Newton from every guess, then cluster the converged endpoints."""
    if not guesses:
        raise ValueError("need at least one initial guess")
    trajs = _pmap(lambda g: newton_solve(problem, g, cfg), list(guesses), threads)
    reps, first_idx = [], []
    raw_assign = []
    for t in trajs:
        if not t.converged:
            raw_assign.append(None)
            continue
        for k, rep in enumerate(reps):
            if relative_distance(problem, rep, t.solution) < dedup_tol:
                raw_assign.append(k)
                break
        else:
            reps.append(t.solution)
            raw_assign.append(len(reps) - 1)
    order = sorted(range(len(reps)), key=lambda k: np.linalg.norm(problem.to_vector(reps[k])))
    remap = {old: new for new, old in enumerate(order)}
    return SweepResult(
        [reps[k] for k in order],
        trajs,
        [None if a is None else remap[a] for a in raw_assign],
    )


def sweep_solutions(problem, guesses, cfg=None, dedup_tol=1e-4, threads=1):
    """Distinct converged solutions reached from ``guesses``, sorted by L2 norm."""
    return sweep(problem, guesses, cfg, dedup_tol, threads).solutions


def batch_newton_step(problem, us, threads=1):
    """One Newton step per input state; ``None`` marks a singular Jacobian."""

    def one(u):
        try:
            return problem.step_field(newton_step_vec(problem, problem.to_vector(u)))
        except SingularJacobianError:
            return None

    return _pmap(one, list(us), threads)


def batch_newton_step_vec(problem, X, threads=1):
    """Array form of :func:`batch_newton_step`: rows of ``X`` in, steps out (NaN rows if singular)."""
    X = np.asarray(X, dtype=np.float64)

    def one(x):
        try:
            return newton_step_vec(problem, x)
        except SingularJacobianError:
            return np.full(x.shape, np.nan)

    rows = _pmap(one, list(X), threads)
    return np.array(rows).reshape(X.shape)


# -- exports -----------------------------------------------------------------


def state_norm(problem, state, kind="L2"):
    """Discrete norm of a state; multi-species states combine componentwise in l2."""
    x = problem.to_vector(state)
    comps = x.reshape(-1, problem.grid.size) if x.size == problem.grid.size else np.stack(problem.split(x))
    return float(np.sqrt(np.sum(norm_values(problem.grid, comps, kind) ** 2)))


def write_trajectory_csv(path, problem, traj: NewtonTrajectory):
    grid = problem.grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "residual_linf", "step_l2"])
        for i, r in enumerate(traj.residual_norms):
            if i < len(traj.steps):
                step = repr(state_norm(problem, traj.steps[i]))
            else:
                step = ""
            w.writerow([i, repr(float(r)), step])


def write_pgm(path, field2d):
    """8-bit binary PGM heatmap with linear min-max scaling.

    x runs left to right and y bottom to top. The scaling is recorded in a
    ``<path>.txt`` sidecar.
    """
    a = np.asarray(field2d, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo
    scaled = np.zeros_like(a) if span == 0 else (a - lo) / span
    img = np.round(scaled * 255.0).astype(np.uint8).T[::-1]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    with open(str(path) + ".txt", "w") as fh:
        fh.write(f"min={lo!r}\nmax={hi!r}\nscaling=linear\norientation=x_right_y_up\n")
