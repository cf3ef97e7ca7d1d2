"""Learned-operator Newton iteration and the solver-vs-operator timing harness."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from newtonop.newton import Status, batch_newton_step_vec, newton_step_vec
from newtonop.rng import Rng


class ExactStepOracle:
    """Model stand-in whose prediction is the true Newton step."""

    def __init__(self, problem, threads=1):
        self.problem = problem
        self.threads = threads

    def predict(self, U):
        U = np.asarray(U, dtype=np.float64)
        if U.ndim == 1:
            return newton_step_vec(self.problem, U)
        return batch_newton_step_vec(self.problem, U, self.threads)


class ZeroOperator:
    def predict(self, U):
        return np.zeros_like(np.asarray(U, dtype=np.float64))


@dataclass
class SurrogateTrajectory:
    iterates: list = field(default_factory=list)
    residual_linf: list = field(default_factory=list)
    dist_rel_l2: list = field(default_factory=list)
    # row k: whether the step that produced iterate k was an exact Newton step
    used_exact: list = field(default_factory=list)
    status: Status = Status.MAX_ITER
    first_increase: int | None = None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "residual_linf", "dist_to_solution_rel_l2", "used_exact_newton"])
            for k, (r, d, e) in enumerate(zip(self.residual_linf, self.dist_rel_l2, self.used_exact)):
                w.writerow([k, repr(float(r)), "" if d is None else repr(float(d)), int(e)])


def nearest_distance(problem, x, solutions):
    """Relative L2 distance from storage vector ``x`` to the closest reference solution."""
    if not solutions:
        return None
    best = np.inf
    for s in solutions:
        sv = problem.to_vector(s)
        best = min(best, np.linalg.norm(x - sv) / max(np.linalg.norm(sv), np.finfo(float).tiny))
    return float(best)


def operator_iterate(model, problem, u0, max_steps, hybrid_tail=None, solutions=None, divergence_cap=1e6):
    """u <- u + model(u), switching to exact Newton below ``hybrid_tail`` if given."""
    x = np.array(u0 if isinstance(u0, np.ndarray) else problem.to_vector(u0), dtype=np.float64)
    tr = SurrogateTrajectory()

    def record(x, exact):
        r = float(np.max(np.abs(problem.residual_vec(x))))
        if tr.first_increase is None and tr.residual_linf and r > tr.residual_linf[-1]:
            tr.first_increase = len(tr.residual_linf)
        tr.iterates.append(x.copy())
        tr.residual_linf.append(r)
        tr.dist_rel_l2.append(nearest_distance(problem, x, solutions))
        tr.used_exact.append(exact)
        return r

    r = record(x, False)
    for _ in range(max_steps):
        exact = hybrid_tail is not None and r < hybrid_tail
        step = newton_step_vec(problem, x) if exact else np.asarray(model.predict(x[None, :]))[0]
        x_new = x + step
        if not np.all(np.isfinite(x_new)) or np.max(np.abs(x_new)) > divergence_cap:
            tr.status = Status.DIVERGED
            return tr
        x = x_new
        r = record(x, exact)
    return tr


def iterate_many(model, problem, U0, steps, divergence_cap=1e6):
    """Batched surrogate iteration; returns the (n, steps+1) array of residual Linf norms.

    Rows that leave the cap are frozen and report inf from then on.
    """
    X = np.array(U0, dtype=np.float64)
    res = np.empty((X.shape[0], steps + 1))
    alive = np.ones(X.shape[0], dtype=bool)
    res[:, 0] = np.max(np.abs(problem.residual_vec(X)), axis=1)
    for k in range(1, steps + 1):
        X[alive] += model.predict(X[alive])
        bad = ~np.all(np.isfinite(X), axis=1) | (np.max(np.abs(X), axis=1) > divergence_cap)
        alive &= ~bad
        res[:, k] = np.inf
        if alive.any():
            res[alive, k] = np.max(np.abs(problem.residual_vec(X[alive])), axis=1)
    return res


@dataclass
class BenchRow:
    n_systems: int
    solver_min: float
    solver_median: float
    operator_min: float
    operator_median: float

    @property
    def speedup(self):
        return self.solver_median / self.operator_median


def _time(fn, reps):
    out = []
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return min(out), statistics.median(out)


def bench(problem, model, counts, repetitions=3, inputs=None, threads=1):
    """Time ``batch_newton_step`` against one batched model forward on the same states.

    ``inputs`` supplies the states (at least max(counts) rows); by default they
    are the boundary lift plus small smooth perturbations.
    """
    if not counts or min(counts) < 1 or repetitions < 1:
        raise ValueError("counts must be >= 1 and repetitions >= 1")
    need = max(counts)
    if inputs is None:
        base = problem.to_vector(problem.initial_lift())
        inputs = base + 0.1 * Rng(0).normal(need * problem.n_unknowns).reshape(need, -1)
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[0] < need:
        raise ValueError(f"need {need} input states, got {inputs.shape[0]}")
    rows = []
    for n in counts:
        X = inputs[:n]
        smin, smed = _time(lambda: batch_newton_step_vec(problem, X, threads), repetitions)
        omin, omed = _time(lambda: model.predict(X), repetitions)
        rows.append(BenchRow(n, smin, smed, omin, omed))
    return rows


def write_bench_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_systems", "solver_seconds", "operator_seconds", "speedup"])
        for r in rows:
            w.writerow([r.n_systems, repr(r.solver_median), repr(r.operator_median), repr(r.speedup)])

