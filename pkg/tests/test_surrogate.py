import csv

import numpy as np
import pytest

from newtonop.neural import NeuralOperator
from newtonop.newton import Status, newton_solve
from newtonop.problems import convex2d, example1d
from newtonop.surrogate import (
    ExactStepOracle,
    ZeroOperator,
    bench,
    iterate_many,
    nearest_distance,
    operator_iterate,
    write_bench_csv,
)


class Scaled:
    """Newton step times a constant factor."""

    def __init__(self, problem, c):
        self.o = ExactStepOracle(problem)
        self.c = c

    def predict(self, U):
        return self.c * self.o.predict(U)


def test_oracle_matches_newton_solve():
    p = convex2d(15)
    u0 = p.initial_lift()
    traj = newton_solve(p, u0)
    tr = operator_iterate(ExactStepOracle(p), p, u0, 4)
    k = min(len(tr.iterates), len(traj.iterates))
    for a, b in zip(tr.iterates[:k], traj.iterates[:k]):
        assert np.max(np.abs(a - p.to_vector(b))) <= 1e-12
    assert tr.residual_linf[-1] < 1e-9


def test_zero_model_is_stationary():
    p = example1d(31)
    u0 = p.initial_lift()
    tr = operator_iterate(ZeroOperator(), p, u0, 3, solutions=[u0])
    assert all(np.array_equal(x, tr.iterates[0]) for x in tr.iterates)
    assert tr.dist_rel_l2 == [0.0] * 4
    assert tr.first_increase is None


def test_hybrid_tail_switches_to_exact():
    p = convex2d(15)
    u0 = p.initial_lift()
    r0 = float(np.max(np.abs(p.residual_vec(p.to_vector(u0)))))
    tr = operator_iterate(Scaled(p, 0.5), p, u0, 6, hybrid_tail=0.3 * r0)
    assert tr.used_exact[0] is False
    assert any(tr.used_exact)
    first = tr.used_exact.index(True)
    assert all(tr.used_exact[first:])
    assert tr.residual_linf[-1] < 1e-9


def test_first_increase_and_divergence():
    p = example1d(31)
    tr = operator_iterate(Scaled(p, -1.0), p, p.initial_lift(), 3)
    assert tr.first_increase == 1
    tr = operator_iterate(Scaled(p, 1e9), p, p.initial_lift(), 3, divergence_cap=1e6)
    assert tr.status == Status.DIVERGED and len(tr.iterates) == 1


def test_trajectory_csv(tmp_path):
    p = example1d(15)
    tr = operator_iterate(ExactStepOracle(p), p, p.initial_lift(), 2)
    tr.write_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["step", "residual_linf", "dist_to_solution_rel_l2", "used_exact_newton"]
    assert len(rows) == 4 and rows[1][2] == ""


def test_nearest_distance():
    p = example1d(7)
    u = p.initial_lift()
    assert nearest_distance(p, p.to_vector(u), None) is None
    assert nearest_distance(p, 2 * p.to_vector(u), [u]) == pytest.approx(1.0)


def test_iterate_many_matches_single():
    p = convex2d(7)
    U0 = p.to_vector(p.initial_lift()) + 0.1 * np.random.default_rng(0).normal(size=(3, 49))
    m = NeuralOperator.create(p, p=3, width=4)
    res = iterate_many(m, p, U0, 2)
    for i in range(3):
        tr = operator_iterate(m, p, U0[i], 2)
        np.testing.assert_allclose(res[i], tr.residual_linf, rtol=1e-12)


def test_bench_and_csv(tmp_path):
    p = convex2d(7)
    m = NeuralOperator.create(p, stride=2, p=3, width=4)
    rows = bench(p, m, [1, 3], repetitions=2)
    assert [r.n_systems for r in rows] == [1, 3]
    assert all(r.solver_min > 0 and r.operator_min > 0 for r in rows)
    assert all(r.solver_min <= r.solver_median for r in rows)
    write_bench_csv(tmp_path / "b.csv", rows)
    lines = open(tmp_path / "b.csv").read().splitlines()
    assert lines[0] == "n_systems,solver_seconds,operator_seconds,speedup" and len(lines) == 3
    with pytest.raises(ValueError):
        bench(p, m, [0])
    with pytest.raises(ValueError):
        bench(p, m, [5], inputs=np.zeros((2, 49)))
