import logging
import math

import numpy as np
import pytest

from lmssn.datasets import DemoConfig, generate_demo
from lmssn.lolimot import first_split_problem
from lmssn.optimizer import OptimizerConfig, minimize
from lmssn.regularization import (PSI2_GRID, TARGET_GRID, PenaltyMode, SweepResult, SweepRow,
                                  lambda_sweep, recommend_lambda, spearman)

FAST = OptimizerConfig(max_iter=25, track_indicators=False)


@pytest.fixture(scope="module")
def problem():
    ds = generate_demo(5, config=DemoConfig(n_train=300, n_val=100, n_test=100))
    return first_split_problem(ds.part("train"))


def sweep_of(pairs):
    return SweepResult("psi2", [SweepRow(lam, 1.0, psi, 10, "LossTol") for lam, psi in pairs])


class TestPenaltyMode:
    def test_values(self):
        assert PenaltyMode.none().value(0.3) == 0.0
        assert PenaltyMode.psi_squared(2.0).value(0.3) == pytest.approx(0.18)
        assert PenaltyMode.target_deviation(2.0, 0.2).value(0.3) == pytest.approx(0.02)
        assert PenaltyMode.target_deviation(2.0, 0.2).derivative(0.3) == pytest.approx(0.4)
        assert not PenaltyMode.none().active and PenaltyMode.psi_squared(0).active

    @pytest.mark.parametrize("args", [("psi2", -1.0), ("target", 1.0, -0.1), ("l1", 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            PenaltyMode(*args)

    def test_with_lambda_keeps_target(self):
        p = PenaltyMode.target_deviation(1.0, 0.25).with_lambda(1e3)
        assert (p.kind, p.lam, p.psi_target) == ("target", 1e3, 0.25)

    def test_zero_lambda_reduces_to_loss(self, problem):
        spec, _ = problem
        theta = spec.theta0() * 1.01
        J = spec.evaluate(theta)[0]
        for p in (PenaltyMode.psi_squared(0.0), PenaltyMode.target_deviation(0.0, 0.5)):
            assert abs(spec.with_penalty(p).evaluate(theta)[0] - J) <= 1e-15 * J


class TestGrids:
    def test_paper_spans(self):
        assert len(PSI2_GRID) == 9 and PSI2_GRID[0] == 1e-4 and PSI2_GRID[-1] == 1e4
        assert len(TARGET_GRID) == 8 and TARGET_GRID[0] == 0.1 and TARGET_GRID[-1] == 1e6


class TestSweep:
    def test_rows_sorted_and_complete(self, problem):
        spec, psi0 = problem
        res = lambda_sweep(spec, spec.theta0(), [10.0, 0.1, 1.0], config=FAST)
        assert [r.lam for r in res.rows] == [0.1, 1.0, 10.0]
        assert all(r.iterations <= 25 for r in res.rows)
        assert res.column("lam").tolist() == [0.1, 1.0, 10.0]

    def test_zero_lambda_row_matches_plain_training(self, problem):
        spec, _ = problem
        res = lambda_sweep(spec, spec.theta0(), [0.0], config=FAST)
        _, log, rep = minimize(spec, spec.theta0(), FAST)
        assert res.rows[0].J == log.rows[-1]["J"]
        assert res.rows[0].iterations == rep.iterations

    def test_target_rows_carry_target(self, problem, tmp_path):
        spec, psi0 = problem
        res = lambda_sweep(spec, spec.theta0(), [1.0, 100.0], "target", psi0, FAST, threads=2)
        assert all(r.psi_target == psi0 for r in res.rows)
        res.to_csv(tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == ("lambda,J,psi_p,psi_deviation,iterations,reason,"
                            "max_pole_radius,stable")
        assert len(lines) == 3 and "np." not in lines[1]

    def test_parallel_equals_serial(self, problem):
        spec, _ = problem
        a = lambda_sweep(spec, spec.theta0(), [0.5, 5.0], config=FAST, threads=1)
        b = lambda_sweep(spec, spec.theta0(), [0.5, 5.0], config=FAST, threads=2)
        assert [(r.J, r.psi_p) for r in a.rows] == [(r.J, r.psi_p) for r in b.rows]

    @pytest.mark.parametrize("grid", [[], [-1.0]])
    def test_bad_grid(self, problem, grid):
        spec, _ = problem
        with pytest.raises(ValueError):
            lambda_sweep(spec, spec.theta0(), grid)

    def test_bad_mode(self, problem):
        spec, _ = problem
        with pytest.raises(ValueError):
            lambda_sweep(spec, spec.theta0(), [1.0], mode="none", config=FAST)


class TestRecommend:
    def test_crossing_between_one_and_ten(self):
        s = sweep_of([(0.1, 0.40), (1.0, 0.30), (10.0, 0.20), (100.0, 0.10)])
        assert recommend_lambda(s, 0.23) == 10.0

    def test_all_below(self):
        s = sweep_of([(0.1, 0.1), (1.0, 0.1), (10.0, 0.1), (100.0, 0.05)])
        assert recommend_lambda(s, 0.23) == 10.0

    def test_fallback_warns(self, caplog):
        s = sweep_of([(0.1, 0.5), (10.0, 0.35), (100.0, 0.3)])
        with caplog.at_level(logging.WARNING):
            assert recommend_lambda(s, 0.23) == 100.0
        assert "falling back" in caplog.text

    def test_empty(self):
        with pytest.raises(ValueError):
            recommend_lambda(sweep_of([]), 0.2)


def test_spearman():
    assert spearman([1, 2, 3, 4], [10, 20, 25, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert math.isclose(spearman([1, 2, 3, 4], [1, 1, 2, 2]), 0.894427191, rel_tol=1e-8)
    assert np.isfinite(spearman([1, 2, 3], [1, 3, 2]))
