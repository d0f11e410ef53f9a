import math

import numpy as np
import pytest

from conftest import random_model
from lmssn.model import GaussianValidity, NrbfNetwork, ScalingTransform, make_model, simulate
from lmssn.optimizer import (ObjectiveSpec, OptimizerConfig, Reason, RunLog,
                             TerminationReport, evaluate_objective, gradient_fd,
                             gradient_reverse, line_search, minimize, run_in_pool,
                             thread_count, write_run)
from lmssn.regularization import PenaltyMode
from lmssn.spacefill import make_grid, psi_p

MODES = [PenaltyMode.none(), PenaltyMode.psi_squared(3.0),
         PenaltyMode.target_deviation(5.0, 0.3)]


def small_spec(seed, penalty=PenaltyMode.none(), N=50, **kw):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n_x=2, n_lm_x=2, n_lm_y=2, **kw)
    u = rng.uniform(-1, 1, N)
    _, y = simulate(m, u)
    y = y + 0.3 * rng.normal(size=N)
    # perturb so the data is not fitted exactly
    spec = ObjectiveSpec(m, u, y, penalty, make_grid(3, 3))
    theta = spec.theta0() + 0.05 * rng.normal(size=spec.layout.size)
    return spec, theta


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b))


class TestObjective:
    def test_zero_lambda_equals_loss(self):
        spec, theta = small_spec(0)
        J = evaluate_objective(spec, theta)[0]
        for p in (PenaltyMode.psi_squared(0.0), PenaltyMode.target_deviation(0.0, 0.4)):
            assert evaluate_objective(spec.with_penalty(p), theta)[0] == J

    def test_target_at_current_psi(self):
        spec, theta = small_spec(1)
        J, parts = evaluate_objective(spec, theta)
        sp = spec.with_penalty(PenaltyMode.target_deviation(1e3, parts["psi_p"]))
        assert evaluate_objective(sp, theta)[0] == J

    @pytest.mark.parametrize("penalty", MODES, ids=lambda p: p.kind)
    def test_independent_recomputation(self, penalty):
        spec, theta = small_spec(2, penalty)
        X, yhat = simulate(spec.model(theta), spec.u)
        J = float(np.sum((spec.y - yhat) ** 2))
        psi = psi_p(spec.scaled(X), spec.grid)
        value, parts = evaluate_objective(spec, theta)
        assert value == pytest.approx(J + penalty.value(psi), rel=1e-12)
        assert parts["psi_p"] == pytest.approx(psi, rel=1e-12)

    def test_divergence_is_infinite(self):
        spec, theta = small_spec(3)
        theta = theta.copy()
        theta[:4] = [3.0, 0.0, 0.0, 3.0]
        theta[8:12] = [3.0, 0.0, 0.0, 3.0]
        value, parts = evaluate_objective(spec, theta)
        assert value == math.inf and parts["diverged"]
        assert spec.value_and_gradient(theta)[1] is None
        with pytest.raises(FloatingPointError):
            gradient_reverse(spec, theta)

    def test_length_mismatch(self):
        spec, theta = small_spec(4)
        with pytest.raises(ValueError):
            evaluate_objective(spec, theta[:-1])


class TestGradient:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("penalty", MODES, ids=lambda p: p.kind)
    def test_against_differences(self, seed, penalty):
        spec, theta = small_spec(100 + seed, penalty)
        assert rel_err(gradient_reverse(spec, theta), gradient_fd(spec, theta)) < 1e-5

    def test_trainable_x0(self):
        spec, theta = small_spec(7, PenaltyMode.psi_squared(2.0), x0=[0.2, -0.1],
                                 train_x0=True)
        assert spec.layout.with_x0
        assert rel_err(gradient_reverse(spec, theta), gradient_fd(spec, theta)) < 1e-5

    def test_linear_least_squares_oracle(self):
        # single linear LM; y_hat is linear in (c, d) so dJ/dc = -2 X^T e
        rng = np.random.default_rng(5)
        net = NrbfNetwork((GaussianValidity([0.5] * 3, [0.3] * 3),))
        A = np.array([[0.6, 0.2], [-0.1, 0.5]])
        m = make_model([A], [[1.0, 0.5]], [[0.0, 0.0]], [[0.3, -0.2]], [0.1], [0.0], net, net,
                       ScalingTransform.identity(3))
        u = rng.normal(size=80)
        y = rng.normal(size=80)
        spec = ObjectiveSpec(m, u, y)
        theta = spec.theta0()
        X, yhat = simulate(m, u)
        e = y - yhat
        g = gradient_reverse(spec, theta)
        np.testing.assert_allclose(g[8:10], -2 * X[:, :2].T @ e, rtol=1e-10)
        assert g[10] == pytest.approx(-2 * u @ e, rel=1e-10)
        assert g[11] == pytest.approx(-2 * e.sum(), rel=1e-10)

    def test_zero_at_stationary_point(self):
        rng = np.random.default_rng(6)
        net = NrbfNetwork((GaussianValidity([0.5] * 3, [0.3] * 3),
                           GaussianValidity([0.2] * 3, [0.3] * 3)))
        A = rng.normal(size=(2, 2, 2)) * 0.3
        m = make_model(A, np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), [0, 0], [0, 0],
                       net, net, ScalingTransform(np.full(3, -1.0), np.full(3, 2.0)))
        spec = ObjectiveSpec(m, rng.normal(size=40), np.zeros(40))
        np.testing.assert_array_equal(gradient_reverse(spec, spec.theta0()), 0.0)
        np.testing.assert_allclose(gradient_fd(spec, spec.theta0()), 0.0, atol=1e-12)

    def test_directional_derivatives(self):
        spec, theta = small_spec(8, PenaltyMode.psi_squared(4.0))
        g = gradient_reverse(spec, theta)
        rng = np.random.default_rng(0)
        for _ in range(5):
            v = rng.normal(size=theta.size)
            v /= np.linalg.norm(v)
            h = 1e-7
            fd = (evaluate_objective(spec, theta + h * v)[0]
                  - evaluate_objective(spec, theta - h * v)[0]) / (2 * h)
            assert g @ v == pytest.approx(fd, rel=1e-4, abs=1e-6)


class TestFiniteDifferences:
    def test_linear_function(self):
        a = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(gradient_fd(lambda t: a @ t, np.ones(3)), a, rtol=1e-9)

    def test_symmetric_quadratic(self):
        Q = np.array([[2.0, 0.5], [0.5, 1.0]])
        x = np.array([0.3, -0.7])
        np.testing.assert_allclose(gradient_fd(lambda t: 0.5 * t @ Q @ t, x), Q @ x, rtol=1e-8)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            gradient_fd(lambda t: 0.0, np.zeros(1), h=0.0)


def rosenbrock(t):
    x, y = t
    f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
    g = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
    return f, g


class TestMinimize:
    def test_quadratic_1d(self):
        x, log, rep = minimize(lambda t: ((t[0] - 3) ** 2, np.array([2 * (t[0] - 3)])), [0.0])
        assert abs(x[0] - 3) < 1e-8
        assert rep.reason is Reason.GRAD_TOL

    def test_rosenbrock(self):
        cfg = OptimizerConfig(grad_tol=1e-10, loss_tol=1e-300)
        x, log, rep = minimize(rosenbrock, [-1.2, 1.0], cfg)
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-6)
        assert rosenbrock(x)[0] < 1e-12
        obj = log.column("objective")
        assert np.all(np.diff(obj) <= 0)

    def test_one_iteration(self):
        x, log, rep = minimize(rosenbrock, [-1.2, 1.0], OptimizerConfig(max_iter=1))
        assert rep.reason is Reason.MAX_ITER and rep.iterations == 1
        np.testing.assert_array_equal(log.column("iteration"), [0, 1])

    def test_start_at_minimum(self):
        x, log, rep = minimize(rosenbrock, [1.0, 1.0])
        assert rep.reason is Reason.GRAD_TOL and rep.iterations == 0 and len(log) == 1

    def test_non_finite_start(self):
        x, log, rep = minimize(lambda t: (math.inf, None), [0.0])
        assert rep.reason is Reason.DIVERGENCE and rep.final_objective == math.inf

    def test_infeasible_region_is_backtracked(self):
        def f(t):
            if t[0] > 1.5:
                return math.inf, None
            return (t[0] - 1.4) ** 2, np.array([2 * (t[0] - 1.4)])
        x, _, rep = minimize(f, [-3.0])
        assert x[0] == pytest.approx(1.4, abs=1e-6)

    def test_model_training_monotone_and_logged(self):
        spec, theta = small_spec(9, PenaltyMode.psi_squared(1.0))
        th, log, rep = minimize(spec, theta, OptimizerConfig(max_iter=30))
        obj = log.column("objective")
        assert np.all(np.diff(obj) <= 0)
        assert log.rows[0]["iteration"] == 0
        assert log.rows[0]["objective"] == evaluate_objective(spec, theta)[0]
        assert log.rows[0]["psi_p"] == evaluate_objective(spec, theta)[1]["psi_p"]
        assert np.all(np.isfinite(log.column("kld"))) and np.all(np.isfinite(log.column("chv")))
        assert rep.final_objective == obj[-1]
        np.testing.assert_array_equal(log.column("J") + 1.0 * log.column("psi_p") ** 2, obj)

    def test_untracked_indicators(self):
        spec, theta = small_spec(10)
        _, log, _ = minimize(spec, theta, OptimizerConfig(max_iter=3, track_indicators=False))
        assert np.all(np.isnan(log.column("kld")))
        assert np.all(np.isfinite(log.column("psi_p")))

    def test_deterministic(self, tmp_path):
        spec, theta = small_spec(11, PenaltyMode.target_deviation(10.0, 0.2))
        for name in ("a", "b"):
            _, log, rep = minimize(spec, theta, OptimizerConfig(max_iter=40))
            write_run(log, rep, str(tmp_path / name))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    @pytest.mark.parametrize("kw", [dict(loss_tol=0.0), dict(max_iter=0), dict(c1=0.95),
                                    dict(grad_tol=-1.0)])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            OptimizerConfig(**kw)


class TestLineSearch:
    def test_strong_wolfe_on_quadratic(self):
        cfg = OptimizerConfig()

        def fg(x):
            return float(x @ x), 2 * x, {}
        x = np.array([1.0, 2.0])
        f0, g0, _ = fg(x)
        p = -0.1 * g0
        a, f, g, _ = line_search(fg, x, p, f0, g0, cfg)
        assert f <= f0 + cfg.c1 * a * (g0 @ p)
        assert abs(g @ p) <= cfg.c2 * abs(g0 @ p)

    def test_ascent_direction_fails(self):
        def fg(x):
            return float(x @ x), 2 * x, {}
        x = np.array([1.0])
        f0, g0, _ = fg(x)
        assert line_search(fg, x, g0, f0, g0, OptimizerConfig()) is None


class TestRunLog:
    def test_csv_round_trip(self, tmp_path):
        spec, theta = small_spec(12)
        _, log, rep = minimize(spec, theta, OptimizerConfig(max_iter=5))
        write_run(log, rep, str(tmp_path / "r"))
        back = RunLog.from_csv(tmp_path / "r.csv")
        for c in ("J", "psi_p", "objective", "grad_norm", "step"):
            np.testing.assert_array_equal(back.column(c), log.column(c))
        assert '"reason": "' in (tmp_path / "r.json").read_text()

    def test_iterations_must_increase(self):
        log = RunLog()
        log.append(iteration=0)
        with pytest.raises(ValueError):
            log.append(iteration=0)

    def test_report_dict(self):
        d = TerminationReport(Reason.LOSS_TOL, 3, 1.5).to_dict()
        assert d == {"reason": "LossTol", "iterations": 3, "final_objective": 1.5}


class TestPool:
    def test_order_kept(self):
        assert run_in_pool(lambda v: v * v, range(7), threads=3) == [v * v for v in range(7)]

    def test_thread_env(self, monkeypatch):
        monkeypatch.setenv("LMSSN_THREADS", "4")
        assert thread_count() == 4
        monkeypatch.setenv("LMSSN_THREADS", "junk")
        assert thread_count() == 1


def test_gradient_on_stiff_trajectory_matches_extrapolated_differences():
    # states leave the scaling box, validities switch sharply and the
    # objective curvature is ~1e10, too stiff for plain central differences
    rng = np.random.default_rng(3)
    m = random_model(rng, n_x=2, n_lm_x=2, n_lm_y=2)
    u = rng.uniform(-1, 1, 50)
    y = simulate(m, u)[1] + 0.2 * rng.normal(size=50)
    spec = ObjectiveSpec(m, u, y, PenaltyMode.psi_squared(5.0), make_grid(3, 5))
    theta = spec.theta0() + 0.05 * rng.normal(size=spec.layout.size)
    assert np.abs(spec.scaled(spec._forward(theta)[1])).max() > 3
    g = gradient_reverse(spec, theta)
    d1, d2 = gradient_fd(spec, theta, 2e-7), gradient_fd(spec, theta, 1e-7)
    richardson = (4 * d2 - d1) / 3
    assert np.linalg.norm(g - richardson) / np.linalg.norm(g) < 1e-7
