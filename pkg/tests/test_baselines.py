import numpy as np
import pytest
from hypothesis import given, strategies as st

from tensorvar.baselines import (VarConfig, default_background_covariance, fourdvar,
                                 fourdvar_cost_grad, lbfgs, lorenz96_vjp, strong_wolfe,
                                 threedvar, threedvar_cost_grad, threedvar_window)
from tensorvar.dynamics import lorenz96_rhs, lorenz96_spec, propagate, spinup_initial
from tensorvar.errors import InvalidSpecError, NonFiniteError
from tensorvar.observation import ObservationSpec, every_kth, observation_operator


def rosenbrock(x):
    f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])
    return f, g


def l96_state(K=8, seed=0):
    spec = lorenz96_spec(K)
    return spec, spinup_initial(spec, 200, np.random.default_rng(seed))


def direct_fourdvar_cost(s0, obs, s_b, B_inv, R_inv, spec, ospec):
    """Cost from an ordinary forward run, summed with an explicit loop."""
    traj = propagate(spec, s0, obs.shape[0])
    J = (s0 - s_b) @ B_inv @ (s0 - s_b)
    for t in range(obs.shape[0]):
        e = obs[t] - observation_operator(traj[t], ospec)
        J += e @ R_inv @ e
    return J


class TestLBFGS:
    def test_sphere(self):
        x, tr = lbfgs(lambda x: (x @ x, 2 * x), np.array([3.0, -4.0, 1.0]), tol=1e-10)
        assert np.linalg.norm(x) < 1e-8 and tr.iterations <= 3

    def test_rosenbrock(self):
        x, tr = lbfgs(rosenbrock, np.array([-1.2, 1.0]), tol=1e-9, max_iter=200, ftol=0)
        assert np.max(np.abs(x - 1)) < 1e-6 and tr.status == "converged"

    @given(st.integers(0, 10_000))
    def test_random_quadratic(self, seed):
        r = np.random.default_rng(seed)
        A = r.normal(size=(6, 6))
        A = A @ A.T + np.eye(6)
        b = r.normal(size=6)
        x, _ = lbfgs(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(6), tol=1e-10,
                     max_iter=500, ftol=0)
        assert np.allclose(x, np.linalg.solve(A, b), atol=1e-7)

    def test_objective_non_increasing(self):
        _, tr = lbfgs(rosenbrock, np.array([-1.2, 1.0]), max_iter=100)
        assert np.all(np.diff(tr.objective) <= 0)

    def test_relative_tolerance_stops_early(self):
        _, full = lbfgs(rosenbrock, np.array([-1.2, 1.0]), tol=1e-10, max_iter=500, ftol=0)
        _, loose = lbfgs(rosenbrock, np.array([-1.2, 1.0]), tol=1e-10, max_iter=500, ftol=0,
                         rtol=1e-1)
        assert loose.iterations < full.iterations

    def test_nonfinite_start(self):
        with pytest.raises(NonFiniteError):
            lbfgs(lambda x: (np.nan, x), np.zeros(2))

    def test_wolfe_conditions(self):
        x = np.array([-1.2, 1.0])
        f0, g0 = rosenbrock(x)
        d = -g0 / np.linalg.norm(g0)

        def phi(a):
            f, g = rosenbrock(x + a * d)
            return f, g @ d, None

        a, f, slope, _, ok = strong_wolfe(phi, f0, g0 @ d)
        assert ok and f <= f0 + 1e-4 * a * (g0 @ d) and abs(slope) <= 0.9 * abs(g0 @ d)


class TestThreeDVar:
    def test_linear_identity_average(self, rng):
        ospec = ObservationSpec(tuple(range(4)), 0.0, 0, operator="linear")
        cfg = VarConfig(np.eye(4), np.eye(4), tol=1e-12, rtol=0)
        sb, o = rng.normal(size=4), rng.normal(size=4)
        s, _ = threedvar(o, sb, cfg, ospec)
        assert np.allclose(s, (sb + o) / 2, atol=1e-9)

    def test_unobserved_components_keep_background(self, rng):
        ospec = ObservationSpec((0, 2), 0.0, 0, operator="linear")
        cfg = VarConfig(np.eye(4), np.eye(2), tol=1e-12, rtol=0)
        sb, o = rng.normal(size=4), rng.normal(size=2)
        s, _ = threedvar(o, sb, cfg, ospec)
        assert np.allclose(s[[1, 3]], sb[[1, 3]], atol=1e-9)

    def test_gradient_fd(self, rng):
        ospec = ObservationSpec(every_kth(8, 2), 0.1, 0)
        B_inv, R_inv = np.diag(rng.uniform(0.5, 2, 8)), np.diag(rng.uniform(0.5, 2, 4))
        s, sb, o = 3 * rng.normal(size=8), 3 * rng.normal(size=8), rng.normal(size=4)
        _, g = threedvar_cost_grad(s, o, sb, B_inv, R_inv, ospec)
        h = 1e-6
        for i in range(8):
            e = np.zeros(8)
            e[i] = h
            fd = (threedvar_cost_grad(s + e, o, sb, B_inv, R_inv, ospec)[0]
                  - threedvar_cost_grad(s - e, o, sb, B_inv, R_inv, ospec)[0]) / (2 * h)
            assert abs(fd - g[i]) <= 1e-5 * max(1.0, abs(g[i]))

    def test_arctan_inversion_with_weak_background(self, rng):
        ospec = ObservationSpec(tuple(range(3)), 0.0, 0)
        truth = rng.uniform(-5, 5, size=3)
        cfg = VarConfig(1e8 * np.eye(3), np.eye(3), tol=1e-12, rtol=0, max_iter=500)
        s, _ = threedvar(observation_operator(truth, ospec), np.zeros(3), cfg, ospec)
        assert np.allclose(s, truth, atol=1e-4)

    def test_window_modes(self):
        spec, s0 = l96_state()
        ospec = ObservationSpec(tuple(range(8)), 0.0, 0, operator="linear")
        cfg = VarConfig(np.eye(8), 1e-4 * np.eye(8), tol=1e-10, rtol=0)
        truth = propagate(spec, s0, 4)
        traj, _ = threedvar_window(truth, s0 + 0.3, cfg, spec, ospec, mode="propagate")
        assert traj.shape == (4, 8) and np.allclose(traj[0], s0, atol=1e-3)
        assert np.array_equal(traj, propagate(spec, traj[0], 4))
        ind, _ = threedvar_window(truth, s0, cfg, spec, ospec, mode="independent")
        assert np.allclose(ind, truth, atol=1e-2)
        with pytest.raises(InvalidSpecError):
            threedvar_window(truth, s0, cfg, spec, ospec, mode="other")


class TestFourDVar:
    def setup_problem(self, rng, T=3, mask=every_kth(8, 2)):
        spec, s0 = l96_state()
        ospec = ObservationSpec(mask, 0.1, 0)
        truth = propagate(spec, s0, T + 1)
        obs = observation_operator(truth, ospec) + 0.1 * rng.normal(size=(T + 1, len(mask)))
        cfg = VarConfig(np.eye(8), 0.01 * np.eye(len(mask)))
        return spec, ospec, s0, obs, cfg

    def test_vjp_matches_jacobian(self, rng):
        x, v = rng.normal(size=8), rng.normal(size=8)
        h = 1e-6
        J = np.column_stack([(lorenz96_rhs(x + h * e, 10.0) - lorenz96_rhs(x - h * e, 10.0))
                             / (2 * h) for e in np.eye(8)])
        assert np.allclose(lorenz96_vjp(x, v), J.T @ v, atol=1e-8)

    def test_adjoint_vs_fd(self, rng):
        spec, ospec, s0, obs, cfg = self.setup_problem(rng)
        sb = s0 + 0.5 * rng.normal(size=8)
        x = s0 + 0.2 * rng.normal(size=8)
        J, g = fourdvar_cost_grad(x, obs, sb, cfg, spec, ospec, gradient="adjoint")
        assert np.isclose(J, direct_fourdvar_cost(x, obs, sb, cfg.B_inv, cfg.R_inv, spec, ospec),
                          rtol=1e-12)
        h = 1e-5
        for _ in range(10):
            v = rng.normal(size=8)
            v /= np.linalg.norm(v)
            args = (obs, sb, cfg.B_inv, cfg.R_inv, spec, ospec)
            fd = (direct_fourdvar_cost(x + h * v, *args)
                  - direct_fourdvar_cost(x - h * v, *args)) / (2 * h)
            assert abs(fd - g @ v) <= 1e-4 * max(1.0, abs(fd))

    def test_fd_mode_matches_adjoint(self, rng):
        spec, ospec, s0, obs, cfg = self.setup_problem(rng)
        _, ga = fourdvar_cost_grad(s0, obs, s0 + 0.1, cfg, spec, ospec, gradient="adjoint")
        _, gf = fourdvar_cost_grad(s0, obs, s0 + 0.1, cfg, spec, ospec, gradient="fd")
        assert np.allclose(ga, gf, rtol=1e-4, atol=1e-4)

    def test_single_time_equals_threedvar(self, rng):
        spec, ospec, s0, obs, cfg = self.setup_problem(rng, T=0)
        sb = s0 + 0.3
        x = s0 - 0.2
        J4, g4 = fourdvar_cost_grad(x, obs, sb, cfg, spec, ospec)
        J3, g3 = threedvar_cost_grad(x, obs[0], sb, cfg.B_inv, cfg.R_inv, ospec)
        assert np.isclose(J4, J3) and np.allclose(g4, g3)

    def test_twin_experiment_recovers_truth(self):
        spec, s0 = l96_state()
        ospec = ObservationSpec(tuple(range(8)), 0.0, 0)
        obs = observation_operator(propagate(spec, s0, 6), ospec)
        cfg = VarConfig(1e6 * np.eye(8), 0.01 * np.eye(8), tol=1e-10, rtol=0, max_iter=500)
        traj, tr = fourdvar(obs, s0 + 0.3, cfg, spec, ospec)
        assert np.max(np.abs(traj[0] - s0)) < 1e-3
        assert np.all(np.diff(tr.objective) <= 0)

    def test_truth_start_is_stationary(self):
        spec, s0 = l96_state()
        ospec = ObservationSpec(every_kth(8, 2), 0.0, 0)
        obs = observation_operator(propagate(spec, s0, 6), ospec)
        cfg = VarConfig(np.eye(8), 0.01 * np.eye(4), tol=1e-10, rtol=0)
        traj, _ = fourdvar(obs, s0, cfg, spec, ospec, x0=s0)
        assert np.max(np.abs(traj[0] - s0)) < 1e-3

    def test_trajectory_is_model_rollout(self, rng):
        spec, ospec, s0, obs, cfg = self.setup_problem(rng)
        traj, tr = fourdvar(obs, s0 + 0.5, cfg, spec, ospec)
        assert traj.shape == obs.shape[:1] + (8,)
        assert np.array_equal(traj, propagate(spec, traj[0], obs.shape[0]))
        assert tr.iterations >= 1 and np.all(np.diff(tr.objective) <= 0)

    def test_preconditioned_agrees(self, rng):
        spec, ospec, s0, obs, cfg = self.setup_problem(rng)
        B = default_background_covariance(propagate(spec, s0, 200))
        a = VarConfig(B, cfg.R, tol=1e-8, rtol=0, max_iter=500)
        b = VarConfig(B, cfg.R, tol=1e-8, rtol=0, max_iter=500, precondition=True)
        ta, _ = fourdvar(obs, s0 + 0.3, a, spec, ospec)
        tb, _ = fourdvar(obs, s0 + 0.3, b, spec, ospec)
        assert np.allclose(ta[0], tb[0], atol=1e-4)


class TestConfig:
    def test_rejects_bad_inputs(self):
        with pytest.raises(InvalidSpecError):
            VarConfig(np.eye(2), np.eye(2), memory=0)
        with pytest.raises(InvalidSpecError):
            VarConfig(np.eye(2), np.eye(2), gradient="exact")
        with pytest.raises(InvalidSpecError):
            VarConfig(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2))
        with pytest.raises(InvalidSpecError):
            VarConfig(-np.eye(2), np.eye(2))

    def test_inverses(self, rng):
        A = rng.normal(size=(3, 3))
        B = A @ A.T + np.eye(3)
        cfg = VarConfig(B, 2 * np.eye(3))
        assert np.allclose(cfg.B_inv @ B, np.eye(3)) and np.allclose(cfg.R_inv, 0.5 * np.eye(3))

    def test_background_covariance(self, rng):
        S = rng.normal(size=(500, 3)) * [1, 2, 3]
        B = default_background_covariance(S, shrinkage=0.25)
        C = np.cov(S, rowvar=False)
        assert np.allclose(np.diag(B), np.diag(C))
        assert np.allclose(B[0, 1], 0.75 * C[0, 1])
        np.linalg.cholesky(B)
