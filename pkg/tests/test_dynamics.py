import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tensorvar.dynamics import (DIVERGENCE_THRESHOLD, RK_TABLEAUS, SystemSpec, Trajectory,
                                etdrk4_coefficients, generate_trajectories, integrate,
                                integrate_ks, integrate_lorenz96, ks_spec, lorenz96_rhs,
                                lorenz96_spec, lyapunov_time, propagate, random_initial,
                                rk4_step, rk_step, spinup_initial)
from tensorvar.errors import DivergenceError, InvalidSpecError


def rhs_loop(s, F):
    """Index-by-index evaluation with explicit modular arithmetic."""
    K = len(s)
    return np.array([-s[(k - 1) % K] * (s[(k - 2) % K] - s[(k + 1) % K]) - s[k] + F
                     for k in range(K)])


class TestLorenz96Rhs:
    def test_zero_state_zero_forcing(self):
        assert np.array_equal(lorenz96_rhs(np.zeros(6), 0.0), np.zeros(6))

    def test_constant_forcing_state_is_fixed_point(self):
        assert np.allclose(lorenz96_rhs(np.full(40, 10.0), 10.0), 0.0, atol=0)

    def test_k5_against_hand_values(self):
        # hand evaluation of the formula at (1, 2, 3, 4, 5), F = 10
        out = lorenz96_rhs(np.arange(1.0, 6.0), 10.0)
        assert np.allclose(out, [-1.0, 6.0, 13.0, 15.0, -3.0], atol=1e-14)

    @given(st.integers(4, 30), st.floats(-20, 20), st.integers(0, 2 ** 31))
    def test_matches_loop_oracle(self, K, F, seed):
        s = np.random.default_rng(seed).normal(0, 5, K)
        assert np.allclose(lorenz96_rhs(s, F), rhs_loop(s, F), rtol=1e-13, atol=1e-12)

    def test_batched_rows(self, rng):
        S = rng.normal(size=(3, 2, 9))
        out = lorenz96_rhs(S, 8.0)
        for idx in np.ndindex(3, 2):
            assert np.allclose(out[idx], rhs_loop(S[idx], 8.0))

    def test_small_dimension_rejected(self):
        with pytest.raises(InvalidSpecError):
            lorenz96_rhs(np.zeros(3), 1.0)
        with pytest.raises(InvalidSpecError):
            SystemSpec("lorenz96", 3)


class TestSpec:
    def test_dt_multiple_enforced(self):
        with pytest.raises(InvalidSpecError):
            SystemSpec("lorenz96", 8, dt_integrate=0.03, dt_sample=0.1)

    def test_ks_power_of_two(self):
        with pytest.raises(InvalidSpecError):
            SystemSpec("ks", 100)

    def test_unknown_kind(self):
        with pytest.raises(InvalidSpecError):
            SystemSpec("lorenz63", 3)

    def test_presets(self):
        s = lorenz96_spec()
        assert (s.dt_integrate, s.dt_sample, s.substeps) == (0.01, 0.1, 10)
        k = ks_spec()
        assert math.isclose(k.domain_length, 32 * math.pi)
        assert (k.dt_integrate, k.dt_sample) == (0.001, 0.01)


class TestLorenz96Integration:
    def test_single_sample_is_initial(self, rng):
        x0 = rng.normal(size=40)
        tr = integrate_lorenz96(lorenz96_spec(), x0, 1)
        assert np.array_equal(tr.states[0], x0)

    def test_fixed_point_preserved(self):
        x0 = np.full(40, 10.0)
        tr = integrate_lorenz96(lorenz96_spec(), x0, 101)
        assert np.max(np.abs(tr.states - 10.0)) < 1e-10

    def test_step_halving_default_integrator(self, rng):
        spec = lorenz96_spec()
        x0 = spinup_initial(spec, 200, rng)
        a = propagate(spec, x0, 11)[-1]
        b = propagate(spec, x0, 11, dt_integrate=0.005)[-1]
        assert np.max(np.abs(a - b)) < 1e-6

    @pytest.mark.parametrize("method,order", [("rk4", 4), ("rk8", 8)])
    def test_observed_order(self, method, order, rng):
        spec = lorenz96_spec().replace(method=method)
        x0 = spinup_initial(lorenz96_spec(), 200, rng)
        dts = [0.1, 0.05, 0.025, 0.0125] if method == "rk4" else [0.1, 0.05, 0.025]
        ref = propagate(spec, x0, 3, dt_integrate=dts[-1] / 4)[-1]
        errs = [np.max(np.abs(propagate(spec, x0, 3, dt_integrate=h)[-1] - ref)) for h in dts]
        ratios = [e0 / e1 for e0, e1 in zip(errs[:-1], errs[1:])]
        # order >= 3 observed means each halving shrinks the error at least 8-fold
        assert min(ratios) >= 8.0
        assert max(ratios) > 2 ** (order - 1)

    def test_rk_step_matches_classical_rk4(self, rng):
        x = rng.normal(size=12)
        assert np.allclose(rk_step(x, 8.0, 0.01, RK_TABLEAUS["rk4"]), rk4_step(x, 8.0, 0.01),
                           rtol=1e-14, atol=1e-14)

    @pytest.mark.parametrize("name", ["rk4", "rk8"])
    def test_tableau_quadrature_conditions(self, name):
        # sum_i b_i c_i^q = 1/(q+1) up to the method order
        tab = RK_TABLEAUS[name]
        c = tab.a.sum(axis=1)
        for q in range(tab.order):
            assert math.isclose(tab.b @ c ** q, 1.0 / (q + 1), rel_tol=1e-12)

    def test_long_run_bounded(self, rng):
        spec = lorenz96_spec()
        tr = integrate(spec, spinup_initial(spec, 500, rng), 1000)
        assert np.max(np.abs(tr.states)) < 20
        means = tr.states.mean(axis=0)
        assert means.max() - means.min() < 2.0 and 1.0 < means.mean() < 4.0

    def test_divergence_reports_step(self):
        spec = lorenz96_spec().replace(dt_integrate=0.1, dt_sample=0.1)
        x0 = np.full(40, 10.0)
        x0[0] = 1e5
        with pytest.raises(DivergenceError) as exc:
            propagate(spec, x0, 50)
        assert exc.value.step >= 1


class TestKS:
    def test_zero_invariant(self):
        tr = integrate_ks(ks_spec(64), np.zeros(64), 5)
        assert np.array_equal(tr.states, np.zeros((5, 64)))

    @pytest.mark.parametrize("n_s", [64, 128])
    def test_linear_modes_closed_form(self, n_s, rng):
        spec = ks_spec(n_s)
        u0 = random_initial(spec, rng)
        n = 21
        out = integrate_ks(spec, u0, n, nonlinear=False).states
        k = 2 * np.pi / spec.domain_length * np.arange(n_s // 2 + 1)
        t = (n - 1) * spec.dt_sample
        expected_hat = np.fft.rfft(u0) * np.exp((k ** 2 - k ** 4) * t)
        got_hat = np.fft.rfft(out[-1])
        keep = np.abs(expected_hat) > 1e-12 * np.abs(expected_hat).max()
        rel = np.abs(got_hat[keep] - expected_hat[keep]) / np.abs(expected_hat[keep])
        assert rel.max() < 1e-8

    def test_step_refinement(self, rng):
        spec = ks_spec(64)
        u0 = random_initial(spec, rng)
        a = propagate(spec, u0, 51)[-1]
        b = propagate(spec, u0, 51, dt_integrate=spec.dt_integrate / 10)[-1]
        assert np.max(np.abs(a - b)) < 1e-4

    def test_etdrk4_order(self, rng):
        spec = ks_spec(64).replace(dt_sample=0.4)
        u0 = random_initial(spec, rng)
        dts = [0.1, 0.05, 0.025]
        ref = propagate(spec, u0, 2, dt_integrate=0.025 / 8)[-1]
        errs = [np.max(np.abs(propagate(spec, u0, 2, dt_integrate=h)[-1] - ref)) for h in dts]
        assert errs[0] / errs[1] >= 8 and errs[1] / errs[2] >= 8

    def test_contour_coefficients_match_closed_form_away_from_zero(self):
        c = etdrk4_coefficients(32, 32 * math.pi, 0.25)
        z = 0.25 * c.linear
        far = np.abs(z) > 0.5
        with np.errstate(invalid="ignore", divide="ignore"):
            closed_q = 0.25 * (np.exp(z / 2) - 1) / z
        assert np.allclose(c.q[far], closed_q[far], rtol=1e-10)


class TestTrajectories:
    def test_spinup_zero_burn_is_raw_draw(self):
        spec = lorenz96_spec()
        a = spinup_initial(spec, 0, np.random.default_rng(3))
        b = random_initial(spec, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_spinup_bounded(self):
        x = spinup_initial(lorenz96_spec(), 1000, np.random.default_rng(1))
        assert np.max(np.abs(x)) < 20

    def test_different_seeds_differ(self):
        spec = lorenz96_spec()
        a = spinup_initial(spec, 10, np.random.default_rng(1))
        b = spinup_initial(spec, 10, np.random.default_rng(2))
        assert not np.allclose(a, b)

    def test_reproducible(self):
        spec = lorenz96_spec(n_s=8)
        a = generate_trajectories(spec, 3, 20, 10, seed=5)
        b = generate_trajectories(spec, 3, 20, 10, seed=5)
        for x, y in zip(a, b):
            assert x.states.tobytes() == y.states.tobytes()

    def test_trajectory_rejects_nonfinite(self):
        with pytest.raises(InvalidSpecError):
            Trajectory(np.array([[1.0, np.nan]]), 0.1)

    def test_trajectory_immutable(self):
        tr = Trajectory(np.zeros((2, 4)), 0.1)
        with pytest.raises(ValueError):
            tr.states[0, 0] = 1.0

    def test_divergence_threshold_constant(self):
        assert DIVERGENCE_THRESHOLD == 1e6


def test_lyapunov_time_lorenz96():
    spec = lorenz96_spec(40)
    x0 = spinup_initial(spec, 500, np.random.default_rng(3))
    # leading exponent of the F = 10 system is about 1.7 per time unit
    assert 0.4 < lyapunov_time(spec, x0, 400) < 0.9


def test_lyapunov_time_stable_fixed_point():
    spec = ks_spec(32, domain_length=2 * np.pi)  # all modes decay on a short domain
    assert lyapunov_time(spec, np.zeros(32), 20) == np.inf
