import numpy as np
import pytest
from hypothesis import given, strategies as st

from tensorvar.cme import (FeatureSpaceModel, KernelDims, NormalEquations, dual_cme_predict,
                           estimate_error_covariances, fit_cme_dynamics, fit_cme_inverse_obs,
                           fit_operators, fit_preimage, holdout_split,
                           inverse_obs_normal_equations, residual_covariance, ridge_operator,
                           select_ridge, spectral_radius, tensor_features,
                           trace_normalized_lambda, train_kernel_model)
from tensorvar.errors import (InsufficientDataError, InvalidSpecError, MemoryBudgetError,
                              NonFiniteError)
from tensorvar.harness import nrmse_component

from conftest import rel_err


def lstsq_ridge(X, Y, lam):
    """Dense least-squares oracle: stack sqrt(lam n) I under the design."""
    n, d = X.shape
    A = np.vstack([X, np.sqrt(lam * n) * np.eye(d)])
    B = np.vstack([Y, np.zeros((d, Y.shape[1]))])
    return np.linalg.lstsq(A, B, rcond=None)[0].T


class TestRidge:
    def test_scalar(self):
        assert np.allclose(fit_cme_dynamics([[1.0]], [[2.0]], 1.0), [[1.0]])

    def test_planted_operator(self, rng):
        d = 6
        A = rng.normal(size=(d, d))
        Z = rng.normal(size=(d + 5, d))
        C = fit_cme_dynamics(Z, Z @ A.T, 1e-10)
        assert np.linalg.norm(C - A) < 1e-6

    @given(st.integers(0, 10_000), st.floats(1e-6, 1.0))
    def test_matches_lstsq_oracle(self, seed, lam):
        r = np.random.default_rng(seed)
        X, Y = r.normal(size=(30, 5)), r.normal(size=(30, 3))
        assert rel_err(ridge_operator(X, Y, lam), lstsq_ridge(X, Y, lam)) < 1e-10

    @given(st.integers(0, 10_000), st.floats(1e-8, 10.0))
    def test_normal_equations_hold(self, seed, lam):
        r = np.random.default_rng(seed)
        X, Y = r.normal(size=(40, 7)), r.normal(size=(40, 4))
        C = ridge_operator(X, Y, lam)
        ne = NormalEquations.empty(7, 4)
        ne.add(X, Y)
        assert ne.residual(C, lam) < 1e-8

    def test_streamed_equals_batch(self, rng):
        X, Y = rng.normal(size=(50, 4)), rng.normal(size=(50, 2))
        ne = NormalEquations.empty(4, 2)
        for i in range(0, 50, 7):
            ne.add(X[i:i + 7], Y[i:i + 7])
        assert np.allclose(ne.solve(0.1), ridge_operator(X, Y, 0.1), rtol=1e-12)
        C = ne.solve(0.1)
        assert np.isclose(ne.squared_error(C), np.sum((Y - X @ C.T) ** 2), rtol=1e-10)

    def test_bad_lambda(self, rng):
        with pytest.raises(InvalidSpecError):
            ridge_operator(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), 0.0)

    def test_row_mismatch(self):
        with pytest.raises(InvalidSpecError):
            ridge_operator(np.zeros((3, 2)), np.zeros((4, 2)), 1.0)

    def test_residual_monotone_in_lambda(self, rng):
        Z = rng.normal(size=(60, 5))
        Zn = Z @ rng.normal(size=(5, 5)) + 0.1 * rng.normal(size=(60, 5))
        res = [np.linalg.norm(Zn - Z @ fit_cme_dynamics(Z, Zn, lam).T) for lam in (1e-4, 1e-2, 1.0)]
        assert res[0] <= res[1] <= res[2]

    def test_dual_equals_primal(self, rng):
        X, Y, Xq = rng.normal(size=(8, 3)), rng.normal(size=(8, 2)), rng.normal(size=(4, 3))
        primal = Xq @ ridge_operator(X, Y, 0.05).T
        assert np.allclose(dual_cme_predict(X, Y, Xq, 0.05), primal, atol=1e-8)

    def test_trace_normalised_lambda_scales(self, rng):
        X = rng.normal(size=(10, 3))
        assert np.isclose(trace_normalized_lambda(3 * X, 1.0), 9 * trace_normalized_lambda(X, 1.0))


class TestInverseObservation:
    def test_kron_layout_matches_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 5))
        W = tensor_features(a, b)
        for n in range(3):
            for i in range(4):
                for j in range(5):
                    assert W[n, i * 5 + j] == a[n, i] * b[n, j]

    def test_constant_history_reduces_to_plain_ridge(self, rng):
        Zs, Zo = rng.normal(size=(40, 3)), rng.normal(size=(40, 4))
        C = fit_cme_inverse_obs(Zs, Zo, np.ones((40, 1)), 1e-3)
        assert np.allclose(C, ridge_operator(Zo, Zs, 1e-3), rtol=1e-12)

    def test_planted_bilinear(self, rng):
        d_o, d_h, d_s = 3, 4, 5
        M = rng.normal(size=(d_s, d_o * d_h))
        Zo, Zh = rng.normal(size=(80, d_o)), rng.normal(size=(80, d_h))
        Zs = tensor_features(Zo, Zh) @ M.T
        assert np.linalg.norm(fit_cme_inverse_obs(Zs, Zo, Zh, 1e-10) - M) < 1e-6

    def test_normal_equations_hold(self, rng):
        Zs, Zo, Zh = rng.normal(size=(50, 3)), rng.normal(size=(50, 4)), rng.normal(size=(50, 3))
        ne = inverse_obs_normal_equations(Zs, Zo, Zh)
        C = ne.solve(1e-3)
        assert ne.residual(C, 1e-3) < 1e-8

    def test_budget(self, rng):
        with pytest.raises(MemoryBudgetError):
            inverse_obs_normal_equations(np.zeros((5, 2)), np.zeros((5, 64)), np.zeros((5, 64)),
                                         budget=1024)

    def test_split_partitions(self, rng):
        Zs, Zo, Zh = rng.normal(size=(30, 2)), rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
        mask = holdout_split(np.repeat(np.arange(5), 6), 0.2, seed=1)
        a, b = inverse_obs_normal_equations(Zs, Zo, Zh, split=mask)
        full = inverse_obs_normal_equations(Zs, Zo, Zh)
        assert a.n + b.n == 30 and b.n == 6
        assert np.allclose(a.gram + b.gram, full.gram)

    def test_holdout_keeps_whole_groups(self):
        groups = np.repeat(np.arange(10), 4)
        mask = holdout_split(groups, 0.3, seed=0)
        for g in range(10):
            assert len(set(mask[groups == g])) == 1
        assert mask.sum() == 12
        with pytest.raises(InsufficientDataError):
            holdout_split(np.zeros(5))

    def test_select_ridge_prefers_regularisation_under_noise(self, rng):
        X = rng.normal(size=(40, 30))
        Y = X[:, :1] + rng.normal(size=(40, 1))
        tr, val = NormalEquations.empty(30, 1), NormalEquations.empty(30, 1)
        tr.add(X[:20], Y[:20])
        val.add(X[20:], Y[20:])
        best, scores = select_ridge(tr, val, (1e-8, 1e-1, 1.0))
        assert best > 1e-8 and set(scores) == {1e-8, 1e-1, 1.0}


class TestPreimage:
    def test_identity_features(self, rng):
        S = rng.normal(size=(50, 4))
        dec = fit_preimage(S, S, 1e-12)
        assert np.allclose(dec.matrix, np.eye(4), atol=1e-8)

    def test_planted_decoder(self, rng):
        P, b = rng.normal(size=(3, 6)), rng.normal(size=3)
        Z = rng.normal(size=(40, 6))
        dec = fit_preimage(Z @ P.T + b, Z, 1e-12)
        assert np.linalg.norm(dec.matrix - P) < 1e-6 and np.linalg.norm(dec.offset - b) < 1e-6


class TestCovariances:
    def test_zero_residuals(self):
        Q, eps = residual_covariance(np.zeros((5, 3)))
        assert np.array_equal(Q, eps * np.eye(3)) and eps > 0

    def test_two_vectors(self):
        R, eps = residual_covariance(np.eye(2))
        assert np.allclose(R, 0.5 * np.eye(2) + eps * np.eye(2), rtol=0, atol=1e-15)
        assert np.isclose(eps, 1e-8 * 0.5)

    def test_two_pass_oracle(self, rng):
        r = rng.normal(2.0, 1.5, size=(100, 4))
        B, eps = residual_covariance(r, center=True)
        mean = sum(r) / len(r)
        two_pass = sum(np.outer(x - mean, x - mean) for x in r) / len(r)
        assert np.allclose(B - eps * np.eye(4), two_pass, atol=1e-10)

    def test_nonfinite_named(self):
        r = np.zeros((4, 2))
        r[2, 1] = np.nan
        with pytest.raises(NonFiniteError) as exc:
            residual_covariance(r)
        assert exc.value.index == 2

    @given(st.integers(0, 10_000), st.integers(1, 40))
    def test_spd_on_random_residuals(self, seed, n):
        r = np.random.default_rng(seed)
        d = 6
        C_dyn, C_inv = r.normal(size=(d, d)), r.normal(size=(d, 4))
        Zs, Zn, Zo = r.normal(size=(n, d)), r.normal(size=(n, d)), r.normal(size=(n, d))
        W = r.normal(size=(n, 4))
        for M in estimate_error_covariances(C_dyn, C_inv, Zs, Zn, Zo, W):
            assert np.array_equal(M, M.T)
            np.linalg.cholesky(M)

    def test_streamed_matches_array(self, rng):
        d, n = 4, 30
        C_dyn, C_inv = rng.normal(size=(d, d)), rng.normal(size=(d, 6))
        Zs, Zn, Zo, W = (rng.normal(size=s) for s in ((n, d), (n, d), (n, d), (n, 6)))

        def chunks():
            for i in range(0, n, 7):
                yield slice(i, min(i + 7, n)), W[i:i + 7]

        a = estimate_error_covariances(C_dyn, C_inv, Zs, Zn, Zo, W)
        b = estimate_error_covariances(C_dyn, C_inv, Zs, Zn, Zo, chunks)
        for x, y in zip(a, b):
            assert np.allclose(x, y, rtol=1e-12)


class TestSpectralRadius:
    def test_identity(self):
        assert np.isclose(spectral_radius(np.eye(5)).value, 1.0)

    def test_diagonal(self):
        assert np.isclose(spectral_radius(np.diag([0.5, -0.9])).value, 0.9)

    def test_random_against_eigvals(self, rng):
        C = rng.normal(size=(50, 50)) / 7
        r = spectral_radius(C)
        assert r.converged
        assert abs(r.value - np.abs(np.linalg.eigvals(C)).max()) < 1e-8

    def test_rotation_needs_fallback(self):
        th = 0.3
        R = np.kron(np.eye(3), [[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) * 0.8
        assert abs(spectral_radius(R).value - 0.8) < 1e-8

    def test_non_square(self):
        with pytest.raises(InvalidSpecError):
            spectral_radius(np.zeros((2, 3)))


class TestKernelModel:
    def test_invariants(self, l96_model):
        model, data, _ = l96_model
        assert isinstance(model, FeatureSpaceModel)
        model.validate()
        assert model.C_dyn.shape == (model.d_s, model.d_s)
        assert model.C_inv.shape == (model.d_s, model.obs_map.dim * model.hist_map.dim)

    def test_fitted_operators_satisfy_normal_equations(self, l96_model):
        model, data, _ = l96_model
        Z, Zn = model.phi_s(data.dyn_states), model.phi_s(data.dyn_next)
        ne = NormalEquations.empty(model.d_s, model.d_s)
        ne.add(Z, Zn)
        assert ne.residual(model.C_dyn, model.meta["lambda"]["dyn"]) < 1e-8
        ne_inv = inverse_obs_normal_equations(model.phi_s(data.obs_states),
                                              model.obs_map(data.obs_obs),
                                              model.hist_map(data.obs_hist))
        assert ne_inv.residual(model.C_inv, model.meta["lambda"]["inv"]) < 1e-8

    def test_held_out_prediction_sane(self, l96_model, l96_small):
        model, _, _ = l96_model
        S = l96_small[2][0].states
        Z, Zn = model.phi_s(S[:-1]), model.phi_s(S[1:])
        err = np.linalg.norm(Zn - Z @ model.C_dyn.T) / np.linalg.norm(Zn - Zn.mean(axis=0))
        assert err < 1.0

    def test_spectral_radius_near_unit(self, l96_model):
        assert spectral_radius(l96_model[0].C_dyn).value <= 1.05

    def test_preimage_reconstruction(self, l96_small):
        from tensorvar.observation import ObservationSpec, make_training_data
        _, train, test = l96_small
        data = make_training_data(train, ObservationSpec((0,), 0.1, 0))
        model = train_kernel_model(data, dims=KernelDims(60, 4, 1, 1500), seed=0,
                                   select_inverse_lambda=False)
        S = test[0].states
        rec = model.decode(model.phi_s(S))
        assert nrmse_component(rec, S, data.state_max, data.state_min) < 5.0

    def test_deterministic(self, l96_small):
        from tensorvar.observation import ObservationSpec, every_kth, make_training_data
        data = make_training_data(l96_small[1][:2], ObservationSpec(every_kth(40, 5), 0.1, 2))
        a = train_kernel_model(data, dims=KernelDims(10, 4, 4, 300), seed=3)
        b = train_kernel_model(data, dims=KernelDims(10, 4, 4, 300), seed=3)
        for name in ("C_dyn", "C_inv", "B", "R", "Q"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_fit_operators_selection_records_scores(self, rng):
        n = 60
        Zs, Zn = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        Zo, Zh = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        ops = fit_operators(Zs, Zn, Zs, Zo, Zh, 1e-6, select_inverse=True,
                            groups=np.repeat(np.arange(6), 10))
        assert "inv_scores" in ops.lambdas and ops.lambdas["inv"] > 0
        with pytest.raises(InvalidSpecError):
            fit_operators(Zs, Zn, Zs, Zo, Zh, select_inverse=True)
