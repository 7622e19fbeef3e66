"""Conditional-mean-embedding operators in finite feature coordinates.

Every operator here is a ridge regression between coordinate matrices whose
rows are samples.  With coordinates ``X`` (n x d_in) and targets ``Y``
(n x d_out) the operator is ``C = Y^T X (X^T X + lam n I)^{-1}`` so that
``y ~ C x``.  This is the primal form of the empirical CME under a linear
kernel on the coordinates; :func:`dual_cme_predict` gives the equivalent
Gram-matrix form for cross-checking.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import ArpackNoConvergence, eigs

from .errors import (InsufficientDataError, InvalidSpecError, MemoryBudgetError, NonFiniteError,
                     NotPositiveDefiniteError)
from .kernel import DEFAULT_LANDMARKS, KernelSpec, NystromBasis, fit_nystrom_pca, project, \
    resolve_lengthscale

log = logging.getLogger(__name__)

JITTER = 1e-8
JITTER_FLOOR = 1e-12
DEFAULT_LAMBDA = 1e-6
LAMBDA_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 3e-1, 1.0)
KRON_BUDGET_BYTES = 512 * 2 ** 20
_CHUNK = 8192


# ----------------------------------------------------------------------------
# ridge machinery


@dataclass
class NormalEquations:
    """Running ``X^T X`` and ``X^T Y`` so large designs can be streamed."""

    gram: np.ndarray
    cross: np.ndarray
    n: int = 0
    target_sq: float = 0.0

    @classmethod
    def empty(cls, d_in, d_out):
        return cls(np.zeros((d_in, d_in)), np.zeros((d_in, d_out)), 0)

    def add(self, X, Y):
        self.gram += X.T @ X
        self.cross += X.T @ Y
        self.n += X.shape[0]
        self.target_sq += float(np.sum(Y * Y))

    def mean_trace(self):
        """Mean squared coordinate, the scale used to make ``lam`` unit-free."""
        return max(float(np.trace(self.gram)) / (max(self.n, 1) * self.gram.shape[0]),
                   np.finfo(float).tiny)

    def squared_error(self, C):
        """``sum |y - C x|^2`` over the accumulated samples, without the data."""
        return float(self.target_sq - 2.0 * np.sum(C.T * self.cross)
                     + np.sum((C @ self.gram) * C))

    def solve(self, lam):
        if not lam > 0:
            raise InvalidSpecError("ridge parameter must be positive")
        if self.n < 1:
            raise InsufficientDataError("ridge regression needs at least one sample", required=1)
        A = self.gram + lam * self.n * np.eye(self.gram.shape[0])
        try:
            cf = sla.cho_factor(A)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("regularised normal matrix is not SPD") from exc
        return sla.cho_solve(cf, self.cross).T

    def residual(self, C, lam):
        """Relative residual of ``(X^T X + lam n I) C^T = X^T Y``."""
        A = self.gram + lam * self.n * np.eye(self.gram.shape[0])
        num = np.linalg.norm(A @ C.T - self.cross)
        return float(num / max(np.linalg.norm(self.cross), np.finfo(float).tiny))


def select_ridge(train: NormalEquations, val: NormalEquations, grid=LAMBDA_GRID):
    """Pick the unit-free ridge from ``grid`` by held-out squared error.

    Each candidate is scaled by the training design's mean squared
    coordinate.  Returns ``(best, scores)`` with scores per sample.
    """
    if val.n < 1:
        raise InsufficientDataError("validation set is empty", required=1)
    scale = train.mean_trace()
    scores = {lam: val.squared_error(train.solve(lam * scale)) / val.n for lam in grid}
    return min(scores, key=scores.get), scores


def holdout_split(groups, fraction=0.2, seed=0):
    """Boolean mask of validation rows, holding out whole groups (trajectories)."""
    groups = np.asarray(groups)
    ids = np.unique(groups)
    if ids.size < 2:
        raise InsufficientDataError("need at least two trajectories to hold one out", required=2)
    n_val = min(max(1, int(round(fraction * ids.size))), ids.size - 1)
    val_ids = np.random.default_rng(seed).choice(ids, n_val, replace=False)
    return np.isin(groups, val_ids)


def ridge_operator(X, Y, lam):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] != Y.shape[0]:
        raise InvalidSpecError(f"row count mismatch: {X.shape[0]} vs {Y.shape[0]}")
    ne = NormalEquations.empty(X.shape[1], Y.shape[1])
    ne.add(X, Y)
    return ne.solve(lam)


def trace_normalized_lambda(X, lam=DEFAULT_LAMBDA):
    """Scale ``lam`` by the mean squared coordinate so it is unit-free."""
    X = np.asarray(X, dtype=float)
    return lam * max(float(np.mean(X * X)), np.finfo(float).tiny)


def fit_cme_dynamics(Z_s, Z_next, lam):
    """Operator ``C`` with ``z_{t+1} ~ C z_t`` (d_s x d_s)."""
    return ridge_operator(Z_s, Z_next, lam)


def tensor_features(Z_o, Z_h):
    """Row-wise flattened outer products ``z_o (x) z_h`` (index ``i * d_h + j``)."""
    Z_o = np.atleast_2d(Z_o)
    Z_h = np.atleast_2d(Z_h)
    if Z_o.shape[0] != Z_h.shape[0]:
        raise InvalidSpecError("observation and history features must have the same rows")
    n = Z_o.shape[0]
    return np.einsum("ni,nj->nij", Z_o, Z_h).reshape(n, Z_o.shape[1] * Z_h.shape[1])


def _check_kron_budget(n_rows, d_o, d_h, budget):
    width = d_o * d_h
    # normal matrix plus one chunk of the design
    need = 8 * (width * width + min(n_rows, _CHUNK) * width)
    if need > budget:
        raise MemoryBudgetError(
            f"tensor feature width {d_o}x{d_h}={width} needs ~{need / 2**20:.0f} MiB "
            f"(budget {budget / 2**20:.0f} MiB); reduce observation/history feature dims")


def inverse_obs_normal_equations(Z_s, Z_o, Z_h, budget=KRON_BUDGET_BYTES, split=None):
    """Streamed normal equations of the tensor-feature regression.

    With a boolean ``split`` mask, returns ``(rest, masked)`` accumulated
    separately instead of a single system.
    """
    Z_s, Z_o, Z_h = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (Z_s, Z_o, Z_h))
    n = Z_s.shape[0]
    if Z_o.shape[0] != n or Z_h.shape[0] != n:
        raise InvalidSpecError("state, observation and history features must share rows")
    _check_kron_budget(n, Z_o.shape[1], Z_h.shape[1], budget)
    width = Z_o.shape[1] * Z_h.shape[1]
    parts = [NormalEquations.empty(width, Z_s.shape[1]) for _ in range(1 if split is None else 2)]
    for start in range(0, n, _CHUNK):
        sl = slice(start, start + _CHUNK)
        W = tensor_features(Z_o[sl], Z_h[sl])
        if split is None:
            parts[0].add(W, Z_s[sl])
        else:
            m = np.asarray(split[sl], dtype=bool)
            parts[0].add(W[~m], Z_s[sl][~m])
            parts[1].add(W[m], Z_s[sl][m])
    return parts[0] if split is None else tuple(parts)


def fit_cme_inverse_obs(Z_s, Z_o, Z_h, lam, budget=KRON_BUDGET_BYTES):
    """Operator ``C`` with ``z_s ~ C (z_o (x) z_h)`` (d_s x d_o*d_h)."""
    return inverse_obs_normal_equations(Z_s, Z_o, Z_h, budget).solve(lam)


@dataclass(frozen=True)
class LinearDecoder:
    """Preimage map ``s = matrix @ z + offset``."""

    matrix: np.ndarray
    offset: np.ndarray

    def __call__(self, Z):
        Z = np.asarray(Z, dtype=float)
        return Z @ self.matrix.T + self.offset


def fit_preimage(S, Z_s, lam, intercept=True) -> LinearDecoder:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    Z_s = np.atleast_2d(np.asarray(Z_s, dtype=float))
    if S.shape[0] != Z_s.shape[0]:
        raise InvalidSpecError("states and features must have the same rows")
    if intercept:
        s_mean, z_mean = S.mean(axis=0), Z_s.mean(axis=0)
        P = ridge_operator(Z_s - z_mean, S - s_mean, lam)
        return LinearDecoder(P, s_mean - P @ z_mean)
    P = ridge_operator(Z_s, S, lam)
    return LinearDecoder(P, np.zeros(S.shape[1]))


def dual_cme_predict(X_train, Y_train, X_query, lam):
    """Kernel-form prediction ``Y^T (K + lam n I)^{-1} k(X, x)`` with a linear kernel."""
    X_train = np.atleast_2d(X_train)
    n = X_train.shape[0]
    K = X_train @ X_train.T
    alpha = np.linalg.solve(K + lam * n * np.eye(n), np.atleast_2d(Y_train))
    return (np.atleast_2d(X_query) @ X_train.T) @ alpha


# ----------------------------------------------------------------------------
# error covariances


def residual_covariance(residuals, jitter=JITTER, center=False):
    """``mean(r r^T)`` (or the centred covariance) plus ``eps I``.

    ``eps = jitter * mean(diag)`` with an absolute floor so that all-zero
    residuals still give an SPD matrix.  Returns ``(cov, eps)``.
    """
    r = np.atleast_2d(np.asarray(residuals, dtype=float))
    if r.shape[0] == 0:
        raise InsufficientDataError("no residuals to estimate a covariance from", required=1)
    bad = ~np.all(np.isfinite(r), axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"non-finite residual at sample {i}", index=i)
    if center:
        r = r - r.mean(axis=0)
    cov = r.T @ r / r.shape[0]
    cov = 0.5 * (cov + cov.T)
    eps = max(jitter * float(np.mean(np.diag(cov))), JITTER_FLOOR)
    cov = cov + eps * np.eye(cov.shape[0])
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("covariance is not SPD after jitter") from exc
    return cov, eps


def estimate_error_covariances(C_dyn, C_inv, Z_s, Z_next, Z_obs_s, W, *, jitter=JITTER):
    """Feature-space ``B``, ``R`` and ``Q`` from training residuals.

    ``R`` and ``Q`` are second moments of the inverse-observation and
    dynamics residuals; ``B`` is the covariance of the state features about
    their mean.  ``W`` may be an array of tensor features or a callable
    yielding ``(rows, features)`` chunks so the design need not be held in
    memory.
    """
    Q, _ = residual_covariance(Z_next - Z_s @ C_dyn.T, jitter)
    if callable(W):
        acc = np.zeros((C_inv.shape[0], C_inv.shape[0]))
        n = 0
        for rows, w in W():
            r = Z_obs_s[rows] - w @ C_inv.T
            bad = ~np.all(np.isfinite(r), axis=1)
            if bad.any():
                i = int(np.flatnonzero(bad)[0]) + rows.start
                raise NonFiniteError(f"non-finite residual at sample {i}", index=i)
            acc += r.T @ r
            n += r.shape[0]
        R = 0.5 * (acc + acc.T) / n
        R = R + max(jitter * float(np.mean(np.diag(R))), JITTER_FLOOR) * np.eye(R.shape[0])
        np.linalg.cholesky(R)
    else:
        R, _ = residual_covariance(Z_obs_s - np.asarray(W) @ C_inv.T, jitter)
    B, _ = residual_covariance(Z_s, jitter, center=True)
    return B, R, Q


# ----------------------------------------------------------------------------
# stability diagnostic


@dataclass(frozen=True)
class SpectralRadius:
    value: float
    converged: bool
    method: str
    iterations: int = 0

    def __float__(self):
        return self.value


def spectral_radius(C, max_iter=5000, tol=1e-12, seed=0) -> SpectralRadius:
    """Largest eigenvalue modulus of a square operator.

    Power iteration is tried first; it only converges when the dominant
    eigenvalue is real and separated.  Otherwise the estimate falls back to
    implicitly restarted Arnoldi (ARPACK, with deflation of converged Ritz
    values).  If both fail the best power estimate is returned with
    ``converged=False``.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise InvalidSpecError("spectral radius needs a square matrix")
    n = C.shape[0]
    if n == 0:
        return SpectralRadius(0.0, True, "empty")
    if not np.any(C):
        return SpectralRadius(0.0, True, "zero")
    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)
    best = 0.0
    for it in range(1, max_iter + 1):
        y = C @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return SpectralRadius(0.0, True, "power", it)
        mu = float(x @ y)
        best = ny
        if np.linalg.norm(y - mu * x) <= tol * max(abs(mu), 1.0):
            return SpectralRadius(abs(mu), True, "power", it)
        x = y / ny
        if it >= 200 and it % 200 == 0 and n > 2:
            break  # slow or oscillating: hand over to Arnoldi
    if n <= 2:
        vals = np.roots([1.0, -np.trace(C), np.linalg.det(C)]) if n == 2 else np.diag(C)
        return SpectralRadius(float(np.max(np.abs(vals))), True, "closed-form", it)
    try:
        vals = eigs(C, k=1, which="LM", tol=tol, maxiter=max_iter, ncv=min(n, max(20, n // 2)),
                    v0=np.ones(n), return_eigenvectors=False)
        return SpectralRadius(float(np.abs(vals[0])), True, "arnoldi", it)
    except ArpackNoConvergence:
        return SpectralRadius(float(best), False, "power", it)


# ----------------------------------------------------------------------------
# feature maps and the fitted model


@dataclass(frozen=True)
class KernelFeatureMap:
    """Nystrom kernel-PCA coordinates, optionally prefixed with a constant 1."""

    basis: NystromBasis
    add_constant: bool = False

    @property
    def dim(self) -> int:
        return self.basis.dim + int(self.add_constant)

    def __call__(self, X):
        Z = project(self.basis, X)
        if self.add_constant:
            Z = np.hstack([np.ones((Z.shape[0], 1)), Z])
        return Z


@dataclass(frozen=True)
class ConstantFeatureMap:
    """Feature of an empty input (history length zero): the scalar 1."""

    input_dim: int = 0

    @property
    def dim(self) -> int:
        return 1

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        n = 1 if X.ndim < 2 else X.shape[0]
        return np.ones((n, 1))


@dataclass
class FeatureSpaceModel:
    """Everything needed to assimilate: feature maps, operators, covariances.

    ``decoder`` maps state features back to states (a :class:`LinearDecoder`
    for the kernel path, a learned inverse network for the deep path).
    """

    state_map: object
    obs_map: object
    hist_map: object
    decoder: object
    C_dyn: np.ndarray
    C_inv: np.ndarray
    B: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    lam: float
    background_state: np.ndarray
    path: str = "kernel"
    meta: dict = field(default_factory=dict)

    @property
    def d_s(self) -> int:
        return self.C_dyn.shape[0]

    @property
    def n_s(self) -> int:
        return len(self.background_state)

    def phi_s(self, S):
        return self.state_map(np.atleast_2d(S))

    def phi_oh(self, O, H):
        O = np.atleast_2d(O)
        H = np.asarray(H, dtype=float).reshape(O.shape[0], -1)
        return tensor_features(self.obs_map(O), self.hist_map(H))

    def decode(self, Z):
        return self.decoder(np.atleast_2d(Z))

    def validate(self):
        d = self.d_s
        for name in ("B", "R", "Q"):
            M = getattr(self, name)
            if M.shape != (d, d):
                raise InvalidSpecError(f"{name} has shape {M.shape}, expected {(d, d)}")
            if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
                raise NotPositiveDefiniteError(f"{name} is not symmetric")
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefiniteError(f"{name} is not positive definite") from exc
        if self.C_inv.shape[0] != d:
            raise InvalidSpecError("inverse-observation operator has wrong output dimension")
        for name in ("C_dyn", "C_inv"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteError(f"{name} contains non-finite entries")
        return self


@dataclass(frozen=True)
class KernelDims:
    d_s: int = 60
    d_o: int = 32
    d_h: int = 32
    n_landmark: int = DEFAULT_LANDMARKS


def _kernel_feature_map(X, d, kernel, n_landmark, rng, add_constant):
    kernel = resolve_lengthscale(X, kernel, rng=rng)
    n_l = min(n_landmark, X.shape[0])
    basis = fit_nystrom_pca(X, n_l, min(d, n_l), kernel, rng)
    return KernelFeatureMap(basis, add_constant)


def select_state_lengthscale(S, S_next, d_s, kernel: KernelSpec, lam, seed=0,
                             n_landmark=1000, holdout=0.2):
    """Pick the lengthscale multiplier from ``kernel.grid`` by held-out error.

    The score is the validation error of one feature-space prediction step
    decoded back to the state, which rewards features that are both
    linearly predictable and invertible.
    """
    rng = np.random.default_rng(seed)
    n = S.shape[0]
    perm = rng.permutation(n)
    n_val = max(1, int(holdout * n))
    val, tr = perm[:n_val], perm[n_val:]
    scores = {}
    for mult in kernel.grid:
        spec = KernelSpec(mult * kernel.lengthscale, "median" if kernel.selection != "fixed"
                          else "fixed", kernel.family, kernel.grid)
        fmap = _kernel_feature_map(S[tr], d_s, spec, n_landmark, np.random.default_rng(seed),
                                   False)
        Z, Zn = fmap(S[tr]), fmap(S_next[tr])
        C = fit_cme_dynamics(Z, Zn, trace_normalized_lambda(Z, lam))
        dec = fit_preimage(S[tr], Z, trace_normalized_lambda(Z, lam))
        pred = dec(fmap(S[val]) @ C.T)
        scores[mult] = float(np.sqrt(np.mean((pred - S_next[val]) ** 2)))
    best = min(scores, key=scores.get)
    return KernelSpec(best * kernel.lengthscale, "median" if kernel.selection != "fixed" else
                      "fixed", kernel.family, kernel.grid), scores


@dataclass
class FittedOperators:
    C_dyn: np.ndarray
    C_inv: np.ndarray
    B: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    lambdas: dict


def fit_operators(Z_s, Z_next, Z_obs_s, Z_o, Z_h, lam=DEFAULT_LAMBDA, *, select_inverse=False,
                  groups=None, grid=LAMBDA_GRID, seed=0) -> FittedOperators:
    """Fit both CME operators and the three error covariances.

    ``lam`` is unit-free (scaled by each design's mean squared coordinate).
    With ``select_inverse`` the inverse-observation ridge is chosen from
    ``grid`` on held-out trajectories given by ``groups`` (one id per row of
    ``Z_obs_s``), then refit on all rows.
    """
    lam_dyn = trace_normalized_lambda(Z_s, lam)
    C_dyn = fit_cme_dynamics(Z_s, Z_next, lam_dyn)
    lambdas = {"base": lam, "dyn": lam_dyn}
    if select_inverse:
        if groups is None:
            raise InvalidSpecError("ridge selection needs trajectory ids for a grouped split")
        split = holdout_split(groups, seed=seed)
        tr, val = inverse_obs_normal_equations(Z_obs_s, Z_o, Z_h, split=split)
        rel, scores = select_ridge(tr, val, grid)
        log.info("inverse-observation ridge scores: %s", scores)
        ne = NormalEquations(tr.gram + val.gram, tr.cross + val.cross, tr.n + val.n,
                             tr.target_sq + val.target_sq)
        lambdas["inv_scores"] = {repr(k): v for k, v in scores.items()}
    else:
        rel = lam
        ne = inverse_obs_normal_equations(Z_obs_s, Z_o, Z_h)
    lam_inv = rel * ne.mean_trace()
    C_inv = ne.solve(lam_inv)
    lambdas.update({"inv_relative": rel, "inv": lam_inv})

    def chunks():
        for start in range(0, Z_o.shape[0], _CHUNK):
            sl = slice(start, min(start + _CHUNK, Z_o.shape[0]))
            yield sl, tensor_features(Z_o[sl], Z_h[sl])

    B, R, Q = estimate_error_covariances(C_dyn, C_inv, Z_s, Z_next, Z_obs_s, chunks)
    return FittedOperators(C_dyn, C_inv, B, R, Q, lambdas)


def train_kernel_model(data, kernels=None, dims: KernelDims = KernelDims(), lam=DEFAULT_LAMBDA,
                       seed=0, max_obs_samples=None, add_constant=True,
                       select_inverse_lambda=True) -> FeatureSpaceModel:
    """Fit the kernel-feature model end to end.

    Steps: Nystrom kernel-PCA bases for states, observations and histories;
    coordinates of all training samples; the dynamics and inverse-observation
    operators; a ridge preimage decoder; and the ``B``, ``R``, ``Q``
    covariances.  ``kernels`` maps ``"state"``, ``"obs"``, ``"hist"`` to
    :class:`KernelSpec`; ``lam`` is trace-normalised per regression.  The
    inverse-observation ridge is chosen on held-out trajectories unless
    ``select_inverse_lambda`` is false.
    """
    t0 = time.perf_counter()
    kernels = dict(kernels or {})
    k_state = kernels.get("state", KernelSpec(1.0, "median"))
    k_obs = kernels.get("obs", KernelSpec(1.0, "median"))
    k_hist = kernels.get("hist", KernelSpec(1.0, "median"))
    ss = np.random.SeedSequence(seed).spawn(4)
    rng_s, rng_o, rng_h, rng_sub = (np.random.default_rng(s) for s in ss)

    if k_state.selection == "cv":
        k_state, cv_scores = select_state_lengthscale(
            data.dyn_states, data.dyn_next, dims.d_s, KernelSpec(1.0, "median", grid=k_state.grid),
            lam, seed=seed)
        log.info("state lengthscale CV scores: %s", cv_scores)
    S_all = np.concatenate([data.dyn_states, data.dyn_next[-1:]])
    state_map = _kernel_feature_map(S_all, dims.d_s, k_state, dims.n_landmark, rng_s, False)

    obs_idx = np.arange(data.obs_states.shape[0])
    if max_obs_samples is not None and obs_idx.size > max_obs_samples:
        obs_idx = np.sort(rng_sub.choice(obs_idx.size, max_obs_samples, replace=False))
    O, H, S_obs = data.obs_obs[obs_idx], data.obs_hist[obs_idx], data.obs_states[obs_idx]
    obs_map = _kernel_feature_map(O, dims.d_o, k_obs, dims.n_landmark, rng_o, add_constant)
    if H.shape[1] == 0:
        hist_map = ConstantFeatureMap(0)
    else:
        hist_map = _kernel_feature_map(H, dims.d_h, k_hist, dims.n_landmark, rng_h, add_constant)

    Z_s, Z_next = state_map(data.dyn_states), state_map(data.dyn_next)
    Z_obs_s = state_map(S_obs)
    Z_o, Z_h = obs_map(O), hist_map(H)
    select = select_inverse_lambda and np.unique(data.obs_traj).size >= 2
    ops = fit_operators(Z_s, Z_next, Z_obs_s, Z_o, Z_h, lam, select_inverse=select,
                        groups=data.obs_traj[obs_idx], seed=seed)

    lam_pre = trace_normalized_lambda(Z_s, lam)
    decoder = fit_preimage(data.dyn_states, Z_s, lam_pre)
    background = data.state_mean if data.state_mean is not None else S_all.mean(axis=0)
    meta = {
        "seed": seed,
        "dims": {"d_s": state_map.dim, "d_o": obs_map.dim, "d_h": hist_map.dim,
                 "n_landmark": dims.n_landmark},
        "kernels": {"state": state_map.basis.kernel.to_dict(),
                    "obs": obs_map.basis.kernel.to_dict(),
                    "hist": (hist_map.basis.kernel.to_dict() if hasattr(hist_map, "basis")
                             else None)},
        "lambda": {**ops.lambdas, "preimage": lam_pre},
        "history_length": data.spec.history_length if data.spec is not None else None,
        "n_dyn": int(Z_s.shape[0]), "n_obs": int(Z_o.shape[0]),
        "state_range": [data.state_min, data.state_max],
        "train_seconds": time.perf_counter() - t0,
    }
    model = FeatureSpaceModel(state_map, obs_map, hist_map, decoder, ops.C_dyn, ops.C_inv, ops.B,
                              ops.R, ops.Q, lam, np.asarray(background, dtype=float), "kernel",
                              meta)
    return model.validate()
