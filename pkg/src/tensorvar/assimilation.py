"""Feature-space weak-constraint 4D-Var solved as one SPD linear system.

The cost over a window ``z_0..z_T`` is

    |z_0 - zb|^2_{B^-1} + sum_t |z_{t+1} - C z_t|^2_{Q^-1} + sum_t |z_t - zhat_t|^2_{R^-1}

where ``zb`` is the background state feature and ``zhat_t`` the
pseudo-observation produced by the inverse-observation operator.  Its
normal equations are block tridiagonal; :func:`solve_block_tridiagonal`
factors them with a block Cholesky sweep.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .cme import FeatureSpaceModel
from .errors import InvalidSpecError, NonFiniteError, NotPositiveDefiniteError


@dataclass
class QuadraticSystem:
    """Block-tridiagonal normal equations ``A z = g``.

    ``diag[t]`` is block ``(t, t)``; ``off[t]`` is block ``(t, t+1)`` (the
    ``(t+1, t)`` block is its transpose).
    """

    diag: np.ndarray  # (T+1, d, d)
    off: np.ndarray  # (T, d, d)
    rhs: np.ndarray  # ((T+1) * d,)

    @property
    def n_blocks(self) -> int:
        return self.diag.shape[0]

    @property
    def block_size(self) -> int:
        return self.diag.shape[1]

    def dense(self):
        T1, d = self.n_blocks, self.block_size
        A = np.zeros((T1 * d, T1 * d))
        for t in range(T1):
            A[t * d:(t + 1) * d, t * d:(t + 1) * d] = self.diag[t]
        for t in range(T1 - 1):
            A[t * d:(t + 1) * d, (t + 1) * d:(t + 2) * d] = self.off[t]
            A[(t + 1) * d:(t + 2) * d, t * d:(t + 1) * d] = self.off[t].T
        return A

    def matvec(self, z):
        Z = np.asarray(z).reshape(self.n_blocks, self.block_size)
        out = np.einsum("tij,tj->ti", self.diag, Z)
        if self.n_blocks > 1:
            out[:-1] += np.einsum("tij,tj->ti", self.off, Z[1:])
            out[1:] += np.einsum("tji,tj->ti", self.off, Z[:-1])
        return out.ravel()


@dataclass
class AssimilationResult:
    features: np.ndarray
    states: np.ndarray
    objective: float
    residuals: dict
    wall_time: float
    forecast: np.ndarray | None = None
    forecast_features: np.ndarray | None = None
    pseudo_obs: np.ndarray | None = None
    iterations: int = 1
    meta: dict = field(default_factory=dict)


def _spd_inverse(M, name):
    try:
        cf = sla.cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"{name} covariance failed Cholesky; increase its jitter") from exc
    inv = sla.cho_solve(cf, np.eye(M.shape[0]))
    return 0.5 * (inv + inv.T)


@dataclass(frozen=True)
class Precisions:
    B: np.ndarray
    R: np.ndarray
    Q: np.ndarray

    @classmethod
    def from_model(cls, model: FeatureSpaceModel, diagonal=False):
        mats = [model.B, model.R, model.Q]
        if diagonal:
            mats = [np.diag(np.diag(M)) for M in mats]
        return cls(*(_spd_inverse(M, n) for M, n in zip(mats, "BRQ")))


def precompute_pseudo_observations(model: FeatureSpaceModel, window):
    W = model.phi_oh(window.observations, window.histories)
    zhat = W @ model.C_inv.T
    bad = ~np.all(np.isfinite(zhat), axis=1)
    if bad.any():
        t = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"non-finite pseudo-observation at timestep {t}", index=t)
    return zhat


def assemble_blocks(C, precisions: Precisions, pseudo_obs, z_b) -> QuadraticSystem:
    zhat = np.atleast_2d(np.asarray(pseudo_obs, dtype=float))
    T1, d = zhat.shape
    if C.shape != (d, d):
        raise InvalidSpecError(f"dynamics operator shape {C.shape} does not match d_s={d}")
    Bi, Ri, Qi = precisions.B, precisions.R, precisions.Q
    CtQi = C.T @ Qi
    CtQiC = CtQi @ C
    diag = np.empty((T1, d, d))
    for t in range(T1):
        D = Ri.copy()
        if t == 0:
            D += Bi
        if t > 0:
            D += Qi
        if t < T1 - 1:
            D += CtQiC
        diag[t] = 0.5 * (D + D.T)
    off = np.broadcast_to(-CtQi, (T1 - 1, d, d)).copy()
    g = zhat @ Ri.T
    g[0] += Bi @ np.asarray(z_b, dtype=float)
    return QuadraticSystem(diag, off, g.ravel())


def assemble(model: FeatureSpaceModel, pseudo_obs, s_b=None, *, diagonal_covariances=False,
             precisions: Precisions | None = None) -> QuadraticSystem:
    s_b = model.background_state if s_b is None else s_b
    z_b = model.phi_s(s_b)[0]
    precisions = precisions or Precisions.from_model(model, diagonal_covariances)
    return assemble_blocks(model.C_dyn, precisions, pseudo_obs, z_b)


def solve_block_tridiagonal(system: QuadraticSystem):
    """Block Cholesky ``A = L L^T`` with ``L`` block lower bidiagonal.

    Raises :class:`NotPositiveDefiniteError` naming the first pivot block
    whose Schur complement fails to factor.
    """
    T1, d = system.n_blocks, system.block_size
    g = system.rhs.reshape(T1, d)
    Ls = np.empty((T1, d, d))
    Gs = np.empty((max(T1 - 1, 0), d, d))
    y = np.empty((T1, d))
    pivot = system.diag[0]
    for t in range(T1):
        try:
            Ls[t] = np.linalg.cholesky(pivot)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"pivot block {t} is not positive definite",
                                           index=t) from exc
        rhs_t = g[t] - Gs[t - 1] @ y[t - 1] if t > 0 else g[t]
        y[t] = sla.solve_triangular(Ls[t], rhs_t, lower=True)
        if t < T1 - 1:
            # G_t = E_t^T L_t^{-T}
            Gs[t] = sla.solve_triangular(Ls[t], system.off[t], lower=True).T
            pivot = system.diag[t + 1] - Gs[t] @ Gs[t].T
            pivot = 0.5 * (pivot + pivot.T)
    z = np.empty((T1, d))
    z[-1] = sla.solve_triangular(Ls[-1], y[-1], lower=True, trans="T")
    for t in range(T1 - 2, -1, -1):
        z[t] = sla.solve_triangular(Ls[t], y[t] - Gs[t].T @ z[t + 1], lower=True, trans="T")
    return z.ravel()


def cost_terms(Z, C, precisions: Precisions, pseudo_obs, z_b):
    """The three weighted misfit terms, evaluated directly."""
    Z = np.atleast_2d(Z)
    eb = Z[0] - z_b
    background = float(eb @ precisions.B @ eb)
    ed = Z[1:] - Z[:-1] @ C.T
    dynamics = float(np.einsum("ti,ij,tj->", ed, precisions.Q, ed))
    eo = Z - pseudo_obs
    observation = float(np.einsum("ti,ij,tj->", eo, precisions.R, eo))
    return {"background": background, "dynamics": dynamics, "observation": observation}


def per_step_costs(Z, C, precisions: Precisions, pseudo_obs, z_b):
    """The misfit terms split by timestep (arrays of length ``T + 1``).

    The background term sits at step 0 and the dynamics term for the
    transition ``t-1 -> t`` at step ``t``.
    """
    Z = np.atleast_2d(Z)
    out = {k: np.zeros(Z.shape[0]) for k in ("background", "dynamics", "observation")}
    eb = Z[0] - z_b
    out["background"][0] = eb @ precisions.B @ eb
    ed = Z[1:] - Z[:-1] @ C.T
    out["dynamics"][1:] = np.einsum("ti,ij,tj->t", ed, precisions.Q, ed)
    eo = Z - pseudo_obs
    out["observation"][:] = np.einsum("ti,ij,tj->t", eo, precisions.R, eo)
    return out


def cost(Z, C, precisions: Precisions, pseudo_obs, z_b):
    return sum(cost_terms(Z, C, precisions, pseudo_obs, z_b).values())


def cost_gradient(Z, C, precisions: Precisions, pseudo_obs, z_b):
    """Gradient of :func:`cost`, accumulated term by term."""
    Z = np.atleast_2d(Z)
    grad = 2.0 * (Z - pseudo_obs) @ precisions.R
    grad[0] += 2.0 * precisions.B @ (Z[0] - z_b)
    ed = (Z[1:] - Z[:-1] @ C.T) @ precisions.Q
    grad[1:] += 2.0 * ed
    grad[:-1] -= 2.0 * ed @ C
    return grad


def forecast_features(C, z_start, tau):
    out = np.empty((tau, len(z_start)))
    z = np.asarray(z_start, dtype=float)
    for t in range(tau):
        z = C @ z
        out[t] = z
    return out


def forecast_only(model: FeatureSpaceModel, z_start, tau):
    if tau < 0:
        raise InvalidSpecError("forecast horizon must be non-negative")
    if tau == 0:
        return np.zeros((0, model.n_s))
    return model.decode(forecast_features(model.C_dyn, z_start, tau))


def assimilate(model: FeatureSpaceModel, window, s_b=None, tau=0, *,
               diagonal_covariances=False, precisions: Precisions | None = None
               ) -> AssimilationResult:
    """Pseudo-observations, assembly, exact solve, decode, optional forecast."""
    t0 = time.perf_counter()
    s_b = model.background_state if s_b is None else np.asarray(s_b, dtype=float)
    precisions = precisions or Precisions.from_model(model, diagonal_covariances)
    zhat = precompute_pseudo_observations(model, window)
    z_b = model.phi_s(s_b)[0]
    system = assemble_blocks(model.C_dyn, precisions, zhat, z_b)
    Z = solve_block_tridiagonal(system).reshape(zhat.shape)
    states = model.decode(Z)
    fz = forecast_features(model.C_dyn, Z[-1], tau) if tau > 0 else None
    fc = model.decode(fz) if fz is not None else None
    wall = time.perf_counter() - t0
    if not np.all(np.isfinite(states)):
        raise NonFiniteError("decoded analysis contains non-finite entries")
    steps = per_step_costs(Z, model.C_dyn, precisions, zhat, z_b)
    terms = {k: float(v.sum()) for k, v in steps.items()}
    return AssimilationResult(Z, states, sum(terms.values()), terms, wall, fc, fz, zhat,
                              meta={"per_step": steps})
