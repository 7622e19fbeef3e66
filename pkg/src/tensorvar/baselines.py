"""Classical 3D-Var and strong-constraint 4D-Var in state space.

Costs use unhalved squared Mahalanobis norms, ``|x|^2_{A^-1} = x^T A^-1 x``,
matching the feature-space objective.  Gradients of the 4D-Var cost come
either from a discrete adjoint of the Runge-Kutta integrator (Lorenz-96) or
from central finite differences evaluated as one batched integration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .dynamics import RK_TABLEAUS, SystemSpec, propagate, rk_stages
from .errors import DivergenceError, InvalidSpecError, NonFiniteError
from .observation import ObservationSpec, observation_jacobian_diag, observation_operator

SENTINEL_COST = 1e30


@dataclass
class OptimizerTrace:
    iterations: int = 0
    objective: list = field(default_factory=list)
    grad_norm: float = np.nan
    wall_time: float = 0.0
    n_evals: int = 0
    status: str = "running"
    line_search_failed: bool = False
    diverged: bool = False


@dataclass(frozen=True)
class VarConfig:
    B: np.ndarray
    R: np.ndarray
    window: int = 4
    memory: int = 10
    max_iter: int = 200
    tol: float = 1e-5
    rtol: float = 1e-2
    gradient: str = "adjoint"
    fd_step: float = 1e-6
    precondition: bool = False

    def __post_init__(self):
        if self.memory < 1:
            raise InvalidSpecError("L-BFGS memory must be at least 1")
        if self.gradient not in ("adjoint", "fd"):
            raise InvalidSpecError(f"unknown gradient mode {self.gradient!r}")
        for name in ("B", "R"):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
                raise InvalidSpecError(f"{name} must be a symmetric matrix")
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError as exc:
                raise InvalidSpecError(f"{name} must be positive definite") from exc

    @property
    def B_inv(self):
        return _spd_inv(self.B)

    @property
    def R_inv(self):
        return _spd_inv(self.R)


def _spd_inv(M):
    inv = sla.cho_solve(sla.cho_factor(np.asarray(M, dtype=float)), np.eye(len(M)))
    return 0.5 * (inv + inv.T)


def default_background_covariance(states, shrinkage=0.1):
    """Empirical state covariance shrunk toward its diagonal."""
    S = np.asarray(states, dtype=float)
    cov = np.cov(S, rowvar=False)
    return (1.0 - shrinkage) * cov + shrinkage * np.diag(np.diag(cov))


# ----------------------------------------------------------------------------
# L-BFGS


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimiser of the cubic interpolating two points with slopes, or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


def strong_wolfe(phi, f0, g0, alpha0=1.0, c1=1e-4, c2=0.9, max_evals=40, alpha_max=1e10):
    """Line search for a step satisfying the strong Wolfe conditions.

    ``phi(alpha)`` returns ``(f, slope, payload)``.  Follows the bracketing
    and zoom phases of Nocedal & Wright (Algorithms 3.5 and 3.6) with cubic
    interpolation, falling back to bisection.  Returns
    ``(alpha, f, slope, payload, ok)``; on failure the best point seen with
    ``f < f0`` is returned with ``ok=False`` (or ``alpha=0`` if none).
    """
    evals = 0
    best = (0.0, f0, g0, None)

    def record(a, f, g, p):
        nonlocal best
        if np.isfinite(f) and f < best[1]:
            best = (a, f, g, p)

    def zoom(lo, hi):
        nonlocal evals
        a_lo, f_lo, g_lo = lo[:3]
        a_hi, f_hi, g_hi = hi[:3]
        while evals < max_evals:
            a = None
            if np.isfinite(f_hi) and np.isfinite(g_hi) and f_hi < SENTINEL_COST:
                a = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
            lo_b, hi_b = min(a_lo, a_hi), max(a_lo, a_hi)
            span = hi_b - lo_b
            if a is None or not (lo_b + 0.1 * span <= a <= hi_b - 0.1 * span):
                a = 0.5 * (a_lo + a_hi)
            f, g, p = phi(a)
            evals += 1
            record(a, f, g, p)
            if not np.isfinite(f) or f > f0 + c1 * a * g0 or f >= f_lo:
                a_hi, f_hi, g_hi = a, f, g
            else:
                if abs(g) <= -c2 * g0:
                    return a, f, g, p, True
                if g * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, g_hi = a_lo, f_lo, g_lo
                a_lo, f_lo, g_lo = a, f, g
            if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
                break
        a, f, g, p = best
        return a, f, g, p, False

    prev = (0.0, f0, g0, None)
    a = alpha0
    for i in range(max_evals):
        f, g, p = phi(a)
        evals += 1
        record(a, f, g, p)
        if not np.isfinite(f) or f > f0 + c1 * a * g0 or (i > 0 and f >= prev[1]):
            return zoom(prev, (a, f, g, p))
        if abs(g) <= -c2 * g0:
            return a, f, g, p, True
        if g >= 0:
            return zoom((a, f, g, p), prev)
        prev = (a, f, g, p)
        a = min(2.0 * a, alpha_max)
        if evals >= max_evals:
            break
    a, f, g, p = best
    return a, f, g, p, False


def lbfgs(f_and_grad, x0, memory=10, tol=1e-5, max_iter=200, ftol=1e-12, rtol=0.0):
    """Limited-memory BFGS with the two-loop recursion and strong-Wolfe steps.

    Terminates when the gradient 2-norm is at most ``max(tol, rtol * |g_0|)``,
    when the relative decrease of the objective falls below ``ftol``, or
    after ``max_iter`` iterations.  Returns ``(x, trace)``.
    """
    t0 = time.perf_counter()
    trace = OptimizerTrace()
    x = np.array(x0, dtype=float)
    f, g = f_and_grad(x)
    trace.n_evals = 1
    if not np.isfinite(f) or f >= SENTINEL_COST:
        raise NonFiniteError("objective is not finite at the starting point")
    trace.objective.append(float(f))
    s_hist, y_hist, rho_hist = [], [], []
    gnorm = float(np.linalg.norm(g))
    tol = max(tol, rtol * gnorm)
    trace.status = "max_iter"
    for it in range(max_iter):
        if gnorm <= tol:
            trace.status = "converged"
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            q /= max(gnorm, 1.0)
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        slope0 = float(g @ d)
        if slope0 >= 0:  # not a descent direction: reset memory
            s_hist, y_hist, rho_hist = [], [], []
            d = -g / max(gnorm, 1.0)
            slope0 = float(g @ d)

        cache = {}

        def phi(alpha):
            xa = x + alpha * d
            fa, ga = f_and_grad(xa)
            trace.n_evals += 1
            cache[alpha] = (xa, ga)
            if not np.isfinite(fa):
                fa = SENTINEL_COST
            return fa, float(ga @ d) if fa < SENTINEL_COST else np.inf, None

        alpha, f_new, _, _, ok = strong_wolfe(phi, f, slope0)
        if alpha == 0.0 or f_new >= f:
            trace.line_search_failed = True
            trace.status = "line_search_failed"
            break
        x_new, g_new = cache[alpha]
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0), y_hist.pop(0), rho_hist.pop(0)
        rel = (f - f_new) / max(abs(f), abs(f_new), 1.0)
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        trace.objective.append(float(f))
        trace.iterations = it + 1
        if not ok:
            trace.line_search_failed = True
        if rel <= ftol:
            trace.status = "ftol"
            break
    else:
        if gnorm <= tol:
            trace.status = "converged"
    trace.grad_norm = gnorm
    trace.wall_time = time.perf_counter() - t0
    return x, trace


# ----------------------------------------------------------------------------
# 3D-Var


def threedvar_cost_grad(s, o, s_b, B_inv, R_inv, obs_spec: ObservationSpec):
    """Cost and gradient; ``s``/``o`` may hold several independent times as rows."""
    S = np.atleast_2d(s)
    O = np.atleast_2d(o)
    eb = S - s_b
    eo = O - observation_operator(S, obs_spec)
    J = float(np.einsum("ti,ij,tj->", eb, B_inv, eb) + np.einsum("ti,ij,tj->", eo, R_inv, eo))
    grad = 2.0 * eb @ B_inv
    grad[:, list(obs_spec.mask)] -= 2.0 * (eo @ R_inv) * observation_jacobian_diag(S, obs_spec)
    return J, grad.reshape(np.shape(s))


def threedvar(o, s_b, cfg: VarConfig, obs_spec: ObservationSpec, x0=None):
    """3D-Var analysis of one observation vector, or of each row of ``o``.

    Returns ``(states, trace)``; rows are independent so stacking them only
    shares the optimiser call.
    """
    O = np.atleast_2d(np.asarray(o, dtype=float))
    s_b = np.asarray(s_b, dtype=float)
    B_inv, R_inv = cfg.B_inv, cfg.R_inv
    shape = (O.shape[0], len(s_b))
    start = np.broadcast_to(s_b, shape).ravel() if x0 is None else np.asarray(x0).ravel()

    def fg(x):
        J, g = threedvar_cost_grad(x.reshape(shape), O, s_b, B_inv, R_inv, obs_spec)
        return J, g.ravel()

    x, trace = lbfgs(fg, start, cfg.memory, cfg.tol, cfg.max_iter, rtol=cfg.rtol)
    x = x.reshape(shape)
    return (x[0] if np.ndim(o) == 1 else x), trace


def threedvar_window(observations, s_b, cfg: VarConfig, spec: SystemSpec,
                     obs_spec: ObservationSpec, mode="propagate"):
    """3D-Var over an assimilation window.

    ``mode="propagate"`` analyses the first observation only and rolls the
    model over the window, so the result is a model trajectory like that of
    :func:`fourdvar`.  ``mode="independent"`` analyses every time separately.
    Returns ``(trajectory, trace)``.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    if mode == "propagate":
        s0, trace = threedvar(obs[0], s_b, cfg, obs_spec)
        return propagate(spec, s0, obs.shape[0]), trace
    if mode == "independent":
        return threedvar(obs, s_b, cfg, obs_spec)
    raise InvalidSpecError(f"unknown 3D-Var window mode {mode!r}")


# ----------------------------------------------------------------------------
# 4D-Var


def lorenz96_vjp(x, v):
    """``J(x)^T v`` for the Lorenz-96 tendency (batched over leading axes)."""
    # xp[k + 2] == x[k], vp[k + 2] == v[k]
    xp = np.concatenate([x[..., -2:], x, x[..., :2]], axis=-1)
    vp = np.concatenate([v[..., -2:], v, v[..., :2]], axis=-1)
    n = x.shape[-1]
    return (vp[..., 1:n + 1] * xp[..., :n] - vp[..., 4:] * xp[..., 3:n + 3]
            + vp[..., 3:n + 3] * (xp[..., 4:] - xp[..., 1:n + 1]) - v)


def _rk_step_adjoint(ys, lam, dt, tableau):
    """Pull ``lam`` back through one RK step whose stage inputs are ``ys``."""
    s = tableau.stages
    ybar = np.zeros_like(ys)
    for i in range(s - 1, -1, -1):
        kbar = (dt * tableau.b[i]) * lam
        if i < s - 1:
            kbar = kbar + dt * tableau.a[i + 1:, i] @ ybar[i + 1:]
        ybar[i] = lorenz96_vjp(ys[i], kbar)
    return lam + ybar.sum(axis=0)


def _forward_substeps(s0, spec: SystemSpec, T):
    """Sampled states ``s_0..s_T`` and the stage inputs of every substep."""
    tableau = RK_TABLEAUS[spec.method]
    dt = spec.dt_integrate
    x = np.array(s0, dtype=float)
    samples = [x]
    stages = []
    for _ in range(T):
        for _ in range(spec.substeps):
            ys, ks = rk_stages(x, spec.forcing, dt, tableau)
            stages.append(ys)
            x = x + dt * tableau.b @ ks
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e6:
            raise DivergenceError("forward sweep diverged")
        samples.append(x)
    return np.array(samples), stages


def _obs_cost(samples, obs, R_inv, obs_spec):
    eo = obs - observation_operator(samples, obs_spec)
    return np.einsum("...ti,ij,...tj->...", eo, R_inv, eo), eo


def fourdvar_cost_grad(s0, observations, s_b, cfg: VarConfig, spec: SystemSpec,
                       obs_spec: ObservationSpec, *, gradient=None, B_inv=None, R_inv=None):
    """Strong-constraint 4D-Var cost and gradient with respect to ``s_0``.

    ``observations`` has one row per sampled time ``0..T``.  On divergence
    of the forward model the sentinel cost ``SENTINEL_COST`` and a zero
    gradient are returned so that line searches reject the step.
    """
    mode = gradient or cfg.gradient
    B_inv = cfg.B_inv if B_inv is None else B_inv
    R_inv = cfg.R_inv if R_inv is None else R_inv
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    T = obs.shape[0] - 1
    s0 = np.asarray(s0, dtype=float)
    eb = s0 - s_b
    if mode == "adjoint" and T > 0:
        if spec.kind != "lorenz96":
            raise InvalidSpecError("adjoint gradients are only available for Lorenz-96")
        try:
            samples, stages = _forward_substeps(s0, spec, T)
        except DivergenceError:
            return SENTINEL_COST, np.zeros_like(s0)
        J_obs, eo = _obs_cost(samples, obs, R_inv, obs_spec)
        J = float(eb @ B_inv @ eb + J_obs)
        # adjoint forcing at each sampled time: d J_obs / d s_t
        forcing = np.zeros_like(samples)
        forcing[:, list(obs_spec.mask)] = -2.0 * (eo @ R_inv) * \
            observation_jacobian_diag(samples, obs_spec)
        tableau = RK_TABLEAUS[spec.method]
        lam = forcing[T].copy()
        k = len(stages)
        for t in range(T, 0, -1):
            for _ in range(spec.substeps):
                k -= 1
                lam = _rk_step_adjoint(stages[k], lam, spec.dt_integrate, tableau)
            lam = lam + forcing[t - 1]
        return J, 2.0 * B_inv @ eb + lam
    if T == 0:
        J_obs, eo = _obs_cost(s0[None, :], obs, R_inv, obs_spec)
        J = float(eb @ B_inv @ eb + J_obs)
        g = 2.0 * B_inv @ eb
        g[list(obs_spec.mask)] -= 2.0 * (eo[0] @ R_inv) * observation_jacobian_diag(s0, obs_spec)
        return J, g
    return _fourdvar_fd(s0, obs, s_b, B_inv, R_inv, spec, obs_spec, cfg.fd_step)


def _fourdvar_fd(s0, obs, s_b, B_inv, R_inv, spec, obs_spec, h):
    n = s0.size
    T = obs.shape[0] - 1
    pert = np.concatenate([s0[None, :], s0 + h * np.eye(n), s0 - h * np.eye(n)])
    try:
        samples = propagate(spec, pert, T + 1)  # (T+1, 2n+1, n_s)
    except DivergenceError:
        return SENTINEL_COST, np.zeros_like(s0)
    samples = np.swapaxes(samples, 0, 1)
    J_obs, _ = _obs_cost(samples, obs, R_inv, obs_spec)
    eb = pert - s_b
    J_all = np.einsum("ki,ij,kj->k", eb, B_inv, eb) + J_obs
    grad = (J_all[1:n + 1] - J_all[n + 1:]) / (2.0 * h)
    return float(J_all[0]), grad


def fourdvar(observations, s_b, cfg: VarConfig, spec: SystemSpec, obs_spec: ObservationSpec,
             x0=None):
    """Optimise ``s_0`` by L-BFGS, then roll the model over the window.

    With ``cfg.precondition`` the optimiser works on the control variable
    ``v`` with ``s_0 = s_b + L v`` and ``B = L L^T``, which turns the
    background Hessian into the identity.  Returns ``(trajectory, trace)``;
    the trajectory rows are ``s_0..s_T`` from the integrator the cost uses.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    s_b = np.asarray(s_b, dtype=float)
    B_inv, R_inv = cfg.B_inv, cfg.R_inv
    L = np.linalg.cholesky(cfg.B) if cfg.precondition else np.eye(len(s_b))
    diverged = False

    def fg(v):
        nonlocal diverged
        J, g = fourdvar_cost_grad(s_b + L @ v, obs, s_b, cfg, spec, obs_spec,
                                  B_inv=B_inv, R_inv=R_inv)
        if J >= SENTINEL_COST:
            diverged = True
        return J, L.T @ g

    v0 = np.zeros_like(s_b) if x0 is None else sla.solve_triangular(L, x0 - s_b, lower=True)
    v, trace = lbfgs(fg, v0, cfg.memory, cfg.tol, cfg.max_iter, rtol=cfg.rtol)
    trace.diverged = diverged
    return propagate(spec, s_b + L @ v, obs.shape[0]), trace
