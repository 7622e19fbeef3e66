"""Ground-truth trajectories for the Lorenz-96 and Kuramoto-Sivashinsky systems.

Both integrators are fixed-step and vectorised over any leading batch axes,
so a stack of initial conditions can be advanced together.  Lorenz-96 uses an
explicit Runge-Kutta tableau (8th order by default, classical RK4 on
request); Kuramoto-Sivashinsky uses ETDRK4 on the real FFT of the periodic
field with 2/3-rule dealiasing of the quadratic term.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DivergenceError, InvalidSpecError

DIVERGENCE_THRESHOLD = 1e6
MAX_SPINUP_RETRIES = 5


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    n_s: int
    forcing: float = 10.0
    domain_length: float = 32 * math.pi
    dt_integrate: float = 0.01
    dt_sample: float = 0.1
    rng_seed: int = 0
    method: str = "rk8"

    def __post_init__(self):
        if self.kind not in ("lorenz96", "ks"):
            raise InvalidSpecError(f"unknown system kind {self.kind!r}")
        if self.kind == "lorenz96" and self.method not in RK_TABLEAUS:
            raise InvalidSpecError(f"unknown Runge-Kutta method {self.method!r}")
        if self.n_s < 1:
            raise InvalidSpecError("state dimension must be positive")
        if self.kind == "lorenz96" and self.n_s < 4:
            raise InvalidSpecError("Lorenz-96 needs n_s >= 4 for distinct wraparound indices")
        if self.kind == "ks":
            if self.n_s & (self.n_s - 1):
                raise InvalidSpecError("KS grid size must be a power of two")
            if self.domain_length <= 0:
                raise InvalidSpecError("KS domain length must be positive")
        if self.dt_integrate <= 0 or self.dt_sample <= 0:
            raise InvalidSpecError("time steps must be positive")
        ratio = self.dt_sample / self.dt_integrate
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise InvalidSpecError("dt_sample must be an integer multiple of dt_integrate")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_sample / self.dt_integrate))

    def replace(self, **changes) -> "SystemSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lorenz96_spec(n_s=40, forcing=10.0, rng_seed=0) -> SystemSpec:
    return SystemSpec("lorenz96", n_s, forcing=forcing, dt_integrate=0.01, dt_sample=0.1,
                      rng_seed=rng_seed)


def ks_spec(n_s=128, domain_length=32 * math.pi, rng_seed=0) -> SystemSpec:
    return SystemSpec("ks", n_s, domain_length=domain_length, dt_integrate=0.001,
                      dt_sample=0.01, rng_seed=rng_seed, method="etdrk4")


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    dt_sample: float
    spec: SystemSpec | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[0] < 1:
            raise InvalidSpecError("trajectory states must be a non-empty (n_steps, n_s) matrix")
        if not np.all(np.isfinite(states)):
            raise InvalidSpecError("trajectory contains non-finite entries")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]

    @property
    def n_s(self) -> int:
        return self.states.shape[1]


# ----------------------------------------------------------------------------
# Lorenz-96


def lorenz96_rhs(state, forcing):
    """Time derivative of Lorenz-96 with cyclic indexing along the last axis."""
    x = np.asarray(state, dtype=float)
    if x.shape[-1] < 4:
        raise InvalidSpecError("Lorenz-96 needs at least 4 components")
    # padded so that xp[k + 2] == x[k]
    xp = np.concatenate([x[..., -2:], x, x[..., :1]], axis=-1)
    return (xp[..., 3:] - xp[..., :-3]) * xp[..., 1:-2] - x + forcing


@dataclass(frozen=True)
class ButcherTableau:
    a: np.ndarray
    b: np.ndarray
    order: int

    @property
    def stages(self) -> int:
        return len(self.b)


def _rk4_tableau():
    a = np.zeros((4, 4))
    a[1, 0] = a[2, 1] = 0.5
    a[3, 2] = 1.0
    return ButcherTableau(a, np.array([1, 2, 2, 1]) / 6.0, 4)


def _rk8_tableau():
    # 12-stage 8th-order propagating tableau of Dormand-Prince 8(5,3)
    from scipy.integrate._ivp import dop853_coefficients as dop

    n = dop.N_STAGES
    return ButcherTableau(np.array(dop.A[:n, :n]), np.array(dop.B), 8)


RK_TABLEAUS = {"rk4": _rk4_tableau(), "rk8": _rk8_tableau()}


def rk_stages(state, forcing, dt, tableau: ButcherTableau):
    """Stage inputs ``y_i`` and slopes ``k_i`` of one explicit RK step.

    Both are returned stacked along a new leading axis of length ``stages``.
    """
    x = np.asarray(state, dtype=float)
    s = tableau.stages
    ys = np.empty((s,) + x.shape)
    ks = np.empty_like(ys)
    flat = ks.reshape(s, -1)
    for i in range(s):
        ys[i] = x + (dt * tableau.a[i, :i] @ flat[:i]).reshape(x.shape) if i else x
        ks[i] = lorenz96_rhs(ys[i], forcing)
    return ys, ks


def rk_step(state, forcing, dt, tableau: ButcherTableau):
    _, ks = rk_stages(state, forcing, dt, tableau)
    return state + (dt * tableau.b @ ks.reshape(tableau.stages, -1)).reshape(np.shape(state))


def rk4_step(state, forcing, dt):
    return rk_step(state, forcing, dt, RK_TABLEAUS["rk4"])


# ----------------------------------------------------------------------------
# Kuramoto-Sivashinsky


@dataclass(frozen=True)
class ETDRK4Coefficients:
    wavenumbers: np.ndarray
    deriv: np.ndarray  # i*k with the Nyquist mode zeroed
    dealias: np.ndarray
    linear: np.ndarray
    exp_full: np.ndarray
    exp_half: np.ndarray
    q: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray


@lru_cache(maxsize=16)
def etdrk4_coefficients(n_s: int, domain_length: float, dt: float, n_contour: int = 32):
    """Cox-Matthews ETDRK4 coefficients, evaluated by contour averaging.

    The phi-functions are averaged over ``n_contour`` points on a unit circle
    centred at each ``dt * L_k`` (Kassam & Trefethen 2005), which avoids the
    cancellation error of the closed forms near zero.
    """
    k = 2.0 * np.pi / domain_length * np.arange(n_s // 2 + 1)
    deriv = 1j * k
    deriv[-1] = 0.0
    dealias = np.arange(n_s // 2 + 1) < n_s / 3.0
    lin = k ** 2 - k ** 4
    roots = np.exp(2j * np.pi * (np.arange(n_contour) + 0.5) / n_contour)
    lr = dt * lin[:, None] + roots[None, :]
    elr = np.exp(lr)
    q = dt * np.mean((np.exp(lr / 2.0) - 1.0) / lr, axis=1).real
    f1 = dt * np.mean((-4.0 - lr + elr * (4.0 - 3.0 * lr + lr ** 2)) / lr ** 3, axis=1).real
    f2 = dt * np.mean((2.0 + lr + elr * (lr - 2.0)) / lr ** 3, axis=1).real
    f3 = dt * np.mean((-4.0 - 3.0 * lr - lr ** 2 + elr * (4.0 - lr)) / lr ** 3, axis=1).real
    return ETDRK4Coefficients(k, deriv, dealias, lin, np.exp(dt * lin), np.exp(dt * lin / 2.0),
                              q, f1, f2, f3)


def _ks_nonlinear(v_hat, c: ETDRK4Coefficients, n_s: int):
    # -u u_x = -(1/2) d/dx (u^2), dealiased
    u = np.fft.irfft(v_hat, n=n_s, axis=-1)
    return -0.5 * c.deriv * c.dealias * np.fft.rfft(u * u, axis=-1)


def etdrk4_step(v_hat, c: ETDRK4Coefficients, n_s: int, nonlinear=True):
    if not nonlinear:
        return c.exp_full * v_hat
    nv = _ks_nonlinear(v_hat, c, n_s)
    a = c.exp_half * v_hat + c.q * nv
    na = _ks_nonlinear(a, c, n_s)
    b = c.exp_half * v_hat + c.q * na
    nb = _ks_nonlinear(b, c, n_s)
    cc = c.exp_half * a + c.q * (2.0 * nb - nv)
    nc = _ks_nonlinear(cc, c, n_s)
    return c.exp_full * v_hat + c.f1 * nv + 2.0 * c.f2 * (na + nb) + c.f3 * nc


# ----------------------------------------------------------------------------
# Shared propagation


def propagate(spec: SystemSpec, states, n_samples: int, *, nonlinear=True, dt_integrate=None):
    """Advance ``states`` (shape ``(..., n_s)``) and return ``n_samples`` samples.

    The first sample is the input itself; subsequent samples are spaced by
    ``spec.dt_sample``.  Raises :class:`DivergenceError` naming the integration
    step at which any entry became non-finite or exceeded the divergence
    threshold.
    """
    x = np.array(states, dtype=float)
    if x.shape[-1] != spec.n_s:
        raise InvalidSpecError(f"state has {x.shape[-1]} components, spec expects {spec.n_s}")
    if n_samples < 1:
        raise InvalidSpecError("n_samples must be at least 1")
    dt = spec.dt_integrate if dt_integrate is None else dt_integrate
    ratio = spec.dt_sample / dt
    substeps = int(round(ratio))
    if abs(ratio - substeps) > 1e-9 * max(1.0, ratio):
        raise InvalidSpecError("dt_sample must be an integer multiple of the integration step")

    out = np.empty((n_samples,) + x.shape)
    out[0] = x
    if spec.kind == "lorenz96":
        tableau = RK_TABLEAUS[spec.method]
        step = 0
        # overflow on a diverging run is reported by _check_divergence
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(1, n_samples):
                for _ in range(substeps):
                    x = rk_step(x, spec.forcing, dt, tableau)
                    step += 1
                _check_divergence(x, step)
                out[i] = x
    else:
        coeffs = etdrk4_coefficients(spec.n_s, float(spec.domain_length), float(dt))
        v = np.fft.rfft(x, axis=-1)
        step = 0
        for i in range(1, n_samples):
            for _ in range(substeps):
                v = etdrk4_step(v, coeffs, spec.n_s, nonlinear)
                step += 1
            x = np.fft.irfft(v, n=spec.n_s, axis=-1)
            if not np.all(np.isfinite(v)):
                raise DivergenceError(f"non-finite Fourier coefficient at step {step}", step=step)
            _check_divergence(x, step)
            out[i] = x
    return out


def _check_divergence(x, step):
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_THRESHOLD:
        raise DivergenceError(f"integration diverged at step {step}", step=step)


def integrate_lorenz96(spec: SystemSpec, initial, n_samples: int, *,
                       dt_integrate=None) -> Trajectory:
    if spec.kind != "lorenz96":
        raise InvalidSpecError("integrate_lorenz96 needs a lorenz96 spec")
    states = propagate(spec, np.asarray(initial, dtype=float), n_samples, dt_integrate=dt_integrate)
    return Trajectory(states, spec.dt_sample, spec)


def integrate_ks(spec: SystemSpec, initial, n_samples: int, *, nonlinear=True,
                 dt_integrate=None) -> Trajectory:
    if spec.kind != "ks":
        raise InvalidSpecError("integrate_ks needs a ks spec")
    states = propagate(spec, np.asarray(initial, dtype=float), n_samples, nonlinear=nonlinear,
                       dt_integrate=dt_integrate)
    return Trajectory(states, spec.dt_sample, spec)


def integrate(spec: SystemSpec, initial, n_samples: int) -> Trajectory:
    if spec.kind == "lorenz96":
        return integrate_lorenz96(spec, initial, n_samples)
    return integrate_ks(spec, initial, n_samples)


def random_initial(spec: SystemSpec, rng, size=None):
    """Raw initial draw before spin-up.

    Lorenz-96 gets standard normal entries; KS gets a band-limited random
    field built from Fourier modes ``1 <= |k| <= 8`` with unit-variance
    coefficients.
    """
    shape = () if size is None else (size,)
    if spec.kind == "lorenz96":
        return rng.standard_normal(shape + (spec.n_s,))
    n_modes = spec.n_s // 2 + 1
    coeffs = np.zeros(shape + (n_modes,), dtype=complex)
    band = min(8, n_modes - 1)
    coeffs[..., 1:band + 1] = (rng.standard_normal(shape + (band,))
                               + 1j * rng.standard_normal(shape + (band,))) / np.sqrt(2.0)
    # irfft of unit-variance modes; rescale so the field has O(1) amplitude
    return np.fft.irfft(coeffs, n=spec.n_s, axis=-1) * spec.n_s / np.sqrt(2.0 * band)


def spinup_initial(spec: SystemSpec, burn_in: int, rng) -> np.ndarray:
    if burn_in < 0:
        raise InvalidSpecError("burn_in must be non-negative")
    last = None
    for _ in range(MAX_SPINUP_RETRIES):
        x0 = random_initial(spec, rng)
        if burn_in == 0:
            return x0
        try:
            return propagate(spec, x0, burn_in + 1)[-1]
        except DivergenceError as exc:
            last = exc
    raise DivergenceError(f"spin-up diverged {MAX_SPINUP_RETRIES} times", step=last.step)


def generate_trajectories(spec: SystemSpec, n_traj: int, n_samples: int, burn_in: int,
                          seed: int | None = None) -> list[Trajectory]:
    """Spin up and integrate ``n_traj`` independent trajectories.

    Each trajectory draws from its own RNG stream spawned from ``seed`` (or
    ``spec.rng_seed``), so the result does not depend on batching.  All
    trajectories are advanced together as one batch.
    """
    seed = spec.rng_seed if seed is None else seed
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_traj)]
    x0 = np.stack([random_initial(spec, rng) for rng in streams])
    if burn_in > 0:
        try:
            x0 = propagate(spec, x0, burn_in + 1)[-1]
        except DivergenceError:
            x0 = np.stack([spinup_initial(spec, burn_in, rng) for rng in streams])
    states = propagate(spec, x0, n_samples)
    return [Trajectory(states[:, i], spec.dt_sample, spec, seed=seed, meta={"index": i})
            for i in range(n_traj)]


def lyapunov_time(spec: SystemSpec, initial, n_samples: int = 500, eps: float = 1e-8, seed=0):
    """Empirical Lyapunov time ``1 / lambda_max`` by twin-trajectory renormalisation.

    A perturbed copy of ``initial`` (distance ``eps``) is advanced one sample
    at a time; after each sample the separation is measured and rescaled
    back to ``eps``.  The mean log growth rate estimates the largest
    Lyapunov exponent.  ``initial`` should already lie on the attractor.
    """
    x = np.asarray(initial, dtype=float)
    d = np.random.default_rng(seed).standard_normal(x.shape)
    y = x + eps * d / np.linalg.norm(d)
    total = 0.0
    for _ in range(n_samples):
        x, y = propagate(spec, np.stack([x, y]), 2)[1]
        sep = np.linalg.norm(y - x)
        total += np.log(sep / eps)
        y = x + (eps / sep) * (y - x)
    rate = total / (n_samples * spec.dt_sample)
    return 1.0 / rate if rate > 0 else math.inf
