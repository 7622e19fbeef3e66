"""Nonlinear partial observations, observation histories and training sets."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Trajectory
from .errors import InsufficientDataError, InvalidSpecError

OBS_SCALE = 5.0
OBS_SLOPE = math.pi / 10.0


@dataclass(frozen=True)
class ObservationSpec:
    """Partial observation ``o = a * arctan(b * s[mask]) + noise``.

    ``operator="linear"`` observes ``s[mask]`` directly (used for checks
    against closed-form analyses).
    """

    mask: tuple
    noise_std: float = 0.1
    history_length: int = 10
    rng_seed: int = 0
    scale: float = OBS_SCALE
    slope: float = OBS_SLOPE
    operator: str = "arctan"

    def __post_init__(self):
        if self.operator not in ("arctan", "linear"):
            raise InvalidSpecError(f"unknown observation operator {self.operator!r}")
        mask = tuple(int(i) for i in self.mask)
        if len(set(mask)) != len(mask):
            raise InvalidSpecError("observation mask has duplicate indices")
        if list(mask) != sorted(mask):
            raise InvalidSpecError("observation mask must be sorted")
        if any(i < 0 for i in mask):
            raise InvalidSpecError("observation mask indices must be non-negative")
        if self.noise_std < 0:
            raise InvalidSpecError("noise_std must be non-negative")
        if self.history_length < 0:
            raise InvalidSpecError("history_length must be non-negative")
        object.__setattr__(self, "mask", mask)

    @property
    def n_o(self) -> int:
        return len(self.mask)

    def validate_for(self, n_s: int):
        if self.mask and self.mask[-1] >= n_s:
            raise InvalidSpecError(f"mask index {self.mask[-1]} out of range for n_s={n_s}")

    def replace(self, **changes) -> "ObservationSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mask"] = list(self.mask)
        return d


def every_kth(n_s: int, k: int) -> tuple:
    return tuple(range(0, n_s, k))


def observation_operator(states, spec: ObservationSpec):
    """Noise-free ``G(s)``; accepts any leading batch shape."""
    s = np.asarray(states, dtype=float)[..., list(spec.mask)]
    if spec.operator == "linear":
        return s
    return spec.scale * np.arctan(spec.slope * s)


def observation_jacobian_diag(states, spec: ObservationSpec):
    """dG/ds on the observed components (the Jacobian is a masked diagonal)."""
    s = np.asarray(states, dtype=float)[..., list(spec.mask)]
    if spec.operator == "linear":
        return np.ones_like(s)
    return spec.scale * spec.slope / (1.0 + (spec.slope * s) ** 2)


def observe(state, spec: ObservationSpec, rng=None):
    state = np.asarray(state, dtype=float)
    spec.validate_for(state.shape[-1])
    clean = observation_operator(state, spec)
    if spec.noise_std == 0:
        return clean
    if rng is None:
        raise InvalidSpecError("a random generator is required when noise_std > 0")
    return clean + spec.noise_std * rng.standard_normal(clean.shape)


def history_matrix(observations, m: int):
    """Row ``t`` holds ``o_{t-m}, ..., o_{t-1}`` flattened oldest-first.

    Rows exist only for ``t >= m``; the returned matrix therefore has
    ``len(observations) - m`` rows, aligned with ``observations[m:]``.
    """
    obs = np.asarray(observations, dtype=float)
    n, n_o = obs.shape
    if n < m + 1:
        raise InsufficientDataError(f"need at least {m + 1} observations for history length {m}",
                                    required=m + 1)
    if m == 0:
        return np.zeros((n, 0))
    windows = np.lib.stride_tricks.sliding_window_view(obs, (m, n_o))[:, 0]  # (n-m+1, m, n_o)
    return windows[: n - m].reshape(n - m, m * n_o).copy()


@dataclass(frozen=True)
class ObservationWindow:
    observations: np.ndarray
    histories: np.ndarray
    start: int
    truth: np.ndarray | None = None

    def __post_init__(self):
        if self.observations.shape[0] != self.histories.shape[0]:
            raise InvalidSpecError("observations and histories must have the same number of rows")
        if not (np.all(np.isfinite(self.observations)) and np.all(np.isfinite(self.histories))):
            raise InvalidSpecError("observation window contains non-finite entries")

    @property
    def length(self) -> int:
        return self.observations.shape[0]

    @property
    def history_length(self) -> int:
        n_o = self.observations.shape[1]
        return self.histories.shape[1] // n_o if n_o else 0


def build_windows(observations, m: int, T: int, *, stride: int = 1, starts=None, truth=None):
    """Cut assimilation windows of ``T + 1`` steps with full ``m``-step histories.

    Windows start at every admissible index ``t0 >= m`` (every ``stride``-th
    one, or exactly ``starts`` when given).  ``truth``, if provided, is sliced
    alongside so each window carries the states it should recover.
    """
    obs = np.asarray(observations, dtype=float)
    required = m + T + 1
    if obs.shape[0] < required:
        raise InsufficientDataError(
            f"sequence of length {obs.shape[0]} too short; need at least {required}",
            required=required)
    hist = history_matrix(obs, m)  # row i <-> time i + m
    if starts is None:
        starts = range(m, obs.shape[0] - T, stride)
    windows = []
    for t0 in starts:
        if t0 < m or t0 + T >= obs.shape[0]:
            raise InsufficientDataError(f"window start {t0} not admissible", required=t0 + T + 1)
        rows = slice(t0 - m, t0 - m + T + 1)
        tr = None if truth is None else np.asarray(truth)[t0:t0 + T + 1]
        windows.append(ObservationWindow(obs[t0:t0 + T + 1], hist[rows], t0, tr))
    return windows


@dataclass
class TrainingData:
    """Paired samples for the dynamics and inverse-observation regressions.

    ``dyn_*`` hold consecutive state pairs, never spanning trajectories;
    ``obs_*`` hold ``(s_t, o_t, h_t)`` triples for ``t >= m``.  ``*_traj``
    record the source trajectory of each row.
    """

    dyn_states: np.ndarray
    dyn_next: np.ndarray
    dyn_traj: np.ndarray
    obs_states: np.ndarray
    obs_obs: np.ndarray
    obs_hist: np.ndarray
    obs_traj: np.ndarray
    observations: list = field(default_factory=list)
    spec: ObservationSpec | None = None
    state_min: float = 0.0
    state_max: float = 0.0
    state_mean: np.ndarray | None = None

    @property
    def n_s(self) -> int:
        return self.dyn_states.shape[1]

    @property
    def n_o(self) -> int:
        return self.obs_obs.shape[1]


def observation_streams(seed: int, n: int):
    """Independent per-trajectory generators derived from ``(seed, index)``."""
    return [np.random.default_rng([seed, i]) for i in range(n)]


def observe_trajectories(trajectories, spec: ObservationSpec, seed=None):
    seed = spec.rng_seed if seed is None else seed
    rngs = observation_streams(seed, len(trajectories))
    return [observe(tr.states, spec, rng) for tr, rng in zip(trajectories, rngs)]


def make_training_data(trajectories, spec: ObservationSpec, seed=None) -> TrainingData:
    if not trajectories:
        raise InsufficientDataError("no trajectories supplied", required=1)
    n_s = trajectories[0].n_s if isinstance(trajectories[0], Trajectory) else \
        np.asarray(trajectories[0]).shape[1]
    states_list = [tr.states if isinstance(tr, Trajectory) else np.asarray(tr, dtype=float)
                   for tr in trajectories]
    if any(s.shape[1] != n_s for s in states_list):
        raise InvalidSpecError("all trajectories must share the same state dimension")
    spec.validate_for(n_s)
    seed = spec.rng_seed if seed is None else seed
    rngs = observation_streams(seed, len(states_list))
    m = spec.history_length

    dyn_s, dyn_n, dyn_id = [], [], []
    ob_s, ob_o, ob_h, ob_id, all_obs = [], [], [], [], []
    for i, (states, rng) in enumerate(zip(states_list, rngs)):
        obs = observe(states, spec, rng)
        all_obs.append(obs)
        dyn_s.append(states[:-1])
        dyn_n.append(states[1:])
        dyn_id.append(np.full(len(states) - 1, i))
        if len(states) > m:
            ob_s.append(states[m:])
            ob_o.append(obs[m:])
            ob_h.append(history_matrix(obs, m))
            ob_id.append(np.full(len(states) - m, i))

    def cat(parts, width):
        return np.concatenate(parts) if parts else np.zeros((0, width))

    n_o = spec.n_o
    stacked = np.concatenate(states_list)
    return TrainingData(
        dyn_states=cat(dyn_s, n_s), dyn_next=cat(dyn_n, n_s),
        dyn_traj=np.concatenate(dyn_id).astype(int),
        obs_states=cat(ob_s, n_s), obs_obs=cat(ob_o, n_o), obs_hist=cat(ob_h, m * n_o),
        obs_traj=np.concatenate(ob_id).astype(int) if ob_id else np.zeros(0, int),
        observations=all_obs, spec=spec, state_min=float(stacked.min()),
        state_max=float(stacked.max()), state_mean=stacked.mean(axis=0))
