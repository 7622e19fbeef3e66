"""Experiment orchestration: data, training, paired assimilation runs, reports.

Every method in one experiment sees the same test windows: run ``i`` uses
test trajectory ``i`` and its observation stream, cut at a fixed start
index that does not depend on the history length.  Timings cover the
assimilation call only.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io as _io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .assimilation import assimilate
from .baselines import VarConfig, default_background_covariance, fourdvar, threedvar_window
from .cme import FeatureSpaceModel, KernelDims, train_kernel_model
from .deep_features import DeepConfig, train_deep_model
from .dynamics import SystemSpec, generate_trajectories, propagate
from .errors import InvalidSpecError, TensorVarError
from .kernel import KernelSpec
from .observation import (ObservationSpec, build_windows, every_kth, make_training_data,
                          observation_operator, observe_trajectories)

log = logging.getLogger(__name__)

METHODS = ("tensor-var", "3dvar", "4dvar", "4dvar-fd")
ABLATION_AXES = ("history_length", "feature_dim")
SUMMARY_FIELDS = ("method", "n_runs", "n_ok", "n_failed", "nrmse_mean", "nrmse_std",
                  "nrmse_component_mean", "nrmse_component_std", "forecast_nrmse_mean",
                  "iterations_mean", "iterations_std")
RUN_FIELDS = ("method", "run", "start", "status", "nrmse", "nrmse_component", "forecast_nrmse",
              "iterations", "wall_time", "error")


# ----------------------------------------------------------------------------
# metrics


def _check_range(s_max, s_min):
    if not s_max > s_min:
        raise InvalidSpecError("state range is empty (s_max <= s_min)")
    return s_max - s_min


def nrmse(estimate, truth, s_max, s_min):
    """Root mean over time of the squared error norm, over the state range, in percent."""
    rng = _check_range(s_max, s_min)
    est, tru = np.atleast_2d(estimate), np.atleast_2d(truth)
    if est.shape != tru.shape:
        raise InvalidSpecError(f"shape mismatch {est.shape} vs {tru.shape}")
    return float(np.sqrt(np.mean(np.sum((est - tru) ** 2, axis=1))) / rng * 100.0)


def nrmse_component(estimate, truth, s_max, s_min):
    """RMSE over all entries (time and components), over the state range, in percent.

    Equals :func:`nrmse` divided by the square root of the state dimension.
    """
    rng = _check_range(s_max, s_min)
    est, tru = np.atleast_2d(estimate), np.atleast_2d(truth)
    if est.shape != tru.shape:
        raise InvalidSpecError(f"shape mismatch {est.shape} vs {tru.shape}")
    return float(np.sqrt(np.mean((est - tru) ** 2)) / rng * 100.0)


# ----------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Everything one experiment needs.  Keys match the JSON config schema.

    ``system`` holds :class:`SystemSpec` fields; ``observation`` holds
    ``every`` (keep every k-th component), ``noise_std`` and
    ``history_length``; ``noise_rel_std`` instead of ``noise_std`` sets the
    noise to that fraction of the training state standard deviation.
    ``seed`` is the base seed from which the data,
    observation, test and training seeds are offset.
    """

    name: str = "custom"
    system: dict = field(default_factory=lambda: {"kind": "lorenz96", "n_s": 40})
    observation: dict = field(default_factory=lambda: {"every": 5, "noise_std": 0.1,
                                                       "history_length": 10})
    n_traj: int = 20
    traj_len: int = 2000
    burn_in: int = 1000
    n_runs: int = 20
    window: int = 4
    window_start: int = 40
    horizon: int = 0
    feature_path: str = "kernel"
    dims: dict = field(default_factory=lambda: {"d_s": 60, "d_o": 32, "d_h": 32,
                                                "n_landmark": 2000})
    kernel_multiplier: dict = field(default_factory=lambda: {"state": 1.0, "obs": 1.0,
                                                             "hist": 1.0})
    lam: float = 1e-6
    deep: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: ["tensor-var", "3dvar", "4dvar"])
    fourdvar_gradient: str = "adjoint"
    var: dict = field(default_factory=lambda: {"rtol": 1e-2, "tol": 1e-5, "max_iter": 200,
                                               "memory": 10, "shrinkage": 0.1})
    threedvar_mode: str = "propagate"
    diagonal_covariances: bool = False
    cyclic: bool = False
    cycles: int = 3
    seed: int = 0
    write_results: bool = False
    plots: bool = False
    out: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        SystemSpec(**self.system_kwargs())
        if self.feature_path not in ("kernel", "deep"):
            raise InvalidSpecError(f"unknown feature path {self.feature_path!r}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise InvalidSpecError(f"unknown methods {unknown}; choose from {METHODS}")
        if self.fourdvar_gradient not in ("adjoint", "fd"):
            raise InvalidSpecError("fourdvar_gradient must be 'adjoint' or 'fd'")
        if self.fourdvar_gradient == "adjoint" and "4dvar" in self.methods and \
                self.system["kind"] != "lorenz96":
            raise InvalidSpecError("adjoint 4D-Var needs the Lorenz-96 system")
        if self.window < 0 or self.horizon < 0 or self.cycles < 1:
            raise InvalidSpecError("window, horizon and cycles must be non-negative/positive")
        m = self.history_length
        if self.window_start < m:
            raise InvalidSpecError(f"window start {self.window_start} precedes a full "
                                   f"history of length {m}")
        if self.test_len > 10 ** 7 or self.n_runs < 1 or self.n_traj < 1:
            raise InvalidSpecError("invalid run or trajectory counts")
        if self.traj_len <= m + 1:
            raise InvalidSpecError("training trajectories shorter than the history")
        self.observation_spec().validate_for(self.system["n_s"])
        return self

    # derived pieces ---------------------------------------------------------

    @property
    def history_length(self) -> int:
        return int(self.observation.get("history_length", 10))

    @property
    def test_len(self) -> int:
        span = (self.window + 1) * (self.cycles if self.cyclic else 1)
        return self.window_start + span + self.horizon

    @property
    def seeds(self) -> dict:
        s = int(self.seed)
        return {"train_data": s + 1, "test_data": s + 2, "train_obs": s, "test_obs": s + 99,
                "model": s}

    def system_kwargs(self):
        return dict(self.system)

    def system_spec(self) -> SystemSpec:
        return SystemSpec(**self.system_kwargs())

    def observation_spec(self, state_std=None) -> ObservationSpec:
        o = self.observation
        if "mask" in o:
            mask = tuple(o["mask"])
        else:
            mask = every_kth(int(self.system["n_s"]), int(o.get("every", 1)))
        sigma = float(o.get("noise_std", 0.1))
        if "noise_rel_std" in o:
            # validation happens before any data exist; 1.0 stands in for the state spread
            sigma = float(o["noise_rel_std"]) * (1.0 if state_std is None else state_std)
        return ObservationSpec(mask, sigma, self.history_length, self.seeds["train_obs"])

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        base = preset(d.pop("preset")) if "preset" in d else cls()
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidSpecError(f"unknown config keys {sorted(unknown)}")
        merged = base.to_dict()
        for k, v in d.items():
            if isinstance(v, dict) and isinstance(merged.get(k), dict):
                merged[k] = {**merged[k], **v}
            else:
                merged[k] = v
        return cls(**merged)


def _l96(n_s, d_s):
    return ExperimentConfig(
        name=f"l96-{n_s}",
        system={"kind": "lorenz96", "n_s": n_s, "forcing": 10.0, "dt_integrate": 0.01,
                "dt_sample": 0.1, "method": "rk8"},
        observation={"every": 5, "noise_std": 0.1, "history_length": 10},
        dims={"d_s": d_s, "d_o": 32, "d_h": 32, "n_landmark": 2000},
        methods=["tensor-var", "3dvar", "4dvar", "4dvar-fd"], fourdvar_gradient="adjoint")


def _ks(n_s):
    return ExperimentConfig(
        name=f"ks-{n_s}",
        system={"kind": "ks", "n_s": n_s, "domain_length": 32 * math.pi,
                "dt_integrate": 0.001, "dt_sample": 0.01, "method": "etdrk4"},
        observation={"every": 4, "noise_std": 1.0, "history_length": 10},
        n_traj=40, burn_in=2000,
        dims={"d_s": 120, "d_o": 32, "d_h": 32, "n_landmark": 2000},
        kernel_multiplier={"state": 2.0, "obs": 2.0, "hist": 2.0},
        methods=["tensor-var", "3dvar", "4dvar"], fourdvar_gradient="fd")


def _smoke():
    return ExperimentConfig(
        name="smoke",
        system={"kind": "lorenz96", "n_s": 8, "forcing": 10.0, "dt_integrate": 0.01,
                "dt_sample": 0.1, "method": "rk8"},
        observation={"every": 2, "noise_std": 0.1, "history_length": 4},
        n_traj=3, traj_len=500, burn_in=200, n_runs=3, window_start=20,
        dims={"d_s": 20, "d_o": 8, "d_h": 8, "n_landmark": 400},
        methods=["tensor-var", "3dvar", "4dvar", "4dvar-fd"], fourdvar_gradient="adjoint",
        var={"rtol": 1e-2, "tol": 1e-5, "max_iter": 100, "memory": 10, "shrinkage": 0.1})


PRESETS = {
    "l96-40": lambda: _l96(40, 60),
    "l96-80": lambda: _l96(80, 120),
    "ks-128": lambda: _ks(128),
    "ks-256": lambda: _ks(256),
    "l96-40-relnoise": lambda: _l96(40, 60).replace(
        name="l96-40-relnoise",
        observation={"every": 5, "noise_rel_std": 0.01, "history_length": 10}),
    "smoke": _smoke,
}


def preset(name: str, *, full_scale=False) -> ExperimentConfig:
    """Named configuration; ``full_scale`` restores 100 trajectories of 5000 steps."""
    if name not in PRESETS:
        raise InvalidSpecError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]()
    if full_scale:
        cfg = cfg.replace(n_traj=100, traj_len=5000)
    return cfg


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------------------
# data and model


@dataclass
class ExperimentData:
    train: list
    test: list
    training: object
    test_obs: list
    hashes: dict
    ospec: ObservationSpec


def generate_data(cfg: ExperimentConfig):
    spec = cfg.system_spec()
    seeds = cfg.seeds
    train = generate_trajectories(spec, cfg.n_traj, cfg.traj_len, cfg.burn_in,
                                  seed=seeds["train_data"])
    test = generate_trajectories(spec, cfg.n_runs, cfg.test_len, cfg.burn_in,
                                 seed=seeds["test_data"])
    return train, test


def prepare_data(cfg: ExperimentConfig, train=None, test=None) -> ExperimentData:
    if train is None or test is None:
        train, test = generate_data(cfg)
    if len(test) < cfg.n_runs or min(t.n_steps for t in test) < cfg.test_len:
        raise InvalidSpecError("test trajectories too few or too short for the configured runs")
    state_std = float(np.std(np.concatenate([t.states for t in train])))
    ospec = cfg.observation_spec(state_std)
    training = make_training_data(train, ospec, seed=cfg.seeds["train_obs"])
    test_obs = observe_trajectories(test, ospec, seed=cfg.seeds["test_obs"])
    hashes = {"train": io.array_digest(*(t.states for t in train)),
              "test": io.array_digest(*(t.states for t in test)),
              "train_obs": io.array_digest(*training.observations),
              "test_obs": io.array_digest(*test_obs)}
    return ExperimentData(train, test, training, test_obs, hashes, ospec)


def train_model(cfg: ExperimentConfig, data: ExperimentData) -> FeatureSpaceModel:
    seed = cfg.seeds["model"]
    dims = cfg.dims
    if cfg.feature_path == "kernel":
        mult = cfg.kernel_multiplier
        kernels = {k: KernelSpec(float(mult.get(k, 1.0)), "median")
                   for k in ("state", "obs", "hist")}
        model = train_kernel_model(
            data.training, kernels,
            KernelDims(dims["d_s"], dims["d_o"], dims["d_h"], dims.get("n_landmark", 2000)),
            lam=cfg.lam, seed=seed)
    else:
        deep = {"d_s": dims["d_s"], "d_o": dims["d_o"], "d_h": dims["d_h"], "lam": cfg.lam,
                **cfg.deep}
        if "hidden" in deep and deep["hidden"] is not None:
            deep["hidden"] = tuple(deep["hidden"])
        model = train_deep_model(data.training, DeepConfig(**deep), seed=seed)
    model.meta["dataset_hashes"] = {"train": data.hashes["train"],
                                    "train_obs": data.hashes["train_obs"]}
    return model


# ----------------------------------------------------------------------------
# runs


@dataclass
class RunRecord:
    method: str
    run: int
    start: int
    status: str = "ok"
    nrmse: float = math.nan
    nrmse_component: float = math.nan
    forecast_nrmse: float = math.nan
    iterations: float = math.nan
    wall_time: float = math.nan
    error: str = ""
    estimate: np.ndarray | None = None
    residuals: dict | None = None


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    runs: list
    summary: list
    timing: list
    manifest: dict = field(default_factory=dict)
    truth: dict = field(default_factory=dict)

    def row(self, method) -> dict:
        for r in self.summary:
            if r["method"] == method:
                return r
        raise KeyError(method)

    def mean(self, method, key="nrmse"):
        return self.row(method)[f"{key}_mean"]


def _var_config(cfg: ExperimentConfig, data: ExperimentData, gradient):
    v = cfg.var
    B = default_background_covariance(data.training.dyn_states, v.get("shrinkage", 0.1))
    R = np.eye(data.ospec.n_o) * max(data.ospec.noise_std, 1e-3) ** 2
    return VarConfig(B, R, window=cfg.window, memory=v.get("memory", 10),
                     max_iter=v.get("max_iter", 200), tol=v.get("tol", 1e-5),
                     rtol=v.get("rtol", 1e-2), gradient=gradient)


def _windows(cfg, obs, truth, m):
    """Consecutive windows of one run (a single one unless cycling)."""
    n = cfg.cycles if cfg.cyclic else 1
    starts = [cfg.window_start + k * (cfg.window + 1) for k in range(n)]
    return build_windows(obs, m, cfg.window, starts=starts, truth=truth)


def _var_residuals(states, obs, s_b, vcfg: VarConfig, ospec):
    eb = states[0] - s_b
    eo = obs - observation_operator(states, ospec)
    steps = {"background": np.zeros(len(states)), "dynamics": np.zeros(len(states)),
             "observation": np.einsum("ti,ij,tj->t", eo, vcfg.R_inv, eo)}
    steps["background"][0] = eb @ vcfg.B_inv @ eb
    return steps


def _method_runner(method, cfg, data, model, spec, ospec):
    """Return ``f(window, s_b) -> (states, iterations, forecast)``.

    ``forecast`` holds the states after the window (at least one step when
    cycling, so the next window has a background).
    """
    tau = cfg.horizon or int(cfg.cyclic)
    if method == "tensor-var":
        def run(w, s_b):
            res = assimilate(model, w, s_b, tau=tau,
                             diagonal_covariances=cfg.diagonal_covariances)
            return res.states, 1, res.forecast, res.meta["per_step"]
        return run
    gradient = "fd" if method == "4dvar-fd" else cfg.fourdvar_gradient
    vcfg = _var_config(cfg, data, gradient)

    def run(w, s_b):
        if method == "3dvar":
            states, trace = threedvar_window(w.observations, s_b, vcfg, spec, ospec,
                                             mode=cfg.threedvar_mode)
        else:
            states, trace = fourdvar(w.observations, s_b, vcfg, spec, ospec)
        ahead = propagate(spec, states[-1], tau + 1)[1:] if tau else None
        return states, trace.iterations, ahead, _var_residuals(states, w.observations, s_b,
                                                                vcfg, ospec)
    return run


_FAILURES = (TensorVarError, ArithmeticError, np.linalg.LinAlgError, ValueError)


def run_method(method, cfg, data, model, background=None):
    spec, ospec = cfg.system_spec(), data.ospec
    s_max, s_min = data.training.state_max, data.training.state_min
    s_b0 = data.training.state_mean if background is None else background
    m = ospec.history_length
    records = []
    try:
        runner = _method_runner(method, cfg, data, model, spec, ospec)
    except _FAILURES as exc:
        return [RunRecord(method, i, cfg.window_start, "failed", error=str(exc))
                for i in range(cfg.n_runs)]
    for i in range(cfg.n_runs):
        rec = RunRecord(method, i, cfg.window_start)
        try:
            windows = _windows(cfg, data.test_obs[i], data.test[i].states, m)
            s_b, parts, truth, its, elapsed, resid = s_b0, [], [], [], 0.0, None
            for w in windows:
                t0 = time.perf_counter()
                states, it, ahead, resid = runner(w, s_b)
                elapsed += time.perf_counter() - t0
                parts.append(states)
                truth.append(w.truth)
                its.append(it)
                if cfg.cyclic:
                    s_b = ahead[0]
            est, tru = np.concatenate(parts), np.concatenate(truth)
            rec.nrmse = nrmse(est, tru, s_max, s_min)
            rec.nrmse_component = nrmse_component(est, tru, s_max, s_min)
            if cfg.horizon > 0:
                t_end = windows[-1].start + cfg.window + 1
                fut = data.test[i].states[t_end:t_end + cfg.horizon]
                rec.forecast_nrmse = nrmse(ahead[:cfg.horizon], fut, s_max, s_min)
            rec.iterations = float(np.mean(its))
            rec.wall_time = elapsed / len(windows)
            rec.estimate, rec.residuals = est, resid
        except _FAILURES as exc:
            rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
            log.warning("%s run %d failed: %s", method, i, exc)
        records.append(rec)
    return records


def _stats(values):
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    return float(np.mean(v)), float(np.std(v))


def summarize(runs) -> tuple[list, list]:
    """Per-method aggregates (deterministic fields) and wall-time aggregates."""
    methods = list(dict.fromkeys(r.method for r in runs))
    summary, timing = [], []
    for m in methods:
        rows = [r for r in runs if r.method == m]
        ok = [r for r in rows if r.status == "ok"]
        n_mean, n_std = _stats([r.nrmse for r in ok])
        c_mean, c_std = _stats([r.nrmse_component for r in ok])
        f_mean, _ = _stats([r.forecast_nrmse for r in ok])
        i_mean, i_std = _stats([r.iterations for r in ok])
        summary.append({"method": m, "n_runs": len(rows), "n_ok": len(ok),
                        "n_failed": len(rows) - len(ok), "nrmse_mean": n_mean,
                        "nrmse_std": n_std, "nrmse_component_mean": c_mean,
                        "nrmse_component_std": c_std, "forecast_nrmse_mean": f_mean,
                        "iterations_mean": i_mean, "iterations_std": i_std})
        w_mean, w_std = _stats([r.wall_time for r in ok])
        timing.append({"method": m, "wall_time_mean": w_mean, "wall_time_std": w_std})
    return summary, timing


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(rows, fields):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def read_runs(path):
    """Parse ``runs.csv`` back into :class:`RunRecord` objects."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RunRecord(
                row["method"], int(row["run"]), int(row["start"]), row["status"],
                float(row["nrmse"]), float(row["nrmse_component"]),
                float(row["forecast_nrmse"]), float(row["iterations"]),
                float(row["wall_time"]), row["error"]))
    return out


def write_report(report: ExperimentReport, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    runs = [{f: getattr(r, f) for f in RUN_FIELDS} for r in report.runs]
    (out / "runs.csv").write_text(_csv_text(runs, RUN_FIELDS))
    (out / "summary.csv").write_text(_csv_text(report.summary, SUMMARY_FIELDS))
    (out / "timing.csv").write_text(_csv_text(report.timing,
                                              ("method", "wall_time_mean", "wall_time_std")))
    io.write_manifest(out / "manifest.json", report.manifest)
    if report.config.write_results:
        res = out / "results"
        res.mkdir(exist_ok=True)
        for r in report.runs:
            if r.estimate is None:
                continue
            io.write_result_csv(res / f"{r.method}_run{r.run:03d}.csv", r.estimate,
                                report.truth.get(r.run), r.residuals, r.method, r.run, r.start)
    if report.config.plots:
        from .plots import write_plots
        write_plots(report, out)


def run_experiment(cfg: ExperimentConfig, *, data: ExperimentData | None = None,
                   model: FeatureSpaceModel | None = None, out=None) -> ExperimentReport:
    """Generate (or reuse) data, train (or reuse) a model and run every method."""
    cfg.validate()
    t0 = time.perf_counter()
    data = data or prepare_data(cfg)
    t_data = time.perf_counter() - t0
    train_error = None
    if model is None and "tensor-var" in cfg.methods:
        try:
            model = train_model(cfg, data)
        except _FAILURES as exc:
            train_error = f"{type(exc).__name__}: {exc}"
            log.error("training failed: %s", exc)
    t_train = time.perf_counter() - t0 - t_data
    runs = []
    for method in cfg.methods:
        if method == "tensor-var" and model is None:
            runs += [RunRecord(method, i, cfg.window_start, "failed",
                               error=f"training failed: {train_error}")
                     for i in range(cfg.n_runs)]
            continue
        runs += run_method(method, cfg, data, model)
    summary, timing = summarize(runs)
    manifest = {
        "config": cfg.to_dict(), "seeds": cfg.seeds, "observation_spec": data.ospec.to_dict(),
        "dataset_hashes": data.hashes,
        "state_range": [data.training.state_min, data.training.state_max],
        "numpy": np.__version__, "data_seconds": t_data, "train_seconds": t_train,
        "model": None if model is None else {"path": model.path, "meta": model.meta},
        "notes": ["timings cover assimilation calls only",
                  "cyclic runs reuse the static background covariance"],
    }
    truth = {}
    for r in runs:
        if r.estimate is not None and r.run not in truth:
            truth[r.run] = data.test[r.run].states[r.start:r.start + len(r.estimate)]
    report = ExperimentReport(cfg, runs, summary, timing, manifest, truth)
    out = out if out is not None else cfg.out
    if out is not None:
        write_report(report, out)
    return report


def history_for(C, n_s) -> int:
    return int(round(C * math.log(n_s)))


def run_ablation(cfg: ExperimentConfig, axis: str, grid, *, data=None, out=None):
    """One experiment per grid value on shared data and seeds.

    ``history_length`` grid values are multipliers ``C`` with history
    ``round(C * ln n_s)``; ``feature_dim`` grid values are state feature
    dimensions.  Returns ``(rows, reports)`` where each row summarises one
    grid point and method.
    """
    if axis not in ABLATION_AXES:
        raise InvalidSpecError(f"unsupported ablation axis {axis!r}; choose from {ABLATION_AXES}")
    grid = list(grid)
    if not grid:
        raise InvalidSpecError("empty ablation grid")
    train = test = None
    if data is not None:
        train, test = data.train, data.test
    rows, reports = [], []
    for value in grid:
        if axis == "history_length":
            m = history_for(value, cfg.system["n_s"])
            point = cfg.replace(observation={**cfg.observation, "history_length": m})
            setting = {"C": value, "history_length": m, "d_s": cfg.dims["d_s"]}
        else:
            point = cfg.replace(dims={**cfg.dims, "d_s": int(value)})
            setting = {"C": None, "history_length": cfg.history_length, "d_s": int(value)}
        point.validate()
        if train is None:
            train, test = generate_data(point)
        sub = None if out is None else Path(out) / f"{axis}_{value}"
        report = run_experiment(point, data=prepare_data(point, train, test), out=sub)
        reports.append(report)
        for s in report.summary:
            rows.append({"axis": axis, "value": value, **setting, **s})
    if out is not None:
        fields = ("axis", "value", "C", "history_length", "d_s") + SUMMARY_FIELDS
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "ablation.csv").write_text(_csv_text(rows, fields))
    return rows, reports
