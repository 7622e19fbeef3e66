"""Command-line entry point: ``tensorvar <subcommand> [options]``.

Subcommands share ``--preset``, ``--config`` (JSON file with any
:class:`~tensorvar.harness.ExperimentConfig` keys, optionally naming a
``preset`` to start from), ``--seed`` and ``--out``.

    generate    write train/test trajectories and observations to OUT/data
    train       fit a model (``--path kernel|deep``) and write OUT/model.tvmd
    assimilate  run Tensor-Var on the test windows
    baseline    run ``--method 3dvar|4dvar`` on the same windows
    ablate      sweep ``--axis history_length|feature_dim`` over ``--grid``
    report      recompute summary.csv from runs.csv and draw SVG plots
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io
from .dynamics import lyapunov_time
from .errors import TensorVarError
from .harness import (ABLATION_AXES, ExperimentConfig, ExperimentReport, prepare_data,
                      preset, read_runs, run_ablation, run_experiment, summarize, train_model,
                      write_report, PRESETS)

DEFAULT_GRIDS = {"history_length": [0, 1, 2, 4, 8], "feature_dim": [20, 40, 60, 120]}


def _config(args) -> ExperimentConfig:
    if args.config:
        d = json.loads(Path(args.config).read_text())
        if args.preset and "preset" not in d:
            d["preset"] = args.preset
        cfg = ExperimentConfig.from_dict(d)
    else:
        cfg = preset(args.preset or "l96-40", full_scale=args.full_scale)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if getattr(args, "path", None):
        changes["feature_path"] = args.path
    if getattr(args, "plots", False):
        changes["plots"] = True
    return cfg.replace(**changes) if changes else cfg


def _out(cfg) -> Path:
    out = Path(cfg.out or f"runs/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_paths(out):
    d = out / "data"
    return d / "train.tvar", d / "test.tvar", d / "train_obs.tvar", d / "test_obs.tvar"


def _load_or_prepare(cfg, out):
    train_p, test_p = _data_paths(out)[:2]
    if train_p.exists() and test_p.exists():
        train, test = io.load_trajectories(train_p), io.load_trajectories(test_p)
        if train[0].spec == cfg.system_spec() and len(train) == cfg.n_traj:
            return prepare_data(cfg, train, test)
        logging.warning("stored data do not match the config; regenerating")
    return prepare_data(cfg)


def cmd_generate(args):
    cfg = _config(args)
    out = _out(cfg)
    data = prepare_data(cfg)
    train_p, test_p, tobs_p, sobs_p = _data_paths(out)
    train_p.parent.mkdir(exist_ok=True)
    seeds = cfg.seeds
    io.save_trajectories(train_p, data.train, seed=seeds["train_data"])
    io.save_trajectories(test_p, data.test, seed=seeds["test_data"])
    ospec = data.ospec
    io.save_observations(tobs_p, data.training.observations, ospec, seed=seeds["train_obs"])
    io.save_observations(sobs_p, data.test_obs, ospec, seed=seeds["test_obs"])
    print(f"wrote {len(data.train)} training and {len(data.test)} test trajectories to "
          f"{train_p.parent}")
    t_lyap = lyapunov_time(cfg.system_spec(), data.train[0].states[0], 200)
    print(f"empirical Lyapunov time {t_lyap:.3g} ({t_lyap / cfg.system_spec().dt_sample:.3g} "
          "samples)")


def cmd_train(args):
    cfg = _config(args)
    out = _out(cfg)
    data = _load_or_prepare(cfg, out)
    model = train_model(cfg, data)
    path = out / "model.tvmd"
    io.save_model(path, model)
    print(f"wrote {cfg.feature_path} model (d_s={model.d_s}) to {path}")


def _run(cfg, methods, out, args):
    data = _load_or_prepare(cfg, out)
    model = None
    if "tensor-var" in methods:
        path = out / "model.tvmd"
        model = io.load_model(path) if path.exists() and not args.retrain else None
    report = run_experiment(cfg.replace(methods=methods, out=None), data=data, model=model)
    if (out / "runs.csv").exists():
        # keep other methods' rows so assimilate and baseline runs share one report
        kept = [r for r in read_runs(out / "runs.csv") if r.method not in methods]
        report.runs = kept + report.runs
        report.summary, report.timing = summarize(report.runs)
    write_report(report, out)
    for row in report.summary:
        print(f"{row['method']:>10}: NRMSE {row['nrmse_mean']:.3f} +- {row['nrmse_std']:.3f} "
              f"(per component {row['nrmse_component_mean']:.3f}), "
              f"iterations {row['iterations_mean']:.1f}, failed {row['n_failed']}")


def cmd_assimilate(args):
    cfg = _config(args)
    _run(cfg, ["tensor-var"], _out(cfg), args)


def cmd_baseline(args):
    cfg = _config(args)
    if args.method == "4dvar" and args.gradient:
        cfg = cfg.replace(fourdvar_gradient=args.gradient)
    _run(cfg, [args.method], _out(cfg), args)


def cmd_ablate(args):
    cfg = _config(args)
    grid = args.grid or DEFAULT_GRIDS[args.axis]
    if args.axis == "feature_dim":
        grid = [int(g) for g in grid]
    methods = args.methods.split(",") if args.methods else ["tensor-var"]
    rows, _ = run_ablation(cfg.replace(methods=methods), args.axis, grid, out=_out(cfg))
    for r in rows:
        print(f"{args.axis}={r['value']}: m={r['history_length']} d_s={r['d_s']} "
              f"{r['method']} NRMSE {r['nrmse_mean']:.3f} +- {r['nrmse_std']:.3f}")


def cmd_report(args):
    out = Path(args.out or "runs/l96-40")
    runs = read_runs(out / "runs.csv")
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = ExperimentConfig.from_dict(manifest["config"])
    summary, timing = summarize(runs)
    report = ExperimentReport(cfg.replace(plots=args.plots, write_results=False), runs,
                              summary, timing, manifest)
    write_report(report, out)
    print((out / "summary.csv").read_text(), end="")


def build_parser():
    p = argparse.ArgumentParser(prog="tensorvar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (default runs/<preset>)")
        sp.add_argument("--full-scale", action="store_true",
                        help="100 trajectories of 5000 steps instead of the desk-scale set")
        sp.add_argument("--plots", action="store_true", help="also write SVG plots")
        sp.add_argument("--retrain", action="store_true", help="ignore a stored model")
        return sp

    common(sub.add_parser("generate", help="generate trajectories and observations"))
    sp = common(sub.add_parser("train", help="train a feature-space model"))
    sp.add_argument("--path", choices=("kernel", "deep"), default=None)
    sp = common(sub.add_parser("assimilate", help="run Tensor-Var on the test windows"))
    sp.add_argument("--path", choices=("kernel", "deep"), default=None)
    sp = common(sub.add_parser("baseline", help="run a variational baseline"))
    sp.add_argument("--method", choices=("3dvar", "4dvar", "4dvar-fd"), required=True)
    sp.add_argument("--gradient", choices=("adjoint", "fd"))
    sp = common(sub.add_parser("ablate", help="ablation sweep"))
    sp.add_argument("--axis", choices=ABLATION_AXES, required=True)
    sp.add_argument("--grid", type=float, nargs="+")
    sp.add_argument("--methods", help="comma-separated methods (default tensor-var)")
    sp.add_argument("--path", choices=("kernel", "deep"), default=None)
    sp = sub.add_parser("report", help="recompute aggregates from runs.csv")
    sp.add_argument("--out", help="experiment directory")
    sp.add_argument("--plots", action="store_true")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "assimilate": cmd_assimilate,
            "baseline": cmd_baseline, "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except TensorVarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
