"""End-to-end acceptance checks on the named presets.

Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line to the terminal.
These run the desk-scale presets and take several minutes in total.
"""

import subprocess
import sys
import time
from pathlib import Path

import pytest

from tensorvar.harness import prepare_data, preset, run_ablation, run_experiment

pytestmark = pytest.mark.acceptance

NRMSE_LIMIT = 15.0
RUNTIME_LIMIT = 15 * 60
SPEED_RATIO = 0.5
MIN_4DVAR_ITERS = 10
PROPERTY_LIMIT = 5 * 60


def report_line(capsys, n, ok, text):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {text}")


@pytest.fixture(scope="module")
def l96_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("l96-40")


@pytest.fixture(scope="module")
def l96(l96_dir):
    t0 = time.perf_counter()
    report = run_experiment(preset("l96-40"), out=l96_dir)
    return report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ks():
    return run_experiment(preset("ks-128"))


def test_1_twin_accuracy(l96, capsys):
    report, seconds = l96
    row = report.row("tensor-var")
    comp, literal = row["nrmse_component_mean"], row["nrmse_mean"]
    ok = comp <= NRMSE_LIMIT and seconds <= RUNTIME_LIMIT and row["n_ok"] == 20
    report_line(capsys, 1, ok,
                f"Tensor-Var NRMSE {comp:.2f}% per component (limit {NRMSE_LIMIT}%), "
                f"{literal:.2f}% as full-state norm; {row['n_ok']}/20 runs ok; "
                f"experiment {seconds:.0f}s (limit {RUNTIME_LIMIT}s)")
    assert ok


def test_2_ranking(l96, ks, capsys):
    lines, ok = [], True
    for name, rep in (("L96-40", l96[0]), ("KS-128", ks)):
        tv, fd, td = (rep.mean(m) for m in ("tensor-var", "4dvar", "3dvar"))
        good = tv < fd < td
        ok &= good
        lines.append(f"{name} tensor-var {tv:.2f} < 4dvar {fd:.2f} < 3dvar {td:.2f}: {good}")
    report_line(capsys, 2, ok, "; ".join(lines))
    assert ok


def test_3_speed(l96, l96_dir, capsys):
    report, _ = l96
    import csv
    with open(Path(l96_dir) / "timing.csv") as fh:
        wall = {r["method"]: float(r["wall_time_mean"]) for r in csv.DictReader(fh)}
    tv_it = report.row("tensor-var")["iterations_mean"]
    fd_it = report.row("4dvar-fd")["iterations_mean"]
    ratio = wall["tensor-var"] / wall["4dvar-fd"]
    ok = ratio <= SPEED_RATIO and tv_it == 1 and fd_it >= MIN_4DVAR_ITERS
    report_line(capsys, 3, ok,
                f"wall time per window {wall['tensor-var']:.4f}s vs finite-difference 4D-Var "
                f"{wall['4dvar-fd']:.3f}s (ratio {ratio:.4f}, limit {SPEED_RATIO}); iterations "
                f"{tv_it:.0f} vs {fd_it:.1f} (need >= {MIN_4DVAR_ITERS})")
    assert ok


def test_4_ablation(capsys):
    cfg = preset("l96-40").replace(methods=["tensor-var"])
    data = prepare_data(cfg)
    hist, _ = run_ablation(cfg, "history_length", [0, 4], data=data)
    dims, _ = run_ablation(cfg, "feature_dim", [20, 60], data=data)
    h0, h4 = (r["nrmse_mean"] for r in hist)
    d20, d60 = (r["nrmse_mean"] for r in dims)
    ok = h0 > h4 and d20 > d60
    report_line(capsys, 4, ok,
                f"history C=0 (m=0) {h0:.2f} > C=4 (m={hist[1]['history_length']}) {h4:.2f}; "
                f"d_s=20 {d20:.2f} > d_s=60 {d60:.2f}")
    assert ok


PROPERTY_SELECTION = [
    "tests/test_dynamics.py", "tests/test_observation.py", "tests/test_kernel.py",
    "tests/test_cme.py", "tests/test_assimilation.py", "tests/test_baselines.py",
    "tests/test_deep_features.py",
]
NEEDS_MODEL = "not TestKernelModel and not TestTraining"


def test_5_property_suite(capsys):
    root = Path(__file__).resolve().parent.parent
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           "-k", NEEDS_MODEL, *PROPERTY_SELECTION],
                          cwd=root, capture_output=True, text=True)
    seconds = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and seconds < PROPERTY_LIMIT
    report_line(capsys, 5, ok, f"property suite '{tail}' in {seconds:.0f}s "
                f"(limit {PROPERTY_LIMIT}s)")
    assert ok, proc.stdout[-3000:]


def test_6_determinism(l96, l96_dir, tmp_path, capsys):
    run_experiment(preset("l96-40"), out=tmp_path)
    a = (Path(l96_dir) / "summary.csv").read_bytes()
    b = (tmp_path / "summary.csv").read_bytes()
    ok = a == b
    report_line(capsys, 6, ok, f"l96-40 rerun summary.csv byte-identical ({len(a)} bytes)")
    assert ok
