"""Minimal SVG line charts for experiment reports (no plotting dependency)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_chart(series: dict, title="", xlabel="", ylabel="", width=640, height=360) -> str:
    """Render ``{label: (x, y)}`` as an SVG document string."""
    pad_l, pad_r, pad_t, pad_b = 60, 120, 30, 45
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else [0, 1]
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()]) if series else [0, 1]
    ys = ys[np.isfinite(ys)] if np.size(ys) else np.array([0.0, 1.0])
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    y0, y1 = (float(np.min(ys)), float(np.max(ys))) if ys.size else (0.0, 1.0)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(v):
        return pad_l + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return pad_t + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{width / 2}" y="18" text-anchor="middle">{escape(title)}</text>',
           f'<text x="{pad_l + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}'
           '</text>',
           f'<text x="14" y="{pad_t + ph / 2}" transform="rotate(-90 14 {pad_t + ph / 2})" '
           f'text-anchor="middle">{escape(ylabel)}</text>']
    for v in np.linspace(y0, y1, 5):
        out.append(f'<text x="{pad_l - 4}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    for v in np.linspace(x0, x1, 5):
        out.append(f'<text x="{sx(v):.1f}" y="{pad_t + ph + 14}" text-anchor="middle">'
                   f'{v:.3g}</text>')
    for k, (label, (x, y)) in enumerate(series.items()):
        colour = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, y) if np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        ly = pad_t + 14 * (k + 1)
        out.append(f'<line x1="{width - pad_r + 8}" y1="{ly - 4}" x2="{width - pad_r + 24}" '
                   f'y2="{ly - 4}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{width - pad_r + 28}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_plots(report, out):
    """Per-run NRMSE by method, and truth vs analysis of component 0 for run 0."""
    out = Path(out)
    series = {}
    for method in dict.fromkeys(r.method for r in report.runs):
        rows = [r for r in report.runs if r.method == method]
        series[method] = ([r.run for r in rows], [r.nrmse for r in rows])
    (out / "nrmse_by_run.svg").write_text(line_chart(series, "NRMSE per run", "run", "NRMSE (%)"))
    first = [r for r in report.runs if r.run == 0 and r.estimate is not None]
    if first:
        start = first[0].start
        t = np.arange(start, start + len(first[0].estimate))
        truth = report.truth.get(0)
        traj = {r.method: (t, r.estimate[:, 0]) for r in first}
        if truth is not None:
            traj = {"truth": (t, np.asarray(truth)[:, 0]), **traj}
        (out / "analysis_run0.svg").write_text(
            line_chart(traj, "analysis, component 0, run 0", "time step", "state"))
