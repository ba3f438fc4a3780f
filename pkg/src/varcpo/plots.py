"""Static SVG learning-curve panels from metrics CSV files.

Output is plain handwritten SVG with fixed number formatting, so identical
inputs always produce identical bytes.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PANELS = (
    ("reward_return", "Reward return"),
    ("cost_return", "Expected cost return"),
    ("cost_p95", "95th percentile cost return"),
    ("ice_visitation", "Ice tile visitation"),
)
X_COLUMN = "env_steps"
COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")

WIDTH, HEIGHT = 520, 340
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 50


class PlotInputError(ValueError):
    pass


def read_metrics(path) -> dict[str, np.ndarray]:
    """Columns of a metrics CSV as float arrays; blank cells become NaN."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = reader.fieldnames or []
    if not header or not rows:
        raise PlotInputError(f"{path}: no metrics rows")
    missing = [c for c in (X_COLUMN,) + tuple(p for p, _ in PANELS) if c not in header]
    if missing:
        raise PlotInputError(f"{path}: missing column(s) {', '.join(missing)}")
    out = {}
    for col in (X_COLUMN,) + tuple(p for p, _ in PANELS):
        out[col] = np.array([float(r[col]) if r[col] not in ("", None) else math.nan for r in rows])
    return out


def band(runs: list[dict], column: str):
    """Per-row mean and sample standard deviation across runs (zero for one run)."""
    n = min(len(r[column]) for r in runs)
    data = np.stack([r[column][:n] for r in runs])
    mean = data.mean(axis=0)
    std = data.std(axis=0, ddof=1) if len(runs) > 1 else np.zeros(n)
    return mean, std


def _nice_ticks(lo, hi, count=5):
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return [0.0, 1.0]
    if hi <= lo:
        hi = lo + (abs(lo) if lo else 1.0)
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + step * 0.5:
        ticks.append(round(v, 12))
        v += step
    return ticks


def _fmt(v):
    return f"{v:.2f}"


def _polyline(xs, ys, sx, sy):
    pts = [f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys) if math.isfinite(y)]
    return " ".join(pts)


def render_panel(title: str, groups: list[tuple[str, np.ndarray, np.ndarray, np.ndarray]]) -> str:
    """SVG for one panel; ``groups`` holds ``(label, x, mean, std)``."""
    xs = np.concatenate([g[1] for g in groups])
    lows = np.concatenate([g[2] - g[3] for g in groups])
    highs = np.concatenate([g[2] + g[3] for g in groups])
    finite = np.isfinite(lows) & np.isfinite(highs)
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = (float(lows[finite].min()), float(highs[finite].max())) if finite.any() else (0.0, 1.0)
    yt = _nice_ticks(y_lo, y_hi)
    xt = _nice_ticks(x_lo, x_hi)
    y_lo, y_hi = min(yt[0], y_lo), max(yt[-1], y_hi)
    x_lo, x_hi = min(xt[0], x_lo), max(xt[-1], x_hi)
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x_lo) / ((x_hi - x_lo) or 1.0) * pw

    def sy(y):
        return TOP + ph - (y - y_lo) / ((y_hi - y_lo) or 1.0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in yt:
        if y_lo <= t <= y_hi:
            y = _fmt(sy(t))
            out.append(f'<line x1="{LEFT}" y1="{y}" x2="{LEFT + pw}" y2="{y}" stroke="#dddddd"/>')
            out.append(f'<text x="{LEFT - 6}" y="{y}" text-anchor="end" dominant-baseline="middle">{t:.4g}</text>')
    for t in xt:
        if x_lo <= t <= x_hi:
            x = _fmt(sx(t))
            out.append(f'<text x="{x}" y="{TOP + ph + 16}" text-anchor="middle">{t:.4g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 10}" text-anchor="middle">environment steps</text>')
    for i, (label, x, mean, std) in enumerate(groups):
        color = COLORS[i % len(COLORS)]
        ok = np.isfinite(mean)
        if ok.any():
            upper = [f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x[ok], (mean + std)[ok])]
            lower = [f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x[ok], (mean - std)[ok])]
            out.append(f'<polygon points="{" ".join(upper + lower[::-1])}" fill="{color}" '
                       f'fill-opacity="0.2" stroke="none"/>')
            out.append(f'<polyline points="{_polyline(x, mean, sx, sy)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = TOP + 14 + 14 * i
        out.append(f'<line x1="{LEFT + 8}" y1="{ly}" x2="{LEFT + 24}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + 28}" y="{ly}" dominant-baseline="middle">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_groups(groups: dict[str, list], out_dir) -> list[Path]:
    """Write one SVG per panel comparing labelled groups of seed CSVs."""
    if not groups or any(not paths for paths in groups.values()):
        raise PlotInputError("no metrics files given")
    loaded = {label: [read_metrics(p) for p in paths] for label, paths in groups.items()}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for column, title in PANELS:
        curves = []
        for label, runs in loaded.items():
            mean, std = band(runs, column)
            x = runs[0][X_COLUMN][:len(mean)]
            curves.append((label, x, mean, std))
        path = out_dir / f"{column}.svg"
        path.write_text(render_panel(title, curves))
        written.append(path)
    return written


def plot_runs(paths, out_dir, label: str = "runs") -> list[Path]:
    return plot_groups({label: list(paths)}, out_dir)
