"""Static SVG charts for sweep and pruning result CSVs."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .exceptions import SchemaError
from .experiments import PRUNE_HEADER, SWEEP_HEADER

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=170, top=40, bottom=55)
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]

_NUMERIC = {
    "sweep": {"lambda": float, "mean_accuracy": float, "ci_halfwidth": float, "n_runs": int, "n_failed": int},
    "prune": {"fraction": float, "mean_accuracy": float, "ci_halfwidth": float, "n_runs": int},
}


def read_results_csv(path):
    """Parse a sweep or prune CSV; returns ``(kind, rows)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file", line=1)
        if header == SWEEP_HEADER:
            kind = "sweep"
        elif header == PRUNE_HEADER:
            kind = "prune"
        else:
            raise SchemaError(f"{path}: unrecognised header {header}", line=1)
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise SchemaError(f"expected {len(header)} fields, got {len(raw)}", line=lineno)
            row = dict(zip(header, raw))
            for key, conv in _NUMERIC[kind].items():
                try:
                    row[key] = conv(row[key])
                except ValueError:
                    raise SchemaError(f"field {key!r} is not a number: {row[key]!r}", line=lineno) from None
            rows.append(row)
    if not rows:
        raise SchemaError(f"{path}: no data rows", line=2)
    return kind, rows


class _Axis:
    def __init__(self, lo, hi, pixel_lo, pixel_hi, log=False):
        if log:
            lo, hi = math.log10(lo), math.log10(hi)
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.05 * (hi - lo)
        self.lo, self.hi = lo - pad, hi + pad
        self.p0, self.p1 = pixel_lo, pixel_hi
        self.log = log

    def __call__(self, v):
        if self.log:
            v = math.log10(v)
        return self.p0 + (v - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)

    def ticks(self, n=5):
        out = []
        for i in range(n + 1):
            v = self.lo + (self.hi - self.lo) * i / n
            out.append(10**v if self.log else v)
        return out


def _chart(series, title, xlabel, ylabel, xlog=False):
    """``series`` maps label -> list of (x, y, halfwidth)."""
    xs = [p[0] for pts in series.values() for p in pts]
    ys = []
    for pts in series.values():
        for _, y, h in pts:
            if math.isnan(y):
                continue
            h = 0.0 if math.isnan(h) else h
            ys += [y - h, y + h]
    if not ys:
        ys = [0.0, 1.0]
    left, right = MARGIN["left"], WIDTH - MARGIN["right"]
    top, bottom = MARGIN["top"], HEIGHT - MARGIN["bottom"]
    ax = _Axis(min(xs), max(xs), left, right, xlog)
    ay = _Axis(min(ys), max(ys), bottom, top)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{bottom}" x2="{left}" y2="{top}" stroke="black"/>',
        f'<text x="{(left + right) / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="18" y="{(top + bottom) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(top + bottom) / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for v in ax.ticks():
        x = ax(v)
        out.append(f'<line x1="{x:.1f}" y1="{bottom}" x2="{x:.1f}" y2="{bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{bottom + 18}" text-anchor="middle">{v:.3g}</text>')
    for v in ay.ticks():
        y = ay(v)
        out.append(f'<line x1="{left - 5}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{v:.4f}</text>')

    for k, (label, pts) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        pts = sorted(pts)
        good = [(x, y, h) for x, y, h in pts if not math.isnan(y)]
        out.append(f'<g class="series" data-label="{escape(label)}">')
        if len(good) > 1:
            path = " ".join(f"{ax(x):.1f},{ay(y):.1f}" for x, y, _ in good)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y, h in good:
            px, py = ax(x), ay(y)
            if not math.isnan(h) and h > 0:
                out.append(
                    f'<line class="errorbar" x1="{px:.1f}" y1="{ay(y - h):.1f}" x2="{px:.1f}" '
                    f'y2="{ay(y + h):.1f}" stroke="{color}"/>'
                )
            out.append(f'<circle class="point" cx="{px:.1f}" cy="{py:.1f}" r="3" fill="{color}"/>')
        out.append("</g>")
        ly = top + 10 + 18 * k
        out.append(f'<rect x="{right + 15}" y="{ly - 8}" width="12" height="12" fill="{color}"/>')
        out.append(f'<text x="{right + 32}" y="{ly + 2}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def sweep_svg(rows):
    series = {}
    for r in rows:
        label = f"{r['method']} ({r['penalty']})"
        series.setdefault(label, []).append((r["lambda"], r["mean_accuracy"], r["ci_halfwidth"]))
    xlog = all(r["lambda"] > 0 for r in rows)
    return _chart(series, "Average accuracy vs penalty strength", "lambda", "average accuracy", xlog)


def prune_svg(rows):
    series = {}
    for r in rows:
        series.setdefault(r["criterion"], []).append((r["fraction"], r["mean_accuracy"], r["ci_halfwidth"]))
    return _chart(series, "Accuracy after unstructured pruning", "fraction of weights zeroed", "accuracy")


def render_plots(results_csv, out_dir=None):
    """Write one SVG next to ``results_csv`` (or into ``out_dir``); returns its path."""
    results_csv = Path(results_csv)
    kind, rows = read_results_csv(results_csv)
    svg = sweep_svg(rows) if kind == "sweep" else prune_svg(rows)
    out_dir = results_csv.parent if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / (results_csv.stem + ".svg")
    out.write_text(svg)
    return out
