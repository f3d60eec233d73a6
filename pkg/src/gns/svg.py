"""Minimal hand-rolled SVG charts (polylines and bars) for reports.

Output is for documentation, so there is no plotting dependency: just
axes, ticks, a legend, and the data.
"""

from __future__ import annotations

import math

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 20, 30, 50


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-12 * step:
        out.append(t)
        t += step
    return out


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.1e}"
    return f"{v:g}"


def _frame(title: str, xlabel: str, ylabel: str, xlo, xhi, ylo, yhi):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'font-family="monospace" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle">{xlabel}</text>',
        f'<text x="16" y="{_H / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {_H / 2})">{ylabel}</text>',
        f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
        f'height="{_H - _MT - _MB}" fill="none" stroke="black"/>',
    ]

    def sx(x):
        return _ML + (x - xlo) / (xhi - xlo) * (_W - _ML - _MR)

    def sy(y):
        return _H - _MB - (y - ylo) / (yhi - ylo) * (_H - _MT - _MB)

    for t in _ticks(xlo, xhi):
        parts.append(f'<line x1="{sx(t):.1f}" y1="{_H - _MB}" x2="{sx(t):.1f}" '
                     f'y2="{_H - _MB + 4}" stroke="black"/>')
        parts.append(f'<text x="{sx(t):.1f}" y="{_H - _MB + 16}" '
                     f'text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(ylo, yhi):
        parts.append(f'<line x1="{_ML - 4}" y1="{sy(t):.1f}" x2="{_ML}" '
                     f'y2="{sy(t):.1f}" stroke="black"/>')
        parts.append(f'<text x="{_ML - 8}" y="{sy(t):.1f}" text-anchor="end" '
                     f'dominant-baseline="middle">{_fmt(t)}</text>')
    return parts, sx, sy


def line_chart(series: dict, title: str = "", xlabel: str = "timestep",
               ylabel: str = "value") -> str:
    """series maps name -> (xs, ys); returns an SVG document string."""
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys if math.isfinite(y)]
    if not xs_all:
        xs_all, ys_all = [0, 1], [0, 1]
    xlo, xhi = min(xs_all), max(xs_all)
    ylo, yhi = min(ys_all, default=0.0), max(ys_all, default=1.0)
    if ylo > 0 and ylo / max(yhi, 1e-300) > 0.5:
        ylo = 0.0
    pad = 0.05 * (yhi - ylo) or 1.0
    parts, sx, sy = _frame(title, xlabel, ylabel, xlo, max(xhi, xlo + 1e-12),
                           ylo, yhi + pad)
    for i, (name, (xs, ys)) in enumerate(sorted(series.items())):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys)
                       if math.isfinite(y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{_W - _MR - 6}" y="{_MT + 16 + 14 * i}" '
                     f'text-anchor="end" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def bar_chart(labels, series: dict, title: str = "", xlabel: str = "",
              ylabel: str = "value") -> str:
    """series maps name -> list of values aligned with labels."""
    values = [v for vals in series.values() for v in vals if math.isfinite(v)]
    yhi = max(values, default=1.0)
    parts, sx, sy = _frame(title, xlabel, ylabel, -0.5, len(labels) - 0.5,
                           0.0, yhi * 1.1 or 1.0)
    n_series = max(len(series), 1)
    group = (_W - _ML - _MR) / max(len(labels), 1)
    bar = group * 0.75 / n_series
    for i, (name, vals) in enumerate(sorted(series.items())):
        color = _COLORS[i % len(_COLORS)]
        for j, v in enumerate(vals):
            if not math.isfinite(v):
                continue
            x = sx(j) - group * 0.375 + i * bar
            y = sy(v)
            parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar:.1f}" '
                         f'height="{_H - _MB - y:.1f}" fill="{color}"/>')
        parts.append(f'<text x="{_W - _MR - 6}" y="{_MT + 16 + 14 * i}" '
                     f'text-anchor="end" fill="{color}">{name}</text>')
    for j, label in enumerate(labels):
        parts.append(f'<text x="{sx(j):.1f}" y="{_H - _MB + 30}" '
                     f'text-anchor="middle">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
