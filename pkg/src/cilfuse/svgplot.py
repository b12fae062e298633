"""Minimal deterministic SVG line plots (no timestamps, no generated ids)."""

from __future__ import annotations

from .errors import SpecError

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 160, 40, 55  # margins: left/right/top/bottom


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def line_plot(series: list[tuple[str, list[float], list[float]]], title: str,
              xlabel: str, ylabel: str) -> str:
    """Render labeled polyline series with axes and a legend.

    ``series`` is a list of (label, xs, ys); all coordinates must be finite.
    """
    if not series:
        raise SpecError("a plot needs at least one series")
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        raise SpecError("a plot needs at least one point")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(x: float) -> float:
        return _ML + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y: float) -> float:
        return _MT + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{_ML}" y1="{_MT + ph}" x2="{_ML + pw}" y2="{_MT + ph}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ph}" stroke="black"/>',
        f'<text x="{_ML + pw // 2}" y="{_H - 12}" text-anchor="middle">{xlabel}</text>',
        f'<text x="18" y="{_MT + ph // 2}" text-anchor="middle" '
        f'transform="rotate(-90 18 {_MT + ph // 2})">{ylabel}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        out.append(
            f'<text x="{_fmt(px(xv))}" y="{_MT + ph + 16}" text-anchor="middle" '
            f'font-size="10">{xv:.4g}</text>'
        )
        out.append(
            f'<text x="{_ML - 6}" y="{_fmt(py(yv) + 4)}" text-anchor="end" font-size="10">{yv:.4g}</text>'
        )
        out.append(
            f'<line x1="{_ML}" y1="{_fmt(py(yv))}" x2="{_ML + pw}" y2="{_fmt(py(yv))}" '
            f'stroke="#dddddd" stroke-width="0.5"/>'
        )
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="2.5" fill="{color}"/>')
        ly = _MT + 14 * i
        out.append(f'<line x1="{_ML + pw + 10}" y1="{ly}" x2="{_ML + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{_ML + pw + 35}" y="{ly + 4}" font-size="10">{label}</text>')
    out.append("</svg>")
    return "\n".join(out)
