"""Minimal SVG line plots, so figures need no plotting library."""

from __future__ import annotations

from dataclasses import dataclass
from html import escape
from typing import Optional, Sequence

import numpy as np

__all__ = ["Series", "line_plot", "error_plot", "input_plot"]

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


@dataclass
class Series:
    label: str
    t: np.ndarray
    y: np.ndarray
    color: Optional[str] = None
    dashed: bool = False
    step: bool = False


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    span = hi - lo
    raw = span / n
    mag = 10 ** np.floor(np.log10(raw))
    width = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    return np.arange(np.ceil(lo / width) * width, hi + 1e-9 * span, width)


def line_plot(series: Sequence[Series], title: str = "", xlabel: str = "t", ylabel: str = "",
              width: int = 640, height: int = 400) -> str:
    """Render ``series`` as an SVG document string."""
    left, right, top, bottom = 70, 150, 36, 48
    pw, ph = width - left - right, height - top - bottom
    finite = [s for s in series if len(s.t)]
    if not finite:
        raise ValueError("nothing to plot")
    ts = np.concatenate([np.asarray(s.t, float) for s in finite])
    ys = np.concatenate([np.asarray(s.y, float) for s in finite])
    ys = ys[np.isfinite(ys)]
    x0, x1 = float(ts.min()), float(ts.max())
    y0, y1 = (float(ys.min()), float(ys.max())) if ys.size else (-1.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    pad = 0.05 * (y1 - y0) if y1 > y0 else max(1.0, abs(y0))
    y0, y1 = y0 - pad, y1 + pad

    def X(t):
        return left + (np.asarray(t, float) - x0) / (x1 - x0) * pw

    def Y(y):
        return top + (y1 - np.asarray(y, float)) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for tx in _ticks(x0, x1):
        out.append(f'<line x1="{X(tx):.1f}" y1="{top + ph}" x2="{X(tx):.1f}" y2="{top + ph + 5}" stroke="#444"/>')
        out.append(f'<text x="{X(tx):.1f}" y="{top + ph + 18}" text-anchor="middle">{tx:g}</text>')
    for ty in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{Y(ty):.1f}" x2="{left + pw}" y2="{Y(ty):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 8}" y="{Y(ty) + 4:.1f}" text-anchor="end">{ty:.4g}</text>')
    for i, s in enumerate(finite):
        color = s.color or PALETTE[i % len(PALETTE)]
        t, y = np.asarray(s.t, float), np.asarray(s.y, float)
        if s.step and len(t) > 1:
            t = np.repeat(t, 2)[1:]
            y = np.repeat(y, 2)[:-1]
        keep = np.isfinite(y)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(X(t[keep]), Y(y[keep])))
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{pts}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 34}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{left + pw + 40}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2})">{escape(ylabel)}</text>')
    if title:
        out.append(f'<text x="{left + pw / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append("</svg>")
    return "\n".join(out)


def error_plot(traces: Sequence, labels: Sequence[str], title: str = "") -> str:
    """Tracking error of each trace inside the ``+-psi`` envelope of the first.

    Scalar outputs show the signed error, vector outputs its norm.
    """
    first = traces[0]
    series = [Series("+psi", first.t, first.funnel_radius, "#000", dashed=True),
              Series("-psi", first.t, -first.funnel_radius, "#000", dashed=True)]
    for tr, label in zip(traces, labels):
        e = tr.y - tr.yref
        series.append(Series(label, tr.t, e[:, 0] if e.shape[1] == 1 else tr.err_norm))
    return line_plot(series, title, "t", "e(t)")


def input_plot(traces: Sequence, labels: Sequence[str], title: str = "") -> str:
    series = []
    for tr, label in zip(traces, labels):
        for j in range(tr.u.shape[1]):
            name = label if tr.u.shape[1] == 1 else f"{label} u{j + 1}"
            series.append(Series(name, tr.t, tr.u[:, j], step=True))
    return line_plot(series, title, "t", "u(t)")
