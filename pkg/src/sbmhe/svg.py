"""Minimal SVG line charts: axes with ticks, polyline series, legend."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["Series", "line_chart", "write_svg"]

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


class Series:
    def __init__(self, label, x, y, markers=False):
        self.label = str(label)
        self.x = np.asarray(x, float).reshape(-1)
        self.y = np.asarray(y, float).reshape(-1)
        if self.x.shape != self.y.shape:
            raise ValueError("x and y must have the same length")
        self.markers = markers


def _nice_ticks(lo, hi, count=5):
    # keep the span resolvable in double precision, otherwise steps vanish in rounding
    span = max(hi - lo, 1e-9 * max(abs(lo), abs(hi)), 1e-12)
    if hi - lo < span:
        mid = 0.5 * (lo + hi)
        lo, hi = mid - span / 2, mid + span / 2
    raw = span / count
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=10 * mag)
    k0, k1 = math.floor(lo / step), math.ceil(hi / step)
    digits = max(0, 2 - math.floor(math.log10(step)))
    # the last tick reaches hi so every point lies inside the frame
    return [round(k * step, digits) for k in range(k0, k1 + 1)]


def _num(v) -> str:
    return f"{v:.2f}"


def _label(v) -> str:
    return f"{v:.6g}"


def line_chart(series, title="", xlabel="", ylabel="", width=720, height=400) -> str:
    """Render ``series`` (a list of :class:`Series`) as an SVG document string.

    Non-finite points are dropped.  Output depends only on the inputs.
    """
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = np.concatenate([s.x[np.isfinite(s.x) & np.isfinite(s.y)] for s in series]) if series else np.array([])
    ys = np.concatenate([s.y[np.isfinite(s.x) & np.isfinite(s.y)] for s in series]) if series else np.array([])
    if xs.size == 0:
        xs, ys = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    xt = _nice_ticks(float(xs.min()), float(xs.max()))
    yt = _nice_ticks(float(ys.min()), float(ys.max()))
    x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for v in xt:
        x = px(v)
        out.append(f'<line x1="{_num(x)}" y1="{top + ph}" x2="{_num(x)}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_num(x)}" y="{top + ph + 18}" text-anchor="middle">{_label(v)}</text>')
    for v in yt:
        y = py(v)
        out.append(f'<line x1="{left - 5}" y1="{_num(y)}" x2="{left}" y2="{_num(y)}" stroke="black"/>')
        out.append(f'<line x1="{left}" y1="{_num(y)}" x2="{left + pw}" y2="{_num(y)}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{left - 8}" y="{_num(y + 4)}" text-anchor="end">{_label(v)}</text>')
    if xlabel:
        out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')

    for i, s in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        ok = np.isfinite(s.x) & np.isfinite(s.y)
        pts = " ".join(f"{_num(px(a))},{_num(py(b))}" for a, b in zip(s.x[ok], s.y[ok]))
        if pts:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if s.markers:
            for a, b in zip(s.x[ok], s.y[ok]):
                out.append(f'<circle cx="{_num(px(a))}" cy="{_num(py(b))}" r="3" fill="{color}"/>')
        ly = top + 16 + 16 * i
        out.append(f'<line x1="{left + pw - 120}" y1="{ly - 4}" x2="{left + pw - 100}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 95}" y="{ly}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, svg: str) -> None:
    with open(path, "w") as fh:
        fh.write(svg)
