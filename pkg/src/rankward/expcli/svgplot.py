"""Minimal line/scatter plots written straight to SVG."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from html import escape
from pathlib import Path

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


@dataclass
class Series:
    label: str
    xs: list[float]
    ys: list[float]
    marker: bool = True


@dataclass
class Plot:
    title: str
    xlabel: str
    ylabel: str
    series: list[Series] = field(default_factory=list)
    hlines: list[tuple[float, str]] = field(default_factory=list)
    log_x: bool = False
    width: int = 560
    height: int = 380

    def add(self, label: str, xs, ys, marker: bool = True) -> None:
        self.series.append(Series(label, [float(x) for x in xs], [float(y) for y in ys], marker))


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    t = start
    while t <= hi + 1e-12 * step:
        out.append(round(t, 12))
        t += step
    return out


def _fmt(v: float) -> str:
    if v != 0 and (abs(v) >= 1e4 or abs(v) < 1e-2):
        return f"{v:.1e}"
    return f"{v:g}"


def render(plot: Plot) -> str:
    left, right, top, bottom = 70, 150, 36, 50
    w, h = plot.width, plot.height
    pw, ph = w - left - right, h - top - bottom
    tx = (lambda x: math.log10(x)) if plot.log_x else (lambda x: x)
    pts = [(tx(x), y) for s in plot.series for x, y in zip(s.xs, s.ys) if math.isfinite(y) and (x > 0 or not plot.log_x)]
    ys = [p[1] for p in pts] + [y for y, _ in plot.hlines]
    xs = [p[0] for p in pts]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(x):
        return left + (tx(x) - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{left + pw / 2}" y="20" text-anchor="middle" font-size="13">{escape(plot.title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for t in _ticks(y0, y1):
        y = sy(t)
        out.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
    xticks = _ticks(x0, x1)
    for t in xticks:
        x = left + (t - x0) / (x1 - x0) * pw
        label = _fmt(10**t) if plot.log_x else _fmt(t)
        out.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 4}" stroke="#333"/>')
        out.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle">{label}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{h - 10}" text-anchor="middle">{escape(plot.xlabel)}</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2}" text-anchor="middle" transform="rotate(-90 16 {top + ph / 2})">{escape(plot.ylabel)}</text>'
    )
    for y, label in plot.hlines:
        out.append(f'<line x1="{left}" y1="{sy(y):.1f}" x2="{left + pw}" y2="{sy(y):.1f}" stroke="#777" stroke-dasharray="5,4"/>')
        out.append(f'<text x="{left + pw - 4}" y="{sy(y) - 4:.1f}" text-anchor="end" fill="#555">{escape(label)}</text>')
    for i, s in enumerate(plot.series):
        color = PALETTE[i % len(PALETTE)]
        good = [(x, y) for x, y in zip(s.xs, s.ys) if math.isfinite(y) and (x > 0 or not plot.log_x)]
        if len(good) > 1:
            path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in good)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        if s.marker:
            for x, y in good:
                out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, plot: Plot) -> Path:
    path = Path(path)
    path.write_text(render(plot), encoding="utf-8")
    return path
