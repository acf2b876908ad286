"""Minimal self-contained SVG line plots (no plotting library needed)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n)


def line_plot(path, series, title: str = "", xlabel: str = "", ylabel: str = "",
              width: int = 640, height: int = 400, hlines=(), equal_axes: bool = False) -> None:
    """Write an SVG with one polyline per ``(label, x, y)`` entry of ``series``.

    ``hlines`` is a sequence of ``(label, y)`` dashed reference lines.
    """
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = [np.asarray(s[1], float) for s in series]
    ys = [np.asarray(s[2], float) for s in series]
    allx = np.concatenate(xs) if xs else np.zeros(1)
    ally = np.concatenate(ys + [np.array([y for _, y in hlines], float)]) if ys else np.zeros(1)
    finite_x, finite_y = allx[np.isfinite(allx)], ally[np.isfinite(ally)]
    x0, x1 = (finite_x.min(), finite_x.max()) if finite_x.size else (0.0, 1.0)
    y0, y1 = (finite_y.min(), finite_y.max()) if finite_y.size else (0.0, 1.0)
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    if equal_axes:
        # same data units per pixel on both axes
        sx, sy = (x1 - x0) / pw, (y1 - y0) / ph
        s = max(sx, sy)
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        x0, x1 = cx - s * pw / 2, cx + s * pw / 2
        y0, y1 = cy - s * ph / 2, cy + s * ph / 2

    def px(x):
        return left + (np.asarray(x) - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (np.asarray(y) - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{px(t):.1f}" y="{top + ph + 16}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{left - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 15 {top + ph / 2})">{escape(ylabel)}</text>')
    for label, y in hlines:
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{py(y):.1f}" y2="{py(y):.1f}" '
                   f'stroke="gray" stroke-dasharray="5,4"/>')
        out.append(f'<text x="{left + pw - 4}" y="{py(y) - 4:.1f}" text-anchor="end" fill="gray">'
                   f'{escape(label)}</text>')
    for i, ((label, _, _), x, y) in enumerate(zip(series, xs, ys)):
        colour = COLOURS[i % len(COLOURS)]
        ok = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(x[ok]), py(y[ok])))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{left + 10}" y="{top + 16 + 15 * i}" fill="{colour}">{escape(label)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
