"""Minimal dependency-free SVG emitters for heatmaps and scatter/line plots."""

from __future__ import annotations

import math
from html import escape
from typing import Sequence

import numpy as np


def _num(v: float) -> str:
    return f"{v:.2f}"


def _color(v: float) -> str:
    # White (0) to dark blue (1); NaN cells are grey.
    if v is None or math.isnan(v):
        return "#cccccc"
    t = min(max(v, 0.0), 1.0)
    r = int(round(255 * (1 - t) + 8 * t))
    g = int(round(255 * (1 - t) + 48 * t))
    b = int(round(255 * (1 - t) + 107 * t))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(
    values: np.ndarray,
    row_labels: Sequence[str],
    col_labels: Sequence[str],
    overlay: Sequence[float] | None = None,
    title: str = "",
    cell: int = 36,
) -> str:
    """Heatmap of values in [0, 1] with an optional per-column line overlay (also in [0, 1])."""
    values = np.asarray(values, dtype=np.float64)
    n_rows, n_cols = values.shape
    left, top = 110, 40
    width = left + n_cols * cell + 90
    height = top + n_rows * cell + 40
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="20">{escape(title)}</text>',
    ]
    for i in range(n_rows):
        y = top + i * cell
        out.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4}" text-anchor="end">{escape(row_labels[i])}</text>')
        for j in range(n_cols):
            v = values[i, j]
            x = left + j * cell
            txt = "" if math.isnan(v) else f"{v:.2f}"
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color(v)}" stroke="#ffffff"/>')
            fg = "#ffffff" if not math.isnan(v) and v > 0.6 else "#000000"
            out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" fill="{fg}">{txt}</text>')
    for j in range(n_cols):
        out.append(
            f'<text x="{left + j * cell + cell / 2}" y="{top + n_rows * cell + 14}" text-anchor="middle">{escape(col_labels[j])}</text>'
        )
    if overlay is not None and len(overlay):
        span = n_rows * cell
        pts = " ".join(
            f"{_num(left + j * cell + cell / 2)},{_num(top + span * (1 - float(r)))}"
            for j, r in enumerate(overlay[:n_cols])
        )
        out.append(f'<polyline points="{pts}" fill="none" stroke="#ff7f0e" stroke-width="2"/>')
        out.append(
            f'<text x="{left + n_cols * cell + 8}" y="{top + 10}" fill="#ff7f0e">contribution ratio</text>'
        )
    # Legend: color scale fixed to [0, 1].
    lx = left + n_cols * cell + 10
    ly = top + 20
    for s in range(11):
        out.append(f'<rect x="{lx}" y="{ly + (10 - s) * 8}" width="12" height="8" fill="{_color(s / 10)}"/>')
    out.append(f'<text x="{lx + 16}" y="{ly + 8}">1</text>')
    out.append(f'<text x="{lx + 16}" y="{ly + 88}">0</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter_svg(
    series: Sequence[tuple[str, Sequence[float], Sequence[float], str]],
    xlabel: str,
    ylabel: str,
    title: str = "",
    shaded: Sequence[tuple[float, float]] = (),
    lines: bool = False,
    width: int = 480,
    height: int = 340,
) -> str:
    """Scatter (or polyline) plot of named (x, y) series; ``shaded`` are x-intervals drawn grey."""
    xs = np.concatenate([np.asarray(s[1], dtype=np.float64) for s in series]) if series else np.zeros(0)
    ys = np.concatenate([np.asarray(s[2], dtype=np.float64) for s in series]) if series else np.zeros(0)
    finite = np.isfinite(xs) & np.isfinite(ys)
    if finite.any():
        x0, x1 = float(xs[finite].min()), float(xs[finite].max())
        y0, y1 = float(ys[finite].min()), float(ys[finite].max())
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    ml, mr, mt, mb = 60, 20, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{ml}" y="18">{escape(title)}</text>',
    ]
    for lo, hi in shaded:
        a, b = max(lo, x0), min(hi, x1)
        if b > a:
            out.append(f'<rect x="{_num(sx(a))}" y="{mt}" width="{_num(sx(b) - sx(a))}" height="{ph}" fill="#e0e0e0"/>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#000000"/>')
    for frac in (0.0, 0.5, 1.0):
        xv = x0 + frac * (x1 - x0)
        yv = y0 + frac * (y1 - y0)
        out.append(f'<text x="{_num(sx(xv))}" y="{mt + ph + 14}" text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<text x="{ml - 4}" y="{_num(sy(yv) + 4)}" text-anchor="end">{yv:.4g}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" transform="rotate(-90 14 {mt + ph / 2})">{escape(ylabel)}</text>'
    )
    for idx, (name, sxs, sys_, color) in enumerate(series):
        pts = [(float(a), float(b)) for a, b in zip(sxs, sys_) if math.isfinite(a) and math.isfinite(b)]
        if lines and len(pts) > 1:
            coords = " ".join(f"{_num(sx(a))},{_num(sy(b))}" for a, b in pts)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        else:
            for a, b in pts:
                out.append(f'<circle cx="{_num(sx(a))}" cy="{_num(sy(b))}" r="1.8" fill="{color}"/>')
        out.append(f'<text x="{ml + pw - 4}" y="{mt + 14 + 14 * idx}" text-anchor="end" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
