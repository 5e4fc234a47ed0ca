"""Minimal deterministic SVG writers (heatmaps and line overlays)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _viridis_like(u: float) -> str:
    """Dark blue -> teal -> yellow ramp for u in [0, 1]."""
    stops = ((0.0, (68, 1, 84)), (0.5, (33, 145, 140)), (1.0, (253, 231, 37)))
    u = min(max(u, 0.0), 1.0)
    for (u0, c0), (u1, c1) in zip(stops, stops[1:]):
        if u <= u1:
            a = (u - u0) / (u1 - u0)
            rgb = [round(c0[k] + a * (c1[k] - c0[k])) for k in range(3)]
            return "#%02x%02x%02x" % tuple(rgb)
    return "#fde725"


def heatmap(matrix, title: str = "", cell: int = 8) -> str:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("heatmap needs a 2-D matrix")
    rows, cols = m.shape
    lo, hi = float(m.min()), float(m.max())
    span = hi - lo if hi > lo else 1.0
    pad, top = 10, 30
    width, height = cols * cell + 2 * pad, rows * cell + top + pad
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<text x="{pad}" y="18" font-family="monospace" font-size="12">{title} '
           f'[min {lo:.4g}, max {hi:.4g}]</text>']
    for i in range(rows):
        for j in range(cols):
            color = _viridis_like((m[i, j] - lo) / span)
            out.append(f'<rect x="{pad + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def overlay(x, series: dict, title: str = "", width: int = 800, height: int = 260) -> str:
    """Line plot of several equally long series against ``x``."""
    x = np.asarray(x, dtype=np.float64)
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    lo = min(float(v.min()) for v in ys.values())
    hi = max(float(v.max()) for v in ys.values())
    if hi == lo:
        hi = lo + 1.0
    x0, x1 = float(x.min()), float(x.max())
    if x1 == x0:
        x1 = x0 + 1.0
    pad_l, pad_r, pad_t, pad_b = 50, 10, 30, 25
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(v):
        return pad_l + (v - x0) / (x1 - x0) * pw

    def py(v):
        return pad_t + (hi - v) / (hi - lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<text x="{pad_l}" y="18" font-family="monospace" font-size="12">{title}</text>',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
           f'<text x="4" y="{pad_t + 10}" font-family="monospace" font-size="10">{hi:.3g}</text>',
           f'<text x="4" y="{pad_t + ph}" font-family="monospace" font-size="10">{lo:.3g}</text>']
    for k, (name, y) in enumerate(ys.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{_f(px(a))},{_f(py(b))}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>')
        out.append(f'<text x="{pad_l + 10 + 120 * k}" y="{height - 6}" font-family="monospace" '
                   f'font-size="11" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(text: str, path: str | Path) -> None:
    Path(path).write_text(text)
