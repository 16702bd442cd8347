"""Deterministic SVG plots of yield-curve families (yield vs tenor, one line per rating)."""

from __future__ import annotations

import colorsys
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PANEL_W, PANEL_H = 320, 240
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 52, 12, 28, 36


def _palette(n: int) -> list[str]:
    out = []
    for i in range(n):
        r, g, b = colorsys.hsv_to_rgb(0.66 * i / max(n - 1, 1), 0.75, 0.85)
        out.append(f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}")
    return out


class _Svg:
    def __init__(self, width: int, height: int):
        self.parts = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        ]

    def add(self, s: str) -> None:
        self.parts.append(s)

    def text(self, x, y, s, anchor="middle", size=10):
        self.add(f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" font-size="{size}">{escape(s)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>", ""])


def _panel(svg: _Svg, x0: float, title: str, tenors: np.ndarray, values: np.ndarray,
           observed: np.ndarray | None, labels: Sequence[str], y_lo: float, y_hi: float) -> None:
    pw = PANEL_W - MARGIN_L - MARGIN_R
    ph = PANEL_H - MARGIN_T - MARGIN_B
    left, top = x0 + MARGIN_L, MARGIN_T
    t_lo, t_hi = float(tenors[0]), float(tenors[-1])

    def px(t):
        return left + (t - t_lo) / (t_hi - t_lo) * pw

    def py(v):
        return top + ph - (v - y_lo) / (y_hi - y_lo) * ph

    svg.add('<g class="panel">')
    svg.text(left + pw / 2, 16, title, size=12)
    svg.add(f'<rect x="{left:.1f}" y="{top:.1f}" width="{pw:.1f}" height="{ph:.1f}" '
            f'fill="none" stroke="#888" stroke-width="0.5"/>')
    for k in range(5):
        v = y_lo + (y_hi - y_lo) * k / 4
        svg.text(left - 4, py(v) + 3, f"{v * 100:.2f}%", anchor="end", size=8)
    for t in (t_lo, 5.0, 10.0, 20.0, t_hi):
        if t_lo <= t <= t_hi:
            svg.text(px(t), top + ph + 12, f"{t:g}y", size=8)
    svg.text(left + pw / 2, PANEL_H - 6, "tenor", size=9)

    colors = _palette(len(labels))
    for i, label in enumerate(labels):
        keep = np.ones(len(tenors), dtype=bool) if observed is None else observed[i]
        pts = " ".join(f"{px(t):.2f},{py(v):.2f}" for t, v, k in zip(tenors, values[i], keep) if k)
        svg.add(f'<polyline class="rating" data-rating="{escape(label)}" points="{pts}" '
                f'fill="none" stroke="{colors[i]}" stroke-width="1.2"/>')
        if observed is not None:
            for t, v, k in zip(tenors, values[i], keep):
                if k:
                    svg.add(f'<circle cx="{px(t):.2f}" cy="{py(v):.2f}" r="1.8" fill="{colors[i]}"/>')
    svg.add("</g>")


def plot_reconstruction(truth, masked, recon, path, tenors: Sequence[float], ratings: Sequence[str],
                        title: str = "") -> Path:
    """Write a three-panel SVG: truth, observed points only, reconstruction."""
    t_vals = truth.values if hasattr(truth, "values") else np.asarray(truth)
    r_vals = recon.values if hasattr(recon, "values") else np.asarray(recon)
    m_vals, m_obs = masked.values, masked.observed
    if not (t_vals.shape == r_vals.shape == m_vals.shape == (len(ratings), len(tenors))):
        raise ValueError("truth, masked and reconstruction must share the rating x tenor grid")
    tenors = np.asarray(tenors, dtype=float)
    lo = float(min(t_vals.min(), r_vals.min()))
    hi = float(max(t_vals.max(), r_vals.max()))
    pad = 0.05 * (hi - lo) if hi > lo else 0.001
    lo, hi = lo - pad, hi + pad

    top_pad = 18 if title else 0
    svg = _Svg(3 * PANEL_W, PANEL_H + top_pad)
    if title:
        svg.text(1.5 * PANEL_W, 13, title, size=12)
    svg.add(f'<g transform="translate(0,{top_pad})">')
    _panel(svg, 0, "truth", tenors, t_vals, None, ratings, lo, hi)
    _panel(svg, PANEL_W, "observed", tenors, m_vals, m_obs, ratings, lo, hi)
    _panel(svg, 2 * PANEL_W, "reconstruction", tenors, r_vals, None, ratings, lo, hi)
    svg.add("</g>")

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(svg.render(), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write plot to {path}: {exc}") from exc
    return path
