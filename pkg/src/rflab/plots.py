"""Static SVG output: scatter overlays and trajectory polylines.

Deliberately tiny; these exist so results can be eyeballed without a
plotting stack.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


class _Canvas:
    def __init__(self, points: np.ndarray, size: int = 480, pad: int = 20):
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        span = np.maximum(hi - lo, 1e-9)
        self.lo, self.scale = lo, (size - 2 * pad) / span.max()
        self.size, self.pad = size, pad
        self.parts: list[str] = []

    def xy(self, p) -> tuple[float, float]:
        x = self.pad + (p[0] - self.lo[0]) * self.scale
        y = self.size - self.pad - (p[1] - self.lo[1]) * self.scale
        return x, y

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.size}" height="{self.size}" '
                f'viewBox="0 0 {self.size} {self.size}">\n<rect width="100%" height="100%" fill="white"/>\n')
        return head + "\n".join(self.parts) + "\n</svg>\n"


def scatter_svg(path, groups: Sequence[np.ndarray], colors: Sequence[str] | None = None,
                radius: float = 1.6) -> None:
    """One color per group of 2D points (extra dims ignored)."""
    groups = [np.asarray(g, dtype=np.float64).reshape(-1, np.shape(g)[-1])[:, :2] for g in groups]
    canvas = _Canvas(np.concatenate(groups))
    colors = colors or PALETTE
    for i, g in enumerate(groups):
        col = colors[i % len(colors)]
        for p in g:
            x, y = canvas.xy(p)
            canvas.parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{radius}" fill="{col}" fill-opacity="0.6"/>')
    Path(path).write_text(canvas.render())


def polyline_svg(path, paths: Sequence[np.ndarray]) -> None:
    """Each entry is a [T, >=2] array of points drawn as one polyline."""
    paths = [np.asarray(p, dtype=np.float64)[:, :2] for p in paths]
    canvas = _Canvas(np.concatenate(paths))
    for i, p in enumerate(paths):
        pts = " ".join("%.2f,%.2f" % canvas.xy(q) for q in p)
        col = PALETTE[i % len(PALETTE)]
        canvas.parts.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.2"/>')
        x, y = canvas.xy(p[-1])
        canvas.parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{col}"/>')
    Path(path).write_text(canvas.render())
