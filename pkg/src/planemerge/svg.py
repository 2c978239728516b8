"""SVG rendering of labeled matches with their Delaunay mesh."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .geometry import OUTLIER, Correspondence
from .refinement import delaunay_triangulate

# Deterministic label palette; cycles beyond its length.
PALETTE = (
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0",
    "#f032e6", "#bcf60c", "#fabebe", "#008080", "#9a6324", "#800000",
)
OUTLIER_COLOR = "#808080"


def label_color(label: int) -> str:
    if label == OUTLIER:
        return OUTLIER_COLOR
    return PALETTE[label % len(PALETTE)]


def render_svg(matches: Sequence[Correspondence], labels: np.ndarray) -> str:
    """One circle per match and mesh edges between same-label neighbors.

    Output is deterministic: same inputs give byte-identical documents.
    """
    labels = np.asarray(labels, dtype=int)
    parts = []
    if len(matches):
        xy = np.array([c.x for c in matches])
        lo = xy.min(axis=0) - 10.0
        hi = xy.max(axis=0) + 10.0
        width, height = hi - lo
    else:
        lo = np.zeros(2)
        width = height = 100.0
    parts.append(
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1f}" '
        f'height="{height:.1f}" viewBox="0 0 {width:.1f} {height:.1f}">'
    )
    parts.append(f'<rect width="{width:.1f}" height="{height:.1f}" fill="#ffffff"/>')
    if len(matches) >= 3:
        graph = delaunay_triangulate(matches)
        for (a, b) in graph.edges:
            la, lb = labels[a], labels[b]
            if la != lb or la == OUTLIER:
                continue
            pa = xy[a] - lo
            pb = xy[b] - lo
            parts.append(
                f'<line x1="{pa[0]:.2f}" y1="{pa[1]:.2f}" x2="{pb[0]:.2f}" '
                f'y2="{pb[1]:.2f}" stroke="{label_color(int(la))}" stroke-width="1"/>'
            )
    for i, c in enumerate(matches):
        p = c.x - lo
        col = label_color(int(labels[i]))
        parts.append(
            f'<circle cx="{p[0]:.2f}" cy="{p[1]:.2f}" r="2.5" fill="{col}" '
            f'stroke="{col}"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
