"""Minimal static SVG renderings: line charts of error curves and skeleton snapshots."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .motion.markers import MARKER_NAMES

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

# Stick-figure edges drawn between marker pairs.
SKELETON_EDGES = [
    ("LFHD", "RFHD"), ("RFHD", "RBHD"), ("RBHD", "LBHD"), ("LBHD", "LFHD"),
    ("C7", "T10"), ("T10", "T12"), ("T12", "S1"), ("CLAV", "STRN"), ("C7", "CLAV"),
    ("LSHO", "RSHO"), ("RSHO", "RELB"), ("RELB", "RWRA"), ("RWRA", "RFIN"),
    ("LSHO", "LELB"), ("LELB", "LWRA"), ("LWRA", "LFIN"),
    ("LASI", "RASI"), ("RASI", "RPSI"), ("RPSI", "LPSI"), ("LPSI", "LASI"),
    ("RASI", "RKNE"), ("RKNE", "RANK"), ("RANK", "RTOE"), ("RANK", "RHEE"),
    ("LASI", "LKNE"), ("LKNE", "LANK"), ("LANK", "LTOE"), ("LANK", "LHEE"),
]


def _svg(width: int, height: int, body: list[str]) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            '<rect width="100%" height="100%" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")


def line_chart(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str = "",
               xlabel: str = "", ylabel: str = "", width: int = 560, height: int = 360) -> str:
    """One polyline per named (x, y) series with simple axes and a legend."""
    ml, mr, mt, mb = 60, 130, 30, 40
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = 0.0 if ys.min() >= 0 else float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    body = [f'<text x="{width / 2}" y="18" text-anchor="middle">{escape(title)}</text>',
            f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
            f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for t in np.linspace(x0, x1, 5):
        body.append(f'<text x="{px(t):.1f}" y="{mt + ph + 14}" text-anchor="middle">{t:.0f}</text>')
    for t in np.linspace(y0, y1, 5):
        body.append(f'<text x="{ml - 5}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    body.append(f'<text x="{ml + pw / 2}" y="{height - 6}" text-anchor="middle">{escape(xlabel)}</text>')
    body.append(f'<text x="14" y="{mt + ph / 2}" transform="rotate(-90 14 {mt + ph / 2})" '
                f'text-anchor="middle">{escape(ylabel)}</text>')
    for i, (name, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = mt + 14 * i + 6
        body.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 28}" y2="{ly}" stroke="{color}"/>')
        body.append(f'<text x="{ml + pw + 32}" y="{ly + 4}">{escape(name)}</text>')
    return _svg(width, height, body)


def skeleton_snapshots(postures: dict[str, np.ndarray], view: str = "sagittal",
                       panel: int = 180) -> str:
    """Side-by-side stick figures of (41, 3) mm postures; sagittal plots y-z, frontal x-z."""
    axes = {"sagittal": (1, 2), "frontal": (0, 2)}[view]
    idx = {m: i for i, m in enumerate(MARKER_NAMES)}
    pts = np.concatenate([p[:, axes] for p in postures.values()])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = (panel - 30) / max(float((hi - lo).max()), 1.0)
    body = []
    for k, (label, pose) in enumerate(postures.items()):
        ox = k * panel

        def tr(p):
            return ox + 15 + (p[axes[0]] - lo[0]) * scale, panel - 5 - (p[axes[1]] - lo[1]) * scale

        body.append(f'<text x="{ox + panel / 2}" y="14" text-anchor="middle">{escape(label)}</text>')
        for a, b in SKELETON_EDGES:
            (x1, y1), (x2, y2) = tr(pose[idx[a]]), tr(pose[idx[b]])
            body.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" stroke="#333"/>')
        for p in pose:
            x, y = tr(p)
            body.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="1.8" fill="#d62728"/>')
    return _svg(panel * len(postures), panel + 10, body)
