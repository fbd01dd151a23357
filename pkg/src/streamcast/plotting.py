"""Static SVG trajectory plots."""
from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

STYLES = {
    "map": 'stroke="#d0d0d0" stroke-width="1" fill="none"',
    "candidate": 'stroke="#9a9a9a" stroke-width="0.8" stroke-opacity="0.45" fill="none"',
    "history": 'stroke="#444444" stroke-width="2" fill="none" stroke-dasharray="2,2"',
    "ground-truth": 'stroke="#111111" stroke-width="2.5" fill="none"',
    "single": 'stroke="#1f5fbf" stroke-width="1.6" fill="none" stroke-dasharray="6,3"',
    "ensembled": 'stroke="#d0392b" stroke-width="1.8" fill="none"',
}


def path_data(points: np.ndarray, to_px) -> str:
    px = to_px(np.asarray(points, dtype=np.float64))
    head = f"M {px[0, 0]:.3f} {px[0, 1]:.3f}"
    return " ".join([head] + [f"L {x:.3f} {y:.3f}" for x, y in px[1:]])


def parse_path(d: str) -> np.ndarray:
    """Inverse of :func:`path_data` for the subset it emits (pixel coordinates)."""
    toks = d.split()
    pts = []
    for i in range(0, len(toks), 3):
        if toks[i] not in ("M", "L"):
            raise ValueError(f"unsupported path command {toks[i]!r}")
        pts.append((float(toks[i + 1]), float(toks[i + 2])))
    return np.array(pts)


def trajectory_svg(gt: np.ndarray, single: np.ndarray, ensembled: np.ndarray,
                   candidates: np.ndarray | None = None, history: np.ndarray | None = None,
                   lanes: Sequence[np.ndarray] = (), title: str = "", size: int = 480, margin: float = 5.0) -> str:
    """Render one anchor: ground truth, both prediction sets and the candidate cloud.

    Arrays are world-frame (.., T, 2); the view is fit to everything but the lanes.
    """
    groups = [np.asarray(gt)[None], np.asarray(single), np.asarray(ensembled)]
    if candidates is not None and len(candidates):
        groups.append(np.asarray(candidates))
    if history is not None:
        groups.append(np.asarray(history)[None])
    pts = np.concatenate([g.reshape(-1, 2) for g in groups])
    lo = pts.min(axis=0) - margin
    hi = pts.max(axis=0) + margin
    span = float(max(hi - lo))
    scale = size / span

    def to_px(p):
        out = np.empty_like(p)
        out[..., 0] = (p[..., 0] - lo[0]) * scale
        out[..., 1] = size - (p[..., 1] - lo[1]) * scale  # y up
        return out

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        lines.append(f'<title>{escape(title)}</title>')

    def add(kind, trajs):
        lines.append(f'<g id="{kind}" {STYLES[kind]}>')
        for t in trajs:
            if len(t) >= 2:
                lines.append(f'<path d="{path_data(t, to_px)}"/>')
        lines.append("</g>")

    add("map", lanes)
    if candidates is not None:
        add("candidate", candidates)
    if history is not None:
        add("history", [history])
    add("single", single)
    add("ensembled", ensembled)
    add("ground-truth", [gt])
    legend = [("ground-truth", "ground truth"), ("single", "single frame"),
              ("ensembled", "ensembled"), ("candidate", "M x N candidates")]
    for i, (kind, label) in enumerate(legend):
        y = 16 + 14 * i
        lines.append(f'<line x1="8" y1="{y}" x2="30" y2="{y}" {STYLES[kind]}/>')
        lines.append(f'<text x="36" y="{y + 4}" font-size="11" font-family="sans-serif">{label}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
