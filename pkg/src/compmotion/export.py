"""Standalone SVG figures and per-frame CSV for motion sequences."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import N_CHANNELS

CHANNEL_NAMES = ("root_x", "root_y", "left_1", "left_2", "right_1", "right_2")
_LIMB_COLORS = ("#1f77b4", "#6baed6", "#d62728", "#fc9272")


def _polyline(xs, ys, color: str, width: float = 1.5) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{pts}"/>'


def _check(motion: np.ndarray) -> np.ndarray:
    m = np.asarray(motion, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != N_CHANNELS:
        raise ValueError(f"expected a (L, {N_CHANNELS}) motion, got {m.shape}")
    return m


def motion_svg(motion: np.ndarray, title: str = "", size: int = 240) -> str:
    """Root trajectory (left panel) next to a limb-angle strip chart (right panel)."""
    m = _check(motion)
    pad = 16
    root = m[:, :2]
    lo, hi = root.min(axis=0), root.max(axis=0)
    span = max(float((hi - lo).max()), 1e-6)
    centre = (lo + hi) / 2
    s = (size - 2 * pad) / span
    px = size / 2 + (root[:, 0] - centre[0]) * s
    py = size / 2 - (root[:, 1] - centre[1]) * s
    w_strip = 2 * size
    x0 = size + pad
    t = np.linspace(x0, x0 + w_strip - 2 * pad, len(m))
    limb = m[:, 2:]
    amp = max(float(np.abs(limb).max()), 1.0)
    mid = size / 2
    scale_y = (size / 2 - pad) / amp
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + w_strip}" height="{size + 20}" '
        f'viewBox="0 0 {size + w_strip} {size + 20}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="4" y="{size + 14}" font-family="monospace" font-size="11">{_escape(title)}</text>',
        f'<rect x="0.5" y="0.5" width="{size - 1}" height="{size - 1}" fill="none" stroke="#999"/>',
        _polyline(px, py, "#333"),
        f'<circle cx="{px[0]:.2f}" cy="{py[0]:.2f}" r="3" fill="#2ca02c"/>',
        f'<circle cx="{px[-1]:.2f}" cy="{py[-1]:.2f}" r="3" fill="#d62728"/>',
        f'<rect x="{size + 0.5}" y="0.5" width="{w_strip - 1}" height="{size - 1}" fill="none" stroke="#999"/>',
        f'<line x1="{x0}" y1="{mid}" x2="{x0 + w_strip - 2 * pad}" y2="{mid}" stroke="#ccc"/>',
    ]
    for k in range(4):
        parts.append(_polyline(t, mid - limb[:, k] * scale_y, _LIMB_COLORS[k], 1.2))
    for k, name in enumerate(CHANNEL_NAMES[2:]):
        parts.append(f'<text x="{x0 + 4 + 60 * k}" y="12" font-family="monospace" font-size="10" '
                     f'fill="{_LIMB_COLORS[k]}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def motion_csv(motion: np.ndarray) -> str:
    m = _check(motion)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("frame",) + CHANNEL_NAMES)
    for i, row in enumerate(m):
        w.writerow([i] + [f"{v:.6f}" for v in row])
    return buf.getvalue()


def export_motions(motions: np.ndarray, out_dir, stem: str = "sample", titles: Sequence[str] | None = None,
                   svg: bool = True, csv_files: bool = True) -> list[Path]:
    """Write ``{stem}_{i}.svg`` and ``{stem}_{i}.csv`` for each motion; returns the written paths."""
    motions = np.asarray(motions)
    if motions.ndim == 2:
        motions = motions[None]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, m in enumerate(motions):
        title = titles[i] if titles is not None else f"{stem} {i}"
        if svg:
            p = out / f"{stem}_{i:03d}.svg"
            p.write_text(motion_svg(m, title), encoding="utf-8")
            written.append(p)
        if csv_files:
            p = out / f"{stem}_{i:03d}.csv"
            p.write_text(motion_csv(m), encoding="utf-8")
            written.append(p)
    return written
