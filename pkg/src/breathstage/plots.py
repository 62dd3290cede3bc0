"""Minimal SVG figures: predicted-vs-true scatter plots and hypnogram strips.

Coordinates are rounded to fixed precision so the same data always produces
the same bytes.
"""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from breathstage.signal_io import _write_atomic

W, H, M = 360, 360, 48
_STAGE_ROWS = {0: 0, 4: 1, 1: 2, 2: 3, 3: 4}  # Wake on top, then REM, N1, N2, N3
_STAGE_NAMES = ["W", "REM", "N1", "N2", "N3"]


def _f(v: float) -> str:
    return f"{v:.2f}"


def _header(width: int, height: int) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]


def scatter_svg(pred: Sequence[float], truth: Sequence[float], title: str, unit: str = "") -> str:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    ok = np.isfinite(pred) & np.isfinite(truth)
    pred, truth = pred[ok], truth[ok]
    lo = float(min(pred.min(), truth.min())) if pred.size else 0.0
    hi = float(max(pred.max(), truth.max())) if pred.size else 1.0
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo
    lo, hi = lo - 0.05 * span, hi + 0.05 * span

    def sx(v):
        return M + (v - lo) / (hi - lo) * (W - 2 * M)

    def sy(v):
        return H - M - (v - lo) / (hi - lo) * (H - 2 * M)

    label = f"{title} ({unit})" if unit else title
    out = _header(W, H)
    out.append(f'<text x="{W // 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>')
    out.append(f'<line x1="{M}" y1="{H - M}" x2="{W - M}" y2="{H - M}" stroke="black"/>')
    out.append(f'<line x1="{M}" y1="{M}" x2="{M}" y2="{H - M}" stroke="black"/>')
    out.append(f'<line x1="{_f(sx(lo))}" y1="{_f(sy(lo))}" x2="{_f(sx(hi))}" y2="{_f(sy(hi))}" stroke="gray" stroke-dasharray="4 3"/>')
    out.append(f'<text x="{W // 2}" y="{H - 12}" text-anchor="middle" font-size="11">true {escape(label)}</text>')
    out.append(
        f'<text x="14" y="{H // 2}" text-anchor="middle" font-size="11" transform="rotate(-90 14 {H // 2})">predicted {escape(label)}</text>'
    )
    for tick in np.linspace(lo, hi, 5):
        out.append(f'<text x="{_f(sx(tick))}" y="{H - M + 14}" text-anchor="middle" font-size="9">{tick:.3g}</text>')
        out.append(f'<text x="{M - 4}" y="{_f(sy(tick) + 3)}" text-anchor="end" font-size="9">{tick:.3g}</text>')
    for p, t in zip(pred.tolist(), truth.tolist()):
        out.append(f'<circle cx="{_f(sx(t))}" cy="{_f(sy(p))}" r="2.5" fill="steelblue" fill-opacity="0.7"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def hypnogram_svg(pred: Sequence[int], truth: Sequence[int] | None, title: str) -> str:
    """Step plot of one night; truth (if given) drawn above the prediction."""
    strips = [("predicted", np.asarray(pred))]
    if truth is not None:
        strips.insert(0, ("labels", np.asarray(truth)))
    width, row_h, strip_h, left = 720, 12, 5 * 12 + 24, 64
    height = 28 + strip_h * len(strips)
    out = _header(width, height)
    out.append(f'<text x="{width // 2}" y="16" text-anchor="middle" font-size="12">{escape(title)}</text>')
    for s, (name, stages) in enumerate(strips):
        top = 28 + s * strip_h
        n = max(int(stages.size), 1)
        xscale = (width - left - 8) / n
        out.append(f'<text x="4" y="{top + 10}" font-size="10">{name}</text>')
        for r, lab in enumerate(_STAGE_NAMES):
            out.append(f'<text x="{left - 6}" y="{top + 16 + r * row_h}" text-anchor="end" font-size="8">{lab}</text>')
        pts = []
        for i, st in enumerate(stages.tolist()):
            y = top + 13 + _STAGE_ROWS[int(st)] * row_h
            pts.append(f"{_f(left + i * xscale)},{y}")
            pts.append(f"{_f(left + (i + 1) * xscale)},{y}")
        if pts:
            out.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="black" stroke-width="1"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(text: str, path) -> None:
    _write_atomic(path, text)

