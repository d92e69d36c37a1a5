"""Minimal SVG charts: line plots and bar charts with no rendering dependency."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=64, right=150, top=36, bottom=48)


def _finite(values):
    return [v for v in values if v is not None and math.isfinite(v)]


def _range(values, pad=0.05):
    lo, hi = min(values), max(values)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


class _Frame:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        self.left = MARGIN["left"]
        self.right = WIDTH - MARGIN["right"]
        self.top = MARGIN["top"]
        self.bottom = HEIGHT - MARGIN["bottom"]

    def px(self, x):
        return self.left + (x - self.x0) / (self.x1 - self.x0) * (self.right - self.left)

    def py(self, y):
        return self.bottom - (y - self.y0) / (self.y1 - self.y0) * (self.bottom - self.top)


def _axes(frame: _Frame, title, xlabel, ylabel, xticks=True) -> list[str]:
    out = [
        f'<rect x="{frame.left}" y="{frame.top}" width="{frame.right - frame.left}" '
        f'height="{frame.bottom - frame.top}" fill="none" stroke="#444"/>',
        f'<text x="{(frame.left + frame.right) / 2}" y="20" text-anchor="middle" '
        f'font-size="14">{escape(title)}</text>',
        f'<text x="{(frame.left + frame.right) / 2}" y="{HEIGHT - 10}" text-anchor="middle" '
        f'font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{(frame.top + frame.bottom) / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {(frame.top + frame.bottom) / 2})">{escape(ylabel)}</text>',
    ]
    for k in range(5):
        y = frame.y0 + k * (frame.y1 - frame.y0) / 4
        out.append(f'<text x="{frame.left - 6}" y="{frame.py(y) + 4:.1f}" text-anchor="end" '
                   f'font-size="10">{y:.3g}</text>')
        if xticks:
            x = frame.x0 + k * (frame.x1 - frame.x0) / 4
            out.append(f'<text x="{frame.px(x):.1f}" y="{frame.bottom + 14}" text-anchor="middle" '
                       f'font-size="10">{x:.3g}</text>')
    return out


def _document(body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">')
    return "\n".join([head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>', *body, "</svg>\n"])


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], path,
               title: str = "", xlabel: str = "round", ylabel: str = "") -> Path:
    """One polyline per named ``(xs, ys)`` series; NaN points are dropped."""
    cleaned = {}
    for name, (xs, ys) in series.items():
        cleaned[name] = [(float(x), float(y)) for x, y in zip(xs, ys)
                         if math.isfinite(float(x)) and math.isfinite(float(y))]
    xs_all = [x for pts in cleaned.values() for x, _ in pts] or [0.0, 1.0]
    ys_all = [y for pts in cleaned.values() for _, y in pts] or [0.0, 1.0]
    frame = _Frame(_range(xs_all, 0.0), _range(ys_all))
    body = _axes(frame, title, xlabel, ylabel)
    for k, (name, pts) in enumerate(cleaned.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{frame.px(x):.2f},{frame.py(y):.2f}" for x, y in pts)
        body.append(f'<polyline data-series="{escape(name)}" points="{coords}" fill="none" '
                    f'stroke="{color}" stroke-width="1.8"/>')
        ly = frame.top + 14 + 16 * k
        body.append(f'<line x1="{frame.right + 10}" y1="{ly - 4}" x2="{frame.right + 28}" '
                    f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{frame.right + 32}" y="{ly}" font-size="11">{escape(name)}</text>')
    path = Path(path)
    path.write_text(_document(body))
    return path


def bar_chart(labels: Sequence[str], values: Sequence[float], path, title: str = "",
              xlabel: str = "", ylabel: str = "", errors: Sequence[float] | None = None) -> Path:
    """Vertical bars, optionally with symmetric error whiskers."""
    vals = [float(v) for v in values]
    errs = [float(e) for e in errors] if errors is not None else [0.0] * len(vals)
    errs = [e if math.isfinite(e) else 0.0 for e in errs]
    finite = _finite([v + e for v, e in zip(vals, errs)] + [v - e for v, e in zip(vals, errs)])
    lo, hi = _range(finite + [0.0]) if finite else (0.0, 1.0)
    frame = _Frame((0.0, float(max(len(vals), 1))), (min(lo, 0.0), hi))
    body = _axes(frame, title, xlabel, ylabel, xticks=False)
    slot = (frame.right - frame.left) / max(len(vals), 1)
    base = frame.py(0.0)
    for k, (label, v, e) in enumerate(zip(labels, vals, errs)):
        if not math.isfinite(v):
            continue
        x = frame.left + k * slot + 0.15 * slot
        top = frame.py(v)
        body.append(f'<rect data-label="{escape(str(label))}" x="{x:.2f}" y="{min(top, base):.2f}" '
                    f'width="{0.7 * slot:.2f}" height="{abs(base - top):.2f}" '
                    f'fill="{PALETTE[k % len(PALETTE)]}"/>')
        cx = x + 0.35 * slot
        if e > 0:
            body.append(f'<line x1="{cx:.2f}" y1="{frame.py(v - e):.2f}" x2="{cx:.2f}" '
                        f'y2="{frame.py(v + e):.2f}" stroke="#222"/>')
        body.append(f'<text x="{cx:.2f}" y="{frame.bottom + 14}" text-anchor="middle" '
                    f'font-size="10">{escape(str(label))}</text>')
    path = Path(path)
    path.write_text(_document(body))
    return path
