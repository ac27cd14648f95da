"""Dependency-free SVG charts: a scatter for projections and a line chart for loss curves."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
WIDTH, HEIGHT, MARGIN = 640, 440, 56


def moving_average(values, window: int = 50) -> np.ndarray:
    """Trailing mean over the last ``window`` values (fewer at the start)."""
    if window < 1:
        raise ValueError("window must be at least 1")
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    ticks, t = [], start
    while t <= hi + 1e-12 * abs(step):
        ticks.append(round(t, 12))
        t += step
    return ticks


class _Frame:
    def __init__(self, xs, ys, title: str, xlabel: str, ylabel: str):
        self.x0, self.x1 = float(np.min(xs)), float(np.max(xs))
        self.y0, self.y1 = float(np.min(ys)), float(np.max(ys))
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 1, self.x1 + 1
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 1, self.y1 + 1
        pad_x, pad_y = 0.03 * (self.x1 - self.x0), 0.05 * (self.y1 - self.y0)
        self.x0, self.x1, self.y0, self.y1 = self.x0 - pad_x, self.x1 + pad_x, self.y0 - pad_y, self.y1 + pad_y
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" '
            f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
            f'<rect x="{MARGIN}" y="{MARGIN / 2 + 8}" width="{WIDTH - 1.5 * MARGIN}" '
            f'height="{HEIGHT - 1.5 * MARGIN - 8}" fill="none" stroke="#444"/>',
        ]
        for t in _nice_ticks(self.x0, self.x1):
            px = self.px(t)
            self.parts.append(f'<text x="{_fmt(px)}" y="{HEIGHT - MARGIN + 16}" text-anchor="middle">{t:g}</text>')
        for t in _nice_ticks(self.y0, self.y1):
            py = self.py(t)
            self.parts.append(f'<line x1="{MARGIN}" x2="{WIDTH - MARGIN / 2}" y1="{_fmt(py)}" y2="{_fmt(py)}" '
                              f'stroke="#ddd"/>')
            self.parts.append(f'<text x="{MARGIN - 4}" y="{_fmt(py + 4)}" text-anchor="end">{t:g}</text>')

    def px(self, x: float) -> float:
        return MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 1.5 * MARGIN)

    def py(self, y: float) -> float:
        return HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 1.5 * MARGIN - 8)

    def legend(self, labels) -> None:
        for i, (label, color) in enumerate(labels):
            y = MARGIN / 2 + 22 + 16 * i
            self.parts.append(f'<rect x="{WIDTH - MARGIN - 110}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
            self.parts.append(f'<text x="{WIDTH - MARGIN - 95}" y="{y + 1}">{escape(label)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def scatter_svg(rows, title: str = "Pooled question features (PCA)") -> str:
    """Scatter of (x, y, domain, arm) rows; colour encodes domain, marker encodes arm."""
    if not rows:
        raise ValueError("nothing to plot")
    xs = np.array([r[0] for r in rows], dtype=float)
    ys = np.array([r[1] for r in rows], dtype=float)
    fr = _Frame(xs, ys, title, "PC 1", "PC 2")
    domains = sorted({r[2] for r in rows})
    arms = sorted({r[3] for r in rows})
    color = {d: PALETTE[i % len(PALETTE)] for i, d in enumerate(domains)}
    for x, y, d, a in rows:
        cx, cy = _fmt(fr.px(float(x))), _fmt(fr.py(float(y)))
        if arms.index(a) % 2 == 0:
            fr.parts.append(f'<circle cx="{cx}" cy="{cy}" r="3" fill="{color[d]}" fill-opacity="0.6"/>')
        else:
            fr.parts.append(f'<rect x="{_fmt(float(cx) - 3)}" y="{_fmt(float(cy) - 3)}" width="6" height="6" '
                            f'fill="none" stroke="{color[d]}"/>')
    labels = [(d, color[d]) for d in domains]
    if len(arms) > 1:
        labels += [(f"{a} ({'dot' if i % 2 == 0 else 'square'})", "#888") for i, a in enumerate(arms)]
    fr.legend(labels)
    return fr.render()


def line_svg(series: dict[str, tuple[list[float], list[float]]], title: str, xlabel: str = "step",
             ylabel: str = "loss") -> str:
    """Polyline chart; ``series`` maps a label to (xs, ys)."""
    series = {k: v for k, v in series.items() if len(v[0])}
    if not series:
        raise ValueError("nothing to plot")
    xs = np.concatenate([np.asarray(v[0], dtype=float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], dtype=float) for v in series.values()])
    fr = _Frame(xs, ys, title, xlabel, ylabel)
    labels = []
    for i, (name, (sx, sy)) in enumerate(series.items()):
        c = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(fr.px(float(x)))},{_fmt(fr.py(float(y)))}" for x, y in zip(sx, sy))
        fr.parts.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        labels.append((name, c))
    fr.legend(labels)
    return fr.render()


def convergence_svg(rows: list[dict], window: int = 50, keys=("L_y", "L_d_src", "L_d_tgt")) -> str:
    """Smoothed training losses from metric-log rows."""
    steps = [r["step"] for r in rows]
    series = {}
    for k in keys:
        vals = [r[k] for r in rows if r.get(k) is not None]
        if len(vals) == len(steps):
            series[f"{k} (avg {window})"] = (steps, list(moving_average(vals, window)))
    return line_svg(series, "Training losses")
