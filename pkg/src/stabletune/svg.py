"""Minimal hand-written SVG charts: line plots with optional bands, and box plots."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=160, top=40, bottom=55)
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    lo: Sequence[float] | None = None
    hi: Sequence[float] | None = None


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    return [round(v, 12) for v in np.arange(start, hi + step * 1e-9, step)]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, xr, yr, logx: bool = False):
        self.parts: list[str] = []
        self.logx = logx
        self.x0, self.x1 = xr
        self.y0, self.y1 = yr
        if self.y1 <= self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        if self.x1 <= self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x1 + 0.5
        self.pw = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        self.parts.append(
            f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>'
        )
        cx = MARGIN["left"] + self.pw / 2
        self.parts.append(
            f'<text x="{cx}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>'
        )
        cy = MARGIN["top"] + self.ph / 2
        self.parts.append(
            f'<text x="16" y="{cy}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {cy})">{escape(ylabel)}</text>'
        )

    def _tx(self, x: float) -> float:
        if self.logx:
            x, a, b = math.log10(x), math.log10(self.x0), math.log10(self.x1)
        else:
            a, b = self.x0, self.x1
        return MARGIN["left"] + (x - a) / (b - a) * self.pw

    def _ty(self, y: float) -> float:
        return MARGIN["top"] + (1 - (y - self.y0) / (self.y1 - self.y0)) * self.ph

    def axes(self, xticks=None, xlabels=None) -> None:
        l, t = MARGIN["left"], MARGIN["top"]
        self.parts.append(
            f'<rect x="{l}" y="{t}" width="{self.pw}" height="{self.ph}" fill="none" stroke="#444"/>'
        )
        for v in _ticks(self.y0, self.y1):
            y = self._ty(v)
            self.parts.append(f'<line x1="{l - 4}" y1="{y:.2f}" x2="{l}" y2="{y:.2f}" stroke="#444"/>')
            self.parts.append(
                f'<text x="{l - 7}" y="{y + 4:.2f}" text-anchor="end" font-size="10">{_fmt(v)}</text>'
            )
        if xticks is None:
            xticks = (
                [10**e for e in range(math.ceil(math.log10(self.x0)), math.floor(math.log10(self.x1)) + 1)]
                if self.logx
                else _ticks(self.x0, self.x1)
            )
        labels = xlabels or [_fmt(v) for v in xticks]
        bottom = t + self.ph
        for v, lab in zip(xticks, labels):
            x = self._tx(v)
            self.parts.append(f'<line x1="{x:.2f}" y1="{bottom}" x2="{x:.2f}" y2="{bottom + 4}" stroke="#444"/>')
            self.parts.append(
                f'<text x="{x:.2f}" y="{bottom + 16}" text-anchor="middle" font-size="10">{escape(lab)}</text>'
            )

    def legend(self, labels: Sequence[str]) -> None:
        x = WIDTH - MARGIN["right"] + 12
        for i, lab in enumerate(labels):
            y = MARGIN["top"] + 10 + 18 * i
            c = PALETTE[i % len(PALETTE)]
            self.parts.append(f'<rect x="{x}" y="{y - 8}" width="12" height="10" fill="{c}"/>')
            self.parts.append(f'<text x="{x + 17}" y="{y + 1}" font-size="10">{escape(lab)}</text>')

    def save(self, path) -> None:
        body = "\n".join(self.parts)
        text = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">\n'
            f'<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n'
        )
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def line_plot(series: Sequence[Series], title: str, xlabel: str, ylabel: str, path, logx: bool = False) -> None:
    if not series:
        raise ValueError("nothing to plot")
    xs = np.concatenate([np.asarray(s.x, float) for s in series])
    ys = [np.asarray(s.y, float) for s in series]
    ys += [np.asarray(s.lo, float) for s in series if s.lo is not None]
    ys += [np.asarray(s.hi, float) for s in series if s.hi is not None]
    yall = np.concatenate(ys)
    yall = yall[np.isfinite(yall)]
    pad = 0.05 * (yall.max() - yall.min() or 1.0)
    cv = _Canvas(title, xlabel, ylabel, (xs.min(), xs.max()), (yall.min() - pad, yall.max() + pad), logx)
    cv.axes()
    for i, s in enumerate(series):
        c = PALETTE[i % len(PALETTE)]
        if s.lo is not None and s.hi is not None:
            upper = [f"{cv._tx(x):.2f},{cv._ty(y):.2f}" for x, y in zip(s.x, s.hi)]
            lower = [f"{cv._tx(x):.2f},{cv._ty(y):.2f}" for x, y in zip(s.x, s.lo)][::-1]
            cv.parts.append(f'<polygon points="{" ".join(upper + lower)}" fill="{c}" fill-opacity="0.18"/>')
        pts = " ".join(f"{cv._tx(x):.2f},{cv._ty(y):.2f}" for x, y in zip(s.x, s.y))
        cv.parts.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1.6"/>')
    cv.legend([s.label for s in series])
    cv.save(path)


def box_plot(groups: Sequence[tuple[str, Sequence[float]]], title: str, ylabel: str, path) -> None:
    """Whiskers at min/max, box at the quartiles, line at the median."""
    if not groups:
        raise ValueError("nothing to plot")
    allv = np.concatenate([np.asarray(v, float) for _, v in groups])
    pad = 0.05 * (allv.max() - allv.min() or 1.0)
    n = len(groups)
    cv = _Canvas(title, "", ylabel, (0.5, n + 0.5), (allv.min() - pad, allv.max() + pad))
    cv.axes(xticks=list(range(1, n + 1)), xlabels=[str(i) for i in range(1, n + 1)])
    half = 0.3 * cv.pw / n
    for i, (_, vals) in enumerate(groups, start=1):
        v = np.asarray(vals, float)
        q0, q1, q2, q3, q4 = np.percentile(v, [0, 25, 50, 75, 100])
        c = PALETTE[(i - 1) % len(PALETTE)]
        x = cv._tx(i)
        cv.parts.append(f'<line x1="{x:.2f}" y1="{cv._ty(q0):.2f}" x2="{x:.2f}" y2="{cv._ty(q4):.2f}" stroke="{c}"/>')
        top, bot = cv._ty(q3), cv._ty(q1)
        cv.parts.append(
            f'<rect x="{x - half:.2f}" y="{top:.2f}" width="{2 * half:.2f}" height="{max(bot - top, 0.5):.2f}" '
            f'fill="{c}" fill-opacity="0.3" stroke="{c}"/>'
        )
        ym = cv._ty(q2)
        cv.parts.append(f'<line x1="{x - half:.2f}" y1="{ym:.2f}" x2="{x + half:.2f}" y2="{ym:.2f}" stroke="{c}" stroke-width="2"/>')
    cv.legend([f"{i}: {lab}" for i, (lab, _) in enumerate(groups, start=1)])
    cv.save(path)
