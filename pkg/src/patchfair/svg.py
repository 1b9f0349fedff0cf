"""Bare-bones SVG line and scatter charts written as plain path elements."""
from __future__ import annotations

from dataclasses import dataclass, field
from html import escape

PALETTE = ["#1b9e77", "#7570b3", "#d95f02", "#e7298a", "#66a61e", "#e6ab02"]


@dataclass
class Series:
    label: str
    x: list[float]
    y: list[float]
    err: list[float] | None = None
    color: str | None = None


@dataclass
class HLine:
    label: str
    y: float
    color: str = "#444444"
    dash: str = "6,4"


@dataclass
class Chart:
    title: str
    xlabel: str
    ylabel: str
    width: int = 640
    height: int = 420
    margin: tuple[int, int, int, int] = (40, 170, 50, 60)  # top, right, bottom, left
    series: list[Series] = field(default_factory=list)
    hlines: list[HLine] = field(default_factory=list)
    markers: list[tuple[float, float, str]] = field(default_factory=list)

    def _bounds(self):
        xs = [v for s in self.series for v in s.x]
        ys = [v for s in self.series for v in s.y]
        ys += [v + e for s in self.series if s.err for v, e in zip(s.y, s.err)]
        ys += [v - e for s in self.series if s.err for v, e in zip(s.y, s.err)]
        ys += [h.y for h in self.hlines]
        ys += [m[1] for m in self.markers]
        x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
        y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
        if x1 - x0 < 1e-12:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 - y0 < 1e-12:
            y0, y1 = y0 - 0.05, y1 + 0.05
        pad = 0.05 * (y1 - y0)
        return x0, x1, y0 - pad, y1 + pad

    def render(self) -> str:
        top, right, bottom, left = self.margin
        pw, ph = self.width - left - right, self.height - top - bottom
        x0, x1, y0, y1 = self._bounds()

        def sx(v):
            return left + (v - x0) / (x1 - x0) * pw

        def sy(v):
            return top + (1.0 - (v - y0) / (y1 - y0)) * ph

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif" font-size="12">',
            f'<rect width="{self.width}" height="{self.height}" fill="white"/>',
            f'<text x="{left + pw / 2:.1f}" y="{top / 2 + 6:.1f}" text-anchor="middle" font-size="14">'
            f"{escape(self.title)}</text>",
            f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
        ]
        for i in range(5):
            xv = x0 + (x1 - x0) * i / 4
            yv = y0 + (y1 - y0) * i / 4
            out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:.2f}</text>')
            out.append(f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3f}</text>')
        out.append(
            f'<text x="{left + pw / 2:.1f}" y="{self.height - 10}" text-anchor="middle">{escape(self.xlabel)}</text>'
        )
        out.append(
            f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
            f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(self.ylabel)}</text>'
        )

        legend = []
        for k, s in enumerate(self.series):
            color = s.color or PALETTE[k % len(PALETTE)]
            if s.err and len(s.x) > 1:
                upper = [(sx(x), sy(y + e)) for x, y, e in zip(s.x, s.y, s.err)]
                lower = [(sx(x), sy(y - e)) for x, y, e in zip(s.x, s.y, s.err)][::-1]
                pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in upper + lower)
                out.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
            if len(s.x) > 1:
                d = "M " + " L ".join(f"{sx(x):.2f} {sy(y):.2f}" for x, y in zip(s.x, s.y))
                out.append(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>')
            for x, y in zip(s.x, s.y):
                out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
            legend.append((s.label, color, ""))
        for h in self.hlines:
            out.append(
                f'<line x1="{left}" x2="{left + pw}" y1="{sy(h.y):.2f}" y2="{sy(h.y):.2f}" '
                f'stroke="{h.color}" stroke-dasharray="{h.dash}"/>'
            )
            legend.append((h.label, h.color, h.dash))
        for x, y, color in self.markers:
            out.append(
                f'<rect x="{sx(x) - 5:.2f}" y="{sy(y) - 5:.2f}" width="10" height="10" '
                f'fill="none" stroke="{color}" stroke-width="2"/>'
            )

        lx = left + pw + 12
        for k, (label, color, dash) in enumerate(legend):
            ly = top + 14 + 18 * k
            dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
            out.append(
                f'<line x1="{lx}" x2="{lx + 22}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"{dash_attr}/>'
            )
            out.append(f'<text x="{lx + 28}" y="{ly + 4}">{escape(label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def scatter(title, xlabel, ylabel, groups: list[tuple[str, list[float], list[float]]], diagonal: bool = True,
            width: int = 480, height: int = 480) -> str:
    """Point cloud per group, optionally with the y = x reference line."""
    top, right, bottom, left = 40, 120, 50, 60
    pw, ph = width - left - right, height - top - bottom
    vals = [v for _, xs, ys in groups for v in list(xs) + list(ys)]
    lo, hi = (min(vals), max(vals)) if vals else (-1.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 1, hi + 1
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def sx(v):
        return left + (v - lo) / (hi - lo) * pw

    def sy(v):
        return top + (1.0 - (v - lo) / (hi - lo)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
    ]
    if diagonal:
        out.append(
            f'<line x1="{sx(lo):.2f}" y1="{sy(lo):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" '
            f'stroke="#999" stroke-dasharray="4,4"/>'
        )
    if lo < 0 < hi:
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{sy(0):.2f}" y2="{sy(0):.2f}" stroke="#ccc"/>')
    for i in range(5):
        v = lo + (hi - lo) * i / 4
        out.append(f'<text x="{sx(v):.1f}" y="{top + ph + 16}" text-anchor="middle">{v:.1f}</text>')
        out.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for k, (label, xs, ys) in enumerate(groups):
        color = PALETTE[k % len(PALETTE)]
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{color}" fill-opacity="0.6"/>')
        ly = top + 14 + 18 * k
        out.append(f'<circle cx="{left + pw + 18}" cy="{ly}" r="4" fill="{color}"/>')
        out.append(f'<text x="{left + pw + 28}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
