"""Deterministic SVG line charts for one observation field."""

from __future__ import annotations

from datetime import datetime
from typing import Optional, Sequence
from xml.sax.saxutils import escape

from blockiot.clock import format_instant
from blockiot.core.model import TemplateField, ValueStatus
from blockiot.fhir.trend import SECONDS_PER_DAY, TrendLine, compute_trend

WIDTH, HEIGHT = 800, 400
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 40, 50


def _f(x: float) -> str:
    return f"{x:.2f}"


def render_chart(
    points: Sequence[tuple[datetime, float, ValueStatus]],
    field: TemplateField,
    title: str,
    window: tuple[Optional[datetime], Optional[datetime]] = (None, None),
) -> tuple[bytes, Optional[TrendLine]]:
    """Return ``(svg_bytes, trend)``. Points must be non-empty and time-ordered."""
    if not points:
        raise ValueError("no points to chart")
    start = window[0] or points[0][0]
    end = window[1] or points[-1][0]
    span = max((end - start).total_seconds(), 1.0)

    values = [p[1] for p in points]
    limits = [x for x in (field.lower_limit, field.upper_limit) if x is not None]
    lo, hi = min(values + limits), max(values + limits)
    if hi == lo:
        lo, hi = lo - 1, hi + 1
    pad = (hi - lo) * 0.08
    lo, hi = lo - pad, hi + pad

    plot_w = WIDTH - LEFT - RIGHT
    plot_h = HEIGHT - TOP - BOTTOM

    def x_of(t: datetime) -> float:
        return LEFT + plot_w * (t - start).total_seconds() / span

    def x_of_days(d: float) -> float:
        return LEFT + plot_w * d * SECONDS_PER_DAY / span

    def y_of(v: float) -> float:
        return TOP + plot_h * (hi - v) / (hi - lo)

    unit = escape(field.unit)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{LEFT}" y="24" font-family="sans-serif" font-size="16">{escape(title)}</text>',
        f'<line class="axis" x1="{LEFT}" y1="{TOP + plot_h}" x2="{LEFT + plot_w}" '
        f'y2="{TOP + plot_h}" stroke="black"/>',
        f'<line class="axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + plot_h}" stroke="black"/>',
        f'<text x="{LEFT}" y="{HEIGHT - 15}" font-size="11">{format_instant(start)}</text>',
        f'<text x="{LEFT + plot_w}" y="{HEIGHT - 15}" font-size="11" text-anchor="end">'
        f'{format_instant(end)}</text>',
        f'<text x="10" y="{TOP - 8}" font-size="11">{unit}</text>',
    ]
    for name, limit in (("lower", field.lower_limit), ("upper", field.upper_limit)):
        if limit is None:
            continue
        y = _f(y_of(limit))
        parts.append(
            f'<line class="limit-line {name}" x1="{LEFT}" y1="{y}" x2="{LEFT + plot_w}" y2="{y}" '
            f'stroke="#d08000" stroke-dasharray="6 4"/>'
        )
        parts.append(f'<text x="{LEFT + 4}" y="{_f(y_of(limit) - 4)}" font-size="10">{name} {limit:g}</text>')

    path = " ".join(f"{_f(x_of(t))},{_f(y_of(v))}" for t, v, _ in points)
    parts.append(f'<polyline class="series" points="{path}" fill="none" stroke="#3060c0"/>')
    for t, v, status in points:
        out = status in (ValueStatus.ABOVE_UPPER, ValueStatus.BELOW_LOWER)
        cls = "point out-of-limit" if out else "point"
        fill = "#d02020" if out else "#3060c0"
        r = "5" if out else "3"
        parts.append(
            f'<circle class="{cls}" cx="{_f(x_of(t))}" cy="{_f(y_of(v))}" r="{r}" fill="{fill}">'
            f'<title>{format_instant(t)}: {v:g} {unit}</title></circle>'
        )

    trend = compute_trend([(t, v) for t, v, _ in points], origin=start)
    if trend is not None:
        d_end = span / SECONDS_PER_DAY
        parts.append(
            f'<line class="trend" x1="{_f(x_of_days(0.0))}" y1="{_f(y_of(trend.at(0.0)))}" '
            f'x2="{_f(x_of_days(d_end))}" y2="{_f(y_of(trend.at(d_end)))}" '
            f'stroke="#209040" stroke-width="2"/>'
        )
        parts.append(
            f'<text class="trend-label" x="{LEFT + plot_w}" y="{TOP - 8}" font-size="11" '
            f'text-anchor="end">trend {trend.slope:+.3f} {unit}/day (n={trend.n})</text>'
        )
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode("utf-8"), trend
