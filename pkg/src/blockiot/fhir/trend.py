from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime
from typing import Optional, Sequence, Union

SECONDS_PER_DAY = 86_400.0

TimePoint = Union[datetime, float, int]


@dataclass(frozen=True)
class TrendLine:
    slope: float  # value units per day
    intercept: float  # value at the origin (window start)
    n: int

    def at(self, days: float) -> float:
        return self.intercept + self.slope * days


def to_days(t: TimePoint, origin: Optional[datetime]) -> float:
    if isinstance(t, datetime):
        if origin is None:
            raise ValueError("datetime points need an origin")
        return (t - origin).total_seconds() / SECONDS_PER_DAY
    return float(t)


def compute_trend(
    points: Sequence[tuple[TimePoint, float]], origin: Optional[datetime] = None
) -> Optional[TrendLine]:
    """Ordinary least-squares line through ``(t, value)``.

    ``t`` is a datetime (measured in days from ``origin``, which defaults to
    the earliest point) or a plain number of days. Returns None when fewer
    than two points are given or every ``t`` is identical.
    """
    n = len(points)
    if n < 2:
        return None
    if origin is None and isinstance(points[0][0], datetime):
        origin = min(p[0] for p in points)
    ts = [to_days(t, origin) for t, _ in points]
    if min(ts) == max(ts):
        return None
    vs = [float(v) for _, v in points]
    t_mean = math.fsum(ts) / n
    v_mean = math.fsum(vs) / n
    sxx = math.fsum((t - t_mean) ** 2 for t in ts)
    if sxx == 0.0:
        return None
    sxy = math.fsum((t - t_mean) * (v - v_mean) for t, v in zip(ts, vs))
    slope = sxy / sxx
    return TrendLine(slope, v_mean - slope * t_mean, n)
