from __future__ import annotations

import bisect
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Iterable

from blockiot.clock import format_instant
from blockiot.errors import InvalidSchedule


@dataclass(frozen=True)
class DoseSchedule:
    period: timedelta
    tolerance: timedelta

    def validate(self) -> None:
        if self.period <= timedelta(0):
            raise InvalidSchedule("period must be positive")
        if self.tolerance < timedelta(0):
            raise InvalidSchedule("tolerance must be non-negative")
        if not self.tolerance * 2 < self.period:
            raise InvalidSchedule("tolerance must be less than half the period")


@dataclass(frozen=True)
class AdherenceReport:
    expected: int
    taken: int
    missed: tuple[datetime, ...]
    matches: tuple[tuple[datetime, datetime], ...]  # (slot, dose)

    @property
    def rate(self) -> float:
        return 1.0 if self.expected == 0 else self.taken / self.expected

    def to_dict(self) -> dict:
        return {
            "expected": self.expected,
            "taken": self.taken,
            "rate": self.rate,
            "missed": [format_instant(m) for m in self.missed],
        }


def expected_slots(schedule: DoseSchedule, start: datetime, end: datetime) -> list[datetime]:
    slots = []
    t = start
    while t < end:
        slots.append(t)
        t += schedule.period
    return slots


def check_adherence(
    doses: Iterable[datetime], schedule: DoseSchedule, window: tuple[datetime, datetime]
) -> AdherenceReport:
    """Match dose timestamps to the expected slots ``start, start+period, ...`` in ``[start, end)``.

    Each slot takes the nearest unused dose within ``tolerance``; ties go to the
    earlier dose. Because slot windows are disjoint when the tolerance is under
    half a period, this greedy pass is also a maximum matching.
    """
    schedule.validate()
    start, end = window
    if end < start:
        raise InvalidSchedule("window end precedes start")
    times = sorted(doses)
    used = [False] * len(times)
    missed, matches = [], []
    for slot in expected_slots(schedule, start, end):
        lo = bisect.bisect_left(times, slot - schedule.tolerance)
        best = None
        for i in range(lo, len(times)):
            if times[i] > slot + schedule.tolerance:
                break
            if used[i]:
                continue
            if best is None or abs(times[i] - slot) < abs(times[best] - slot):
                best = i
        if best is None:
            missed.append(slot)
        else:
            used[best] = True
            matches.append((slot, times[best]))
    return AdherenceReport(len(missed) + len(matches), len(matches), tuple(missed), tuple(matches))
