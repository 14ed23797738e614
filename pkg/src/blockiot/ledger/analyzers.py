from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence

from blockiot.core.model import DeviceType, HarmonizedObservation, is_number
from blockiot.errors import DuplicateAnalyzer


@dataclass(frozen=True)
class Finding:
    field: str
    label: str
    message: str


class Analyzer(Protocol):
    name: str

    def __call__(self, obs: HarmonizedObservation) -> Sequence[Finding]: ...


class AnalyzerRegistry:
    def __init__(self):
        self._analyzers: dict[DeviceType, Analyzer] = {}

    def register_analyzer(self, device_type: DeviceType | str, analyzer: Analyzer) -> None:
        device_type = DeviceType.parse(device_type)
        if device_type in self._analyzers:
            raise DuplicateAnalyzer(f"an analyzer is already registered for {device_type.value}")
        self._analyzers[device_type] = analyzer

    def get(self, device_type: DeviceType | str):
        return self._analyzers.get(DeviceType.parse(device_type))

    def analyze(self, obs: HarmonizedObservation) -> list[Finding]:
        analyzer = self._analyzers.get(obs.device_type)
        return list(analyzer(obs)) if analyzer is not None else []


def interval_variation(intervals: Sequence[float]) -> float:
    """Largest relative change between consecutive intervals."""
    return max(
        (abs(b - a) / a for a, b in zip(intervals, intervals[1:]) if a > 0), default=0.0
    )


class EkgRhythmAnalyzer:
    """Stand-in rhythm screen, not a clinical arrhythmia detector.

    Flags a strip when the mean R-R interval is outside [0.33 s, 1.5 s] or any
    beat-to-beat change exceeds 25% of the preceding interval.
    """

    name = "ekg-rhythm"

    def __init__(self, field: str = "rr_intervals", min_mean: float = 0.33,
                 max_mean: float = 1.5, max_variation: float = 0.25):
        self.field = field
        self.min_mean = min_mean
        self.max_mean = max_mean
        self.max_variation = max_variation

    def __call__(self, obs: HarmonizedObservation) -> list[Finding]:
        try:
            raw = obs.value(self.field).value
        except KeyError:
            return []
        if not isinstance(raw, list):
            return []
        intervals = [float(x) for x in raw if is_number(x)]
        if not intervals:
            return []
        reasons = []
        mean = sum(intervals) / len(intervals)
        if not self.min_mean <= mean <= self.max_mean:
            reasons.append(f"mean R-R {mean:.3f}s outside [{self.min_mean}, {self.max_mean}]")
        variation = interval_variation(intervals)
        if variation > self.max_variation:
            reasons.append(f"beat-to-beat variation {variation:.0%} > {self.max_variation:.0%}")
        if not reasons:
            return []
        return [Finding(self.field, "possible arrhythmia", "; ".join(reasons))]
