"""Domain value types. Everything here is immutable and safe to share."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, datetime
from enum import Enum
from typing import Any, Mapping, Optional, Union

from blockiot.clock import format_instant, parse_instant

Scalar = Union[int, float, str]
PayloadValue = Union[int, float, str, list]


class DeviceType(str, Enum):
    BLOOD_PRESSURE = "blood_pressure"
    HEART_RATE = "heart_rate"
    BLOOD_OXYGEN = "blood_oxygen"
    SUGAR_LEVELS = "sugar_levels"
    EKG = "ekg"
    COMPLIANCE = "compliance"
    SPIROMETRY = "spirometry"
    CELL_COUNTS = "cell_counts"

    @classmethod
    def parse(cls, value: "str | DeviceType") -> "DeviceType":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown device type {value!r}") from None


class ValueStatus(str, Enum):
    WITHIN_LIMITS = "WithinLimits"
    BELOW_LOWER = "BelowLower"
    ABOVE_UPPER = "AboveUpper"
    NOT_NUMERIC = "NotNumeric"


def is_number(value: object) -> bool:
    return (
        isinstance(value, (int, float))
        and not isinstance(value, bool)
        and math.isfinite(value)
    )


@dataclass(frozen=True)
class TemplateField:
    key: str
    unit: str
    lower_limit: Optional[float] = None
    upper_limit: Optional[float] = None

    def __post_init__(self):
        if (
            self.lower_limit is not None
            and self.upper_limit is not None
            and not self.lower_limit < self.upper_limit
        ):
            raise ValueError(
                f"field {self.key!r}: lower_limit {self.lower_limit} must be < upper_limit {self.upper_limit}"
            )

    @property
    def has_limits(self) -> bool:
        return self.lower_limit is not None or self.upper_limit is not None

    def classify(self, value: Any) -> ValueStatus:
        """Boundary values count as within limits."""
        if not is_number(value):
            return ValueStatus.NOT_NUMERIC
        if self.upper_limit is not None and value > self.upper_limit:
            return ValueStatus.ABOVE_UPPER
        if self.lower_limit is not None and value < self.lower_limit:
            return ValueStatus.BELOW_LOWER
        return ValueStatus.WITHIN_LIMITS

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "unit": self.unit,
            "lower_limit": self.lower_limit,
            "upper_limit": self.upper_limit,
        }


@dataclass(frozen=True)
class Template:
    template_id: str
    device_type: DeviceType
    fields: tuple[TemplateField, ...]
    identifying_keys: frozenset[str]
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "device_type", DeviceType.parse(self.device_type))
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "identifying_keys", frozenset(self.identifying_keys))
        keys = [f.key for f in self.fields]
        if len(set(keys)) != len(keys):
            raise ValueError(f"template {self.template_id!r} has duplicate field keys")
        if not self.identifying_keys:
            raise ValueError(f"template {self.template_id!r} needs at least one identifying key")
        missing = self.identifying_keys - set(keys)
        if missing:
            raise ValueError(
                f"template {self.template_id!r}: identifying keys {sorted(missing)} are not fields"
            )

    @property
    def field_keys(self) -> tuple[str, ...]:
        return tuple(f.key for f in self.fields)

    def field(self, key: str) -> TemplateField:
        for f in self.fields:
            if f.key == key:
                return f
        raise KeyError(key)

    def to_dict(self) -> dict:
        out = {
            "template_id": self.template_id,
            "device_type": self.device_type.value,
            "identifying_keys": sorted(self.identifying_keys),
            "fields": [f.to_dict() for f in self.fields],
        }
        if self.description:
            out["description"] = self.description
        return out


@dataclass(frozen=True)
class DeviceReading:
    peer_id: str
    timestamp: datetime
    payload: Mapping[str, PayloadValue]
    device_type_hint: Optional[str] = None


@dataclass(frozen=True)
class ObservedValue:
    key: str
    unit: str
    value: PayloadValue
    status: ValueStatus

    def to_dict(self) -> dict:
        return {"key": self.key, "unit": self.unit, "value": self.value, "status": self.status.value}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ObservedValue":
        return cls(d["key"], d["unit"], d["value"], ValueStatus(d["status"]))


@dataclass(frozen=True)
class HarmonizedObservation:
    peer_id: str
    device_type: DeviceType
    template_id: str
    timestamp: datetime
    values: tuple[ObservedValue, ...]
    warnings: tuple[str, ...] = ()

    def value(self, key: str) -> ObservedValue:
        for v in self.values:
            if v.key == key:
                return v
        raise KeyError(key)

    @property
    def abnormal(self) -> tuple[ObservedValue, ...]:
        return tuple(
            v for v in self.values
            if v.status in (ValueStatus.ABOVE_UPPER, ValueStatus.BELOW_LOWER)
        )

    def with_warning(self, message: str) -> "HarmonizedObservation":
        return HarmonizedObservation(
            self.peer_id, self.device_type, self.template_id, self.timestamp,
            self.values, self.warnings + (message,),
        )

    def to_dict(self) -> dict:
        return {
            "peer_id": self.peer_id,
            "device_type": self.device_type.value,
            "template_id": self.template_id,
            "timestamp": format_instant(self.timestamp),
            "values": [v.to_dict() for v in self.values],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "HarmonizedObservation":
        return cls(
            peer_id=d["peer_id"],
            device_type=DeviceType(d["device_type"]),
            template_id=d["template_id"],
            timestamp=parse_instant(d["timestamp"]),
            values=tuple(ObservedValue.from_dict(v) for v in d["values"]),
            warnings=tuple(d.get("warnings", ())),
        )


@dataclass(frozen=True)
class AlertRule:
    confirm_with_patient_first: bool = False
    suppress: bool = False


@dataclass(frozen=True)
class Channel:
    party: str  # "patient" | "physician"
    sink_id: str
    quiet_hours: Optional[tuple[int, int]] = None  # [start_hour, end_hour) UTC

    def __post_init__(self):
        if self.party not in ("patient", "physician"):
            raise ValueError(f"unknown party {self.party!r}")
        if self.quiet_hours is not None:
            start, end = self.quiet_hours
            if not (0 <= start < 24 and 0 <= end < 24):
                raise ValueError("quiet hours must be within 0..23")
            object.__setattr__(self, "quiet_hours", (int(start), int(end)))

    def is_quiet(self, when: datetime) -> bool:
        if self.quiet_hours is None:
            return False
        start, end = self.quiet_hours
        h = when.hour
        if start == end:
            return False
        return start <= h < end if start < end else (h >= start or h < end)


DEFAULT_CHANNELS = (Channel("patient", "patient"), Channel("physician", "physician"))


@dataclass(frozen=True)
class AlertPrefs:
    """Alert routing preferences for one patient.

    ``rules`` is keyed by ``"<device_type>.<field>"``; ``"<device_type>.*"``
    applies to every field of that device.
    """

    rules: Mapping[str, AlertRule] = field(default_factory=dict)
    channels: tuple[Channel, ...] = DEFAULT_CHANNELS

    def rule_for(self, device_type: str, key: str) -> AlertRule:
        device_type = getattr(device_type, "value", device_type)
        return (
            self.rules.get(f"{device_type}.{key}")
            or self.rules.get(f"{device_type}.*")
            or AlertRule()
        )

    def channels_for(self, party: str) -> tuple[Channel, ...]:
        return tuple(c for c in self.channels if c.party == party)

    def to_dict(self) -> dict:
        return {
            "rules": {
                k: {"confirm_with_patient_first": r.confirm_with_patient_first, "suppress": r.suppress}
                for k, r in sorted(self.rules.items())
            },
            "channels": [
                {"party": c.party, "sink_id": c.sink_id,
                 "quiet_hours": list(c.quiet_hours) if c.quiet_hours else None}
                for c in self.channels
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "AlertPrefs":
        if not d:
            return cls()
        rules = {k: AlertRule(**v) for k, v in (d.get("rules") or {}).items()}
        channels = d.get("channels")
        if channels is None:
            return cls(rules=rules)
        return cls(
            rules=rules,
            channels=tuple(
                Channel(c["party"], c["sink_id"],
                        tuple(c["quiet_hours"]) if c.get("quiet_hours") else None)
                for c in channels
            ),
        )


@dataclass(frozen=True)
class PatientProfile:
    peer_id: str
    first: str
    last: str
    dob: date
    diagnoses: tuple[str, ...] = ()
    devices: tuple[DeviceType, ...] = ()
    medications: tuple[str, ...] = ()
    alert_preferences: AlertPrefs = field(default_factory=AlertPrefs)
    physician: Optional[str] = None  # EHR node id holding the second key

    def __post_init__(self):
        object.__setattr__(self, "diagnoses", tuple(self.diagnoses))
        object.__setattr__(self, "devices", tuple(DeviceType.parse(d) for d in self.devices))
        object.__setattr__(self, "medications", tuple(self.medications))

    def to_dict(self) -> dict:
        return {
            "peer_id": self.peer_id,
            "first": self.first,
            "last": self.last,
            "dob": self.dob.isoformat(),
            "diagnoses": list(self.diagnoses),
            "devices": [d.value for d in self.devices],
            "medications": list(self.medications),
            "alert_preferences": self.alert_preferences.to_dict(),
            "physician": self.physician,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PatientProfile":
        return cls(
            peer_id=d["peer_id"],
            first=d["first"],
            last=d["last"],
            dob=date.fromisoformat(d["dob"]),
            diagnoses=tuple(d.get("diagnoses", ())),
            devices=tuple(d.get("devices", ())),
            medications=tuple(d.get("medications", ())),
            alert_preferences=AlertPrefs.from_dict(d.get("alert_preferences")),
            physician=d.get("physician"),
        )
