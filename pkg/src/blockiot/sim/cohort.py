"""Seeded synthetic patients driven by a small condition table."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from datetime import date, timedelta
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

import yaml

from blockiot.core.model import AlertPrefs, DeviceType, PatientProfile
from blockiot.core.peerid import derive_peer_id
from blockiot.core.templates import TemplateRegistry, default_registry

DOB_START = date(1935, 1, 1)
DOB_SPAN_DAYS = 70 * 365
# fields whose readings are whole counts; baselines are drawn from the limit range directly
INTEGER_FIELDS = frozenset({"dose_count"})


@dataclass(frozen=True)
class Condition:
    name: str
    prevalence: float
    devices: tuple[DeviceType, ...]
    medications: tuple[str, ...] = ()
    obesity_multiplier: float = 1.0

    def probability(self, obese: bool) -> float:
        return min(1.0, self.prevalence * (self.obesity_multiplier if obese else 1.0))


@dataclass(frozen=True)
class ConditionTable:
    conditions: tuple[Condition, ...]
    obesity: str
    always_devices: tuple[DeviceType, ...]
    first_names: tuple[str, ...]
    last_names: tuple[str, ...]
    forced_profiles: Mapping[str, Mapping]

    def get(self, name: str) -> Condition:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def expected_prevalence(self, name: str) -> float:
        """Marginal rate of a condition across the population."""
        c = self.get(name)
        if name == self.obesity:
            return c.prevalence
        p_ob = self.get(self.obesity).prevalence
        return p_ob * c.probability(True) + (1 - p_ob) * c.probability(False)


def parse_condition_table(text: str) -> ConditionTable:
    raw = yaml.safe_load(text)
    conditions = tuple(
        Condition(
            c["name"],
            float(c["prevalence"]),
            tuple(DeviceType.parse(d) for d in c.get("devices", ())),
            tuple(c.get("medications", ()) or ()),
            float(c.get("obesity_multiplier", 1.0)),
        )
        for c in raw["conditions"]
    )
    for c in conditions:
        if not 0.0 <= c.prevalence <= 1.0 or c.obesity_multiplier < 0:
            raise ValueError(f"condition {c.name!r} has an invalid rate")
    table = ConditionTable(
        conditions,
        raw["obesity_condition"],
        tuple(DeviceType.parse(d) for d in raw.get("always_devices", ())),
        tuple(raw["first_names"]),
        tuple(raw["last_names"]),
        raw.get("forced_profiles") or {},
    )
    table.get(table.obesity)
    return table


def load_condition_table(path: str | Path | None = None) -> ConditionTable:
    if path is None:
        text = resources.files("blockiot.data").joinpath("conditions.yaml").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return parse_condition_table(text)


@dataclass(frozen=True)
class SyntheticPatient:
    profile: PatientProfile
    baselines: Mapping[DeviceType, Mapping[str, float]]

    @property
    def peer_id(self) -> str:
        return self.profile.peer_id


@dataclass(frozen=True)
class SyntheticCohort:
    seed: int
    patients: tuple[SyntheticPatient, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "patients": [
                {
                    "profile": p.profile.to_dict(),
                    "baselines": {d.value: dict(b) for d, b in p.baselines.items()},
                }
                for p in self.patients
            ],
        }


def sample_baselines(
    devices: Sequence[DeviceType], registry: TemplateRegistry, rng: random.Random,
    fixed: Optional[Mapping[str, Mapping[str, float]]] = None,
) -> dict[DeviceType, dict[str, float]]:
    """Baseline per limited field, drawn from the middle half of the normal range."""
    out: dict[DeviceType, dict[str, float]] = {}
    for device in devices:
        template = registry.for_device(device)[0]
        values: dict[str, float] = {}
        for f in template.fields:
            if f.lower_limit is None or f.upper_limit is None:
                continue
            if f.key in INTEGER_FIELDS:
                values[f.key] = float(rng.randint(int(f.lower_limit), int(f.upper_limit)))
                continue
            span = f.upper_limit - f.lower_limit
            v = rng.uniform(f.lower_limit + span / 4, f.upper_limit - span / 4)
            values[f.key] = round(v, 2)
        values.update((fixed or {}).get(device.value, {}))
        out[device] = values
    return out


def _assemble(
    first: str, last: str, dob: date, diagnoses: Sequence[str], table: ConditionTable,
    registry: TemplateRegistry, rng: random.Random, physician: Optional[str],
    fixed_baselines: Optional[Mapping] = None,
) -> SyntheticPatient:
    devices: set[DeviceType] = set(table.always_devices)
    meds: list[str] = []
    for name in diagnoses:
        cond = table.get(name)
        devices.update(cond.devices)
        meds.extend(m for m in cond.medications if m not in meds)
    order = list(DeviceType)
    device_list = tuple(sorted(devices, key=order.index))
    profile = PatientProfile(
        derive_peer_id(first, last, dob), first, last, dob, tuple(diagnoses), device_list,
        tuple(meds), AlertPrefs(), physician,
    )
    return SyntheticPatient(profile, sample_baselines(device_list, registry, rng, fixed_baselines))


def forced_patient(
    name: str, table: Optional[ConditionTable] = None, registry: Optional[TemplateRegistry] = None,
    seed: int = 0, physician: Optional[str] = "ehr-1",
) -> SyntheticPatient:
    table = table or load_condition_table()
    spec = table.forced_profiles[name]
    dob = spec["dob"] if isinstance(spec["dob"], date) else date.fromisoformat(str(spec["dob"]))
    return _assemble(
        spec["first"], spec["last"], dob, spec["diagnoses"], table,
        registry or default_registry(), random.Random(seed), physician, spec.get("baselines"),
    )


def generate_cohort(
    n: int,
    seed: int = 7,
    table: Optional[ConditionTable] = None,
    registry: Optional[TemplateRegistry] = None,
    forced: Sequence[str] = (),
    physicians: Sequence[str] = ("ehr-1",),
) -> SyntheticCohort:
    """``n`` patients (forced profiles first), a pure function of the arguments."""
    if n < 0:
        raise ValueError("n must be >= 0")
    table = table or load_condition_table()
    registry = registry or default_registry()
    rng = random.Random(seed)
    patients: list[SyntheticPatient] = []
    seen: set[str] = set()
    for name in forced[:n]:
        p = forced_patient(name, table, registry, rng.randrange(1 << 30), physicians[0] if physicians else None)
        patients.append(p)
        seen.add(p.peer_id)
    while len(patients) < n:
        first = rng.choice(table.first_names)
        last = rng.choice(table.last_names)
        dob = DOB_START + timedelta(days=rng.randrange(DOB_SPAN_DAYS))
        obese = rng.random() < table.get(table.obesity).prevalence
        diagnoses = [table.obesity] if obese else []
        for c in table.conditions:
            if c.name != table.obesity and rng.random() < c.probability(obese):
                diagnoses.append(c.name)
        physician = rng.choice(physicians) if physicians else None
        patient = _assemble(first, last, dob, diagnoses, table, registry, rng, physician)
        if patient.peer_id in seen:
            continue  # same name and birthday drawn twice; draw again
        seen.add(patient.peer_id)
        patients.append(patient)
    return SyntheticCohort(seed, tuple(patients))
