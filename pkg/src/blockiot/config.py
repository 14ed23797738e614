"""Single-file YAML configuration with ``BLOCKIOT_`` environment overrides.

``BLOCKIOT_ROOT`` and ``BLOCKIOT_CLOCK`` set top-level keys;
``BLOCKIOT_<SECTION>_<KEY>`` sets a section key, e.g. ``BLOCKIOT_GATEWAY_HTTP_PORT=9000``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from blockiot.clock import Clock, ManualClock, parse_instant, utcnow


@dataclass
class GatewayConfig:
    host: str = "127.0.0.1"
    http_port: int = 8080
    mqtt_port: int = 1883
    coap_port: int = 5683
    queue_capacity: int = 65_536
    max_payload: int = 64 * 1024
    skew_seconds: float = 300.0
    auth_enforce: bool = True
    journal: bool = True
    batch_limit: int = 4096


@dataclass
class StoreConfig:
    block_limit: int = 1 << 20
    capacity_bytes: Optional[int] = None
    fsync: bool = False
    regression_tolerance_seconds: float = 60.0


@dataclass
class LedgerConfig:
    seal_size: int = 64
    seal_interval_seconds: float = 5.0
    grant_hours: float = 24.0
    confirmation_timeout_minutes: float = 30.0
    nodes: dict = field(default_factory=lambda: {"ehr-1": "ehr", "admin": "admin"})


@dataclass
class SimConfig:
    seed: int = 7
    patients: int = 1000
    readings_per_device: int = 12
    load_requests: int = 10_000
    load_interval_seconds: float = 0.5


@dataclass
class Config:
    root: str = "blockiot-data"
    clock: str = "system"
    templates: list = field(default_factory=list)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    store: StoreConfig = field(default_factory=StoreConfig)
    ledger: LedgerConfig = field(default_factory=LedgerConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    @property
    def root_path(self) -> Path:
        return Path(self.root)

    def make_clock(self) -> Clock:
        if self.clock == "system":
            return utcnow
        if self.clock.startswith("fixed:"):
            return ManualClock(parse_instant(self.clock[len("fixed:"):]))
        raise ValueError(f"unknown clock setting {self.clock!r}")

    @property
    def grant_duration(self) -> timedelta:
        return timedelta(hours=self.ledger.grant_hours)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"gateway": GatewayConfig, "store": StoreConfig, "ledger": LedgerConfig, "sim": SimConfig}


def _coerce(value: str, current: Any) -> Any:
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, (dict, list)) or current is None:
        return yaml.safe_load(value)
    return value


def _apply(section: Any, values: Mapping[str, Any], where: str) -> None:
    known = {f.name for f in dataclasses.fields(section)}
    for key, val in values.items():
        if key not in known:
            raise ValueError(f"unknown config key {where}.{key}")
        setattr(section, key, val)


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        data = yaml.safe_load(Path(path).read_text("utf-8")) or {}
        for key, val in data.items():
            if key in _SECTIONS:
                _apply(getattr(cfg, key), val or {}, key)
            else:
                _apply(cfg, {key: val}, "config")
    env = os.environ if env is None else env
    for name, raw in env.items():
        if not name.startswith("BLOCKIOT_"):
            continue
        rest = name[len("BLOCKIOT_"):].lower()
        for section in _SECTIONS:
            if rest.startswith(section + "_"):
                obj, key = getattr(cfg, section), rest[len(section) + 1:]
                break
        else:
            obj, key = cfg, rest
        if key in {f.name for f in dataclasses.fields(obj)}:
            setattr(obj, key, _coerce(raw, getattr(obj, key)))
    return cfg
