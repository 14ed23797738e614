from datetime import date, datetime, timezone

import pytest

from blockiot.clock import ManualClock
from blockiot.config import Config
from blockiot.core.model import DeviceType, PatientProfile
from blockiot.core.peerid import derive_peer_id
from blockiot.core.templates import default_registry

T0 = datetime(2026, 3, 2, 9, 0, tzinfo=timezone.utc)
WENDY_DOB = date(1969, 1, 15)


@pytest.fixture
def clock():
    return ManualClock(T0)


@pytest.fixture(scope="session")
def registry():
    return default_registry()


@pytest.fixture
def wendy():
    pid = derive_peer_id("Wendy", "Barnes", WENDY_DOB)
    return PatientProfile(
        pid, "Wendy", "Barnes", WENDY_DOB,
        ("Diabetes", "Obstructive Sleep Apnea", "Hypertension", "Asthma", "Obesity"),
        (DeviceType.SUGAR_LEVELS, DeviceType.BLOOD_OXYGEN, DeviceType.BLOOD_PRESSURE,
         DeviceType.COMPLIANCE, DeviceType.HEART_RATE),
        ("Metformin", "Lisinopril", "Symbicort", "Albuterol"),
        physician="ehr-1",
    )


@pytest.fixture
def node(clock):
    from blockiot.node import BlockIoTNode

    n = BlockIoTNode(Config(), clock=clock, in_memory=True)
    yield n
    n.close()


def ingest(node, peer_id, device, payload, when=None):
    """Publish one reading over the HTTP handler and process it."""
    import json

    from blockiot.clock import format_instant

    body = dict(payload)
    if when is not None:
        body["timestamp"] = format_instant(when)
    ack = node.gateway.handle_http_publish(
        "POST", f"/ingest/{peer_id}/{device}",
        {"X-Device-Token": node.device_token(peer_id, device)}, json.dumps(body).encode(),
    )
    assert ack.accepted, ack.reason
    return node.process_pending()


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (ok, detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
