"""Stream plans and a replayer that speaks HTTP, MQTT or CoAP to a node."""

from __future__ import annotations

import functools
import json
import random
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional, Sequence

from blockiot.clock import format_instant
from blockiot.core.model import DeviceType, Template
from blockiot.core.templates import TemplateRegistry, default_registry
from blockiot.errors import EndpointUnreachable
from blockiot.gateway import coap
from blockiot.gateway.mqtt import MqttClient, MqttPublish
from blockiot.gateway.pipeline import Protocol
from blockiot.sim.cohort import INTEGER_FIELDS, SyntheticPatient

MEAL_CONTEXTS = ("fasting", "pre-meal", "post-meal")
RR_BEATS = 8


@functools.lru_cache(maxsize=1)
def _default_registry() -> TemplateRegistry:
    return default_registry()


@dataclass(frozen=True)
class Anomaly:
    at: datetime
    field: str
    value: float


@dataclass(frozen=True)
class StreamPlan:
    patient: SyntheticPatient
    device_type: DeviceType
    start: datetime
    count: int
    interval: timedelta = timedelta(seconds=1)
    jitter: float = 0.05  # fraction of the normal range
    anomalies: tuple[Anomaly, ...] = ()
    seed: int = 0

    @property
    def rate_per_second(self) -> float:
        return 1.0 / self.interval.total_seconds()

    @property
    def duration(self) -> timedelta:
        return self.interval * self.count

    def template(self, registry: Optional[TemplateRegistry] = None) -> Template:
        return (registry or _default_registry()).for_device(self.device_type)[0]

    def validate(self, registry: Optional[TemplateRegistry] = None) -> None:
        template = self.template(registry)
        slots = {self.start + self.interval * i for i in range(self.count)}
        for a in self.anomalies:
            if a.at not in slots:
                raise ValueError(f"anomaly at {format_instant(a.at)} is not a reading instant")
            f = template.field(a.field)
            if not f.has_limits or f.classify(a.value).value == "WithinLimits":
                raise ValueError(f"anomaly {a.field}={a.value} is not outside the limits")

    def readings(self, registry: Optional[TemplateRegistry] = None) -> list[tuple[datetime, dict]]:
        """Deterministic ``(timestamp, payload)`` pairs; payloads omit the timestamp key."""
        template = self.template(registry)
        rng = random.Random(f"{self.seed}/{self.patient.peer_id}/{self.device_type.value}")
        baseline = self.patient.baselines.get(self.device_type, {})
        overrides: dict[datetime, dict[str, float]] = {}
        for a in self.anomalies:
            overrides.setdefault(a.at, {})[a.field] = a.value
        out = []
        for i in range(self.count):
            t = self.start + self.interval * i
            payload = _payload(template, baseline, self.patient, self.jitter, rng)
            payload.update(overrides.get(t, {}))
            out.append((t, payload))
        return out

    def bodies(self, registry: Optional[TemplateRegistry] = None) -> list[bytes]:
        return [
            json.dumps({**p, "timestamp": format_instant(t)}).encode("utf-8")
            for t, p in self.readings(registry)
        ]


def _payload(template: Template, baseline, patient: SyntheticPatient, jitter: float,
             rng: random.Random) -> dict:
    payload: dict = {}
    for f in template.fields:
        if f.has_limits and f.key in baseline:
            lo, hi, b = f.lower_limit, f.upper_limit, baseline[f.key]
            if f.key in INTEGER_FIELDS:
                payload[f.key] = rng.randint(int(lo), int(hi))
                continue
            room = min(b - lo, hi - b)
            amp = max(0.0, min(jitter * (hi - lo), 0.9 * room))
            v = round(b + rng.uniform(-amp, amp), 2)
            payload[f.key] = v if lo <= v <= hi else b
        elif f.key == "meal_context":
            payload[f.key] = rng.choice(MEAL_CONTEXTS)
        elif f.key == "medication":
            meds = patient.profile.medications
            payload[f.key] = meds[0] if meds else "Albuterol"
        elif f.key == "rr_intervals":
            rate = baseline.get("ventricular_rate", 75.0)
            base = 60.0 / rate
            payload[f.key] = [round(base * (1 + rng.uniform(-0.03, 0.03)), 3) for _ in range(RR_BEATS)]
    return payload


def anomaly_value(template: Template, key: str, rng: random.Random) -> float:
    """A value strictly outside ``key``'s limits, kept non-negative."""
    f = template.field(key)
    lo, hi = f.lower_limit, f.upper_limit
    span = hi - lo
    if f.key in INTEGER_FIELDS:
        options = [hi + rng.randint(1, 3)] + ([lo - 1] if lo >= 1 else [])
        return float(rng.choice(options))
    below = round(lo - span * rng.uniform(0.1, 0.5), 2)
    above = round(hi + span * rng.uniform(0.1, 0.5), 2)
    if below > 0 and f.unit == "%" and hi >= 100:
        return below  # saturation percentages cannot exceed 100
    return rng.choice([below, above]) if below > 0 else above


def make_plan(
    patient: SyntheticPatient,
    device_type: DeviceType | str,
    start: datetime,
    count: int,
    interval: timedelta = timedelta(seconds=1),
    anomalies: int = 0,
    seed: int = 0,
    registry: Optional[TemplateRegistry] = None,
) -> StreamPlan:
    """Plan with ``anomalies`` out-of-limit values on distinct readings."""
    device_type = DeviceType.parse(device_type)
    template = (registry or _default_registry()).for_device(device_type)[0]
    if anomalies > count:
        raise ValueError("more anomalies than readings")
    rng = random.Random(f"anomalies/{seed}/{patient.peer_id}/{device_type.value}")
    limited = [f.key for f in template.fields if f.has_limits]
    picks = sorted(rng.sample(range(count), anomalies))
    injected = []
    for i in picks:
        key = rng.choice(limited)
        injected.append(Anomaly(start + interval * i, key, anomaly_value(template, key, rng)))
    plan = StreamPlan(patient, device_type, start, count, interval, anomalies=tuple(injected), seed=seed)
    plan.validate(registry)
    return plan


# -- endpoints --------------------------------------------------------------


class NodeEndpoint:
    """Calls the gateway handlers of an in-process node directly."""

    def __init__(self, node):
        self.node = node
        self._mid = 0
        self._pid = 0
        self._lock = threading.Lock()
        # one simulated client address per instance, so CoAP dedup stays per-client
        self._source = f"sim-{uuid.uuid4().hex[:12]}"

    def _next(self) -> tuple[int, int]:
        with self._lock:
            self._mid = (self._mid + 1) % 0x10000
            self._pid = self._pid % 65535 + 1
            return self._mid, self._pid

    def publish(self, protocol: Protocol, peer_id: str, device_type: str, body: bytes,
                token: str) -> tuple[bool, Optional[str]]:
        gw = self.node.gateway
        mid, pid = self._next()
        if protocol is Protocol.HTTP:
            ack = gw.handle_http_publish(
                "POST", f"/ingest/{peer_id}/{device_type}", {"X-Device-Token": token}, body
            )
        elif protocol is Protocol.MQTT:
            ack = gw.handle_mqtt_publish(
                MqttPublish(f"blockiot/{peer_id}/{device_type}", body, 1, pid), password=token
            )
        else:
            msg = coap.request(coap.POST, f"ingest/{peer_id}/{device_type}", body, mid,
                               query=[f"token={token}"])
            ack = gw.handle_coap_post(msg, source=self._source)
        return ack.accepted, ack.reason

    def close(self) -> None:
        pass


class NetworkEndpoint:
    """Talks to a running ``serve`` process over real sockets."""

    def __init__(self, host: str = "127.0.0.1", http_port: int = 8080, mqtt_port: int = 1883,
                 coap_port: int = 5683, timeout: float = 10.0):
        import httpx

        self.host = host
        self.ports = {Protocol.HTTP: http_port, Protocol.MQTT: mqtt_port, Protocol.COAP: coap_port}
        self.timeout = timeout
        self._http = httpx.Client(base_url=f"http://{host}:{http_port}", timeout=timeout)
        self._local = threading.local()

    def _coap(self) -> coap.CoapClient:
        c = getattr(self._local, "coap", None)
        if c is None:
            c = self._local.coap = coap.CoapClient(self.host, self.ports[Protocol.COAP])
        return c

    def publish(self, protocol: Protocol, peer_id: str, device_type: str, body: bytes,
                token: str, mqtt: Optional[MqttClient] = None) -> tuple[bool, Optional[str]]:
        try:
            if protocol is Protocol.HTTP:
                r = self._http.post(f"/ingest/{peer_id}/{device_type}", content=body,
                                    headers={"X-Device-Token": token})
                return r.status_code == 202, None if r.status_code == 202 else r.text
            if protocol is Protocol.MQTT:
                client = mqtt or self.mqtt_session(peer_id, device_type, token)
                ok = client.publish(f"blockiot/{peer_id}/{device_type}", body, qos=1)
                return ok, None if ok else "connection closed before PUBACK"
            reply = self._coap().post(f"ingest/{peer_id}/{device_type}", body, [f"token={token}"])
        except OSError as exc:
            raise EndpointUnreachable(f"{protocol.value} endpoint {self.host}: {exc}") from exc
        if reply is None:
            raise EndpointUnreachable(f"no CoAP reply from {self.host}")
        code = coap.code_str(reply.code)
        return code == "2.01", None if code == "2.01" else f"{code} {reply.payload.decode('utf-8', 'replace')}"

    def mqtt_session(self, peer_id: str, device_type: str, token: str) -> MqttClient:
        try:
            client = MqttClient(self.host, self.ports[Protocol.MQTT], self.timeout)
            client.connect(f"{peer_id[:12]}-{device_type}", password=token)
        except OSError as exc:
            raise EndpointUnreachable(f"mqtt endpoint {self.host}: {exc}") from exc
        return client

    def close(self) -> None:
        self._http.close()


@dataclass
class StreamReport:
    peer_id: str
    device_type: str
    protocol: str
    sent: int = 0
    accepted: int = 0
    rejected: int = 0
    failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def run_stream(
    plan: StreamPlan,
    protocol: Protocol | str,
    endpoint,
    token: str,
    registry: Optional[TemplateRegistry] = None,
    speedup: Optional[float] = None,
) -> StreamReport:
    """Emit every reading of ``plan``. ``speedup=None`` sends back-to-back
    (virtual time: readings still carry the planned timestamps)."""
    protocol = Protocol.parse(protocol)
    device = plan.device_type.value
    report = StreamReport(plan.patient.peer_id, device, protocol.value)
    mqtt = None
    if protocol is Protocol.MQTT and isinstance(endpoint, NetworkEndpoint):
        mqtt = endpoint.mqtt_session(plan.patient.peer_id, device, token)
    t0 = time.perf_counter()
    try:
        for i, body in enumerate(plan.bodies(registry)):
            if speedup:
                delay = t0 + i * plan.interval.total_seconds() / speedup - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            kwargs = {"mqtt": mqtt} if mqtt is not None else {}
            ok, reason = endpoint.publish(protocol, plan.patient.peer_id, device, body, token, **kwargs)
            report.sent += 1
            if ok:
                report.accepted += 1
            else:
                report.rejected += 1
                report.failures.append(reason or "rejected")
                if mqtt is not None:  # the broker drops the connection on rejection
                    mqtt.disconnect()
                    mqtt = endpoint.mqtt_session(plan.patient.peer_id, device, token)
    finally:
        if mqtt is not None:
            mqtt.disconnect()
    return report


def run_streams(
    plans: Sequence[StreamPlan],
    protocol: Protocol | str,
    endpoint,
    token_for,
    workers: int = 8,
    registry: Optional[TemplateRegistry] = None,
    speedup: Optional[float] = None,
) -> list[StreamReport]:
    """One emitter per plan, run concurrently; results keep plan order."""
    def one(plan: StreamPlan) -> StreamReport:
        token = token_for(plan.patient.peer_id, plan.device_type.value)
        return run_stream(plan, protocol, endpoint, token, registry, speedup)

    if workers <= 1:
        return [one(p) for p in plans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, plans))
