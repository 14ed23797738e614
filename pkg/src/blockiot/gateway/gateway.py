"""Protocol-independent ingest logic and the three publish handlers."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from enum import Enum
from typing import Mapping, Optional, Union

from blockiot.clock import Clock, parse_instant, utcnow
from blockiot.core.model import DeviceReading, DeviceType, is_number
from blockiot.core.peerid import is_peer_id
from blockiot.core.templates import TemplateRegistry, identify_template
from blockiot.errors import AmbiguousTemplate, NoTemplateMatch
from blockiot.gateway.auth import DeviceAuth
from blockiot.gateway.coap import POST, CoapMessage, code_str
from blockiot.gateway.mqtt import MqttPublish
from blockiot.gateway.pipeline import IngestEnvelope, Pipeline, Protocol

TIMESTAMP_KEY = "timestamp"
DEFAULT_MAX_PAYLOAD = 64 * 1024
DEFAULT_SKEW = timedelta(minutes=5)
COAP_EXCHANGE_LIFETIME = timedelta(seconds=247)


class AckStatus(str, Enum):
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


@dataclass(frozen=True)
class Ack:
    status: AckStatus
    reason: Optional[str]
    correlation: Union[int, str, None]  # HTTP status / MQTT packet id / CoAP message id
    code: Union[int, str]  # protocol response: HTTP status, CoAP "c.dd", MQTT action
    envelope: Optional[IngestEnvelope] = None

    def __post_init__(self):
        if self.status is AckStatus.REJECTED and not self.reason:
            raise ValueError("rejected acks need a reason")

    @property
    def accepted(self) -> bool:
        return self.status is AckStatus.ACCEPTED


class Reject(Exception):
    KINDS = ("malformed", "too_large", "unauthorized", "not_found", "no_template",
             "method", "full", "bad_topic", "unsupported_qos")

    def __init__(self, kind: str, reason: str):
        assert kind in self.KINDS, kind
        self.kind = kind
        self.reason = reason
        super().__init__(f"{kind}: {reason}")


HTTP_STATUS = {
    "malformed": 400, "too_large": 413, "unauthorized": 401, "not_found": 404,
    "no_template": 422, "method": 405, "full": 503,
}
COAP_CODE = {
    "malformed": "4.00", "too_large": "4.13", "unauthorized": "4.01", "not_found": "4.04",
    "no_template": "4.22", "method": "4.05", "full": "5.03",
}


def _check_value(key: str, value: object) -> None:
    if isinstance(value, str) or is_number(value):
        return
    if isinstance(value, list) and all(is_number(v) for v in value):
        return
    raise Reject("malformed", f"value for {key!r} must be a number, string or list of numbers")


class Gateway:
    def __init__(
        self,
        registry: TemplateRegistry,
        pipeline: Pipeline,
        auth: Optional[DeviceAuth] = None,
        clock: Clock = utcnow,
        skew_tolerance: timedelta = DEFAULT_SKEW,
        max_payload: int = DEFAULT_MAX_PAYLOAD,
        coap_dedup_window: timedelta = COAP_EXCHANGE_LIFETIME,
    ):
        self.registry = registry
        self.pipeline = pipeline
        self.auth = auth
        self.clock = clock
        self.skew_tolerance = skew_tolerance
        self.max_payload = max_payload
        self.coap_dedup_window = coap_dedup_window
        self._coap_seen: dict[tuple[str, int], tuple[datetime, Ack]] = {}
        self._coap_lock = threading.Lock()

    # -- shared path -------------------------------------------------------

    def parse_reading(self, peer_id: str, device_type: str, body: bytes, received_at: datetime):
        if not is_peer_id(peer_id):
            raise Reject("not_found", f"not a peer id: {peer_id!r}")
        try:
            dtype = DeviceType.parse(device_type)
        except ValueError:
            raise Reject("not_found", f"unknown device type {device_type!r}") from None
        if len(body) > self.max_payload:
            raise Reject("too_large", f"payload of {len(body)} bytes exceeds {self.max_payload}")
        if not body.strip():
            raise Reject("malformed", "empty body")
        try:
            payload = json.loads(body)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise Reject("malformed", f"body is not JSON: {exc}") from None
        if not isinstance(payload, dict):
            raise Reject("malformed", "body must be a JSON object")
        timestamp = received_at
        if TIMESTAMP_KEY in payload:
            try:
                timestamp = parse_instant(payload.pop(TIMESTAMP_KEY))
            except (ValueError, TypeError, OverflowError, OSError) as exc:
                raise Reject("malformed", f"bad timestamp: {exc}") from None
        if not payload:
            raise Reject("malformed", "payload has no readings")
        for k, v in payload.items():
            _check_value(k, v)
        if timestamp > received_at + self.skew_tolerance:
            raise Reject("malformed", "timestamp is in the future beyond clock-skew tolerance")
        try:
            template = identify_template(payload.keys(), self.registry)
        except (NoTemplateMatch, AmbiguousTemplate) as exc:
            raise Reject("no_template", str(exc)) from None
        if template.device_type is not dtype:
            raise Reject(
                "no_template",
                f"payload identifies {template.device_type.value}, not {dtype.value}",
            )
        return DeviceReading(peer_id, timestamp, payload, dtype.value), template.template_id

    def accept(
        self, protocol: Protocol, source: str, peer_id: str, device_type: str,
        body: bytes, token: Optional[str],
    ) -> IngestEnvelope:
        """Validate, authenticate and enqueue. Raises Reject."""
        received_at = self.clock()
        reading, template_id = self.parse_reading(peer_id, device_type, body, received_at)
        if self.auth is not None and not self.auth.verify(peer_id, reading.device_type_hint, token):
            raise Reject("unauthorized", "device token missing or invalid")
        env = self.pipeline.offer(IngestEnvelope(protocol, received_at, source, reading, template_id))
        if env is None:
            raise Reject("full", "ingest queue is full")
        return env

    @staticmethod
    def _split_ingest_path(parts: list[str]) -> tuple[str, str]:
        parts = [p for p in parts if p]
        if len(parts) != 3 or parts[0] != "ingest":
            raise Reject("not_found", "path must be /ingest/{peer_id}/{device_type}")
        return parts[1], parts[2]

    # -- HTTP --------------------------------------------------------------

    def handle_http_publish(
        self, method: str, path: str, headers: Mapping[str, str], body: bytes, source: str = "http"
    ) -> Ack:
        try:
            peer_id, device_type = self._split_ingest_path(path.split("?", 1)[0].split("/"))
            if method.upper() != "POST":
                raise Reject("method", f"{method} not allowed; use POST")
            lower = {k.lower(): v for k, v in headers.items()}
            env = self.accept(Protocol.HTTP, source, peer_id, device_type, body,
                              lower.get("x-device-token"))
        except Reject as r:
            status = HTTP_STATUS[r.kind]
            return Ack(AckStatus.REJECTED, r.reason, status, status)
        return Ack(AckStatus.ACCEPTED, None, 202, 202, env)

    # -- MQTT --------------------------------------------------------------

    def handle_mqtt_publish(
        self, packet: MqttPublish, source: str = "mqtt", password: Optional[str] = None
    ) -> Ack:
        """Ack codes: ``PUBACK`` (QoS 1 accepted), ``NONE`` (QoS 0 accepted),
        ``DEFER`` (queue full, hold the PUBACK), ``DISCONNECT`` (rejection)."""
        try:
            if packet.qos not in (0, 1):
                raise Reject("unsupported_qos", f"QoS {packet.qos} is not supported")
            parts = packet.topic.split("/")
            if len(parts) != 3 or parts[0] != "blockiot" or not all(parts):
                raise Reject("bad_topic", f"topic {packet.topic!r} is not blockiot/{{peer_id}}/{{device_type}}")
            env = self.accept(Protocol.MQTT, source, parts[1], parts[2], packet.payload, password)
        except Reject as r:
            if r.kind == "not_found":
                r = Reject("bad_topic", r.reason)
            if r.kind == "full":
                # QoS 1 holds the PUBACK; QoS 0 is fire-and-forget and is dropped
                return Ack(AckStatus.REJECTED, r.reason, packet.packet_id,
                           "DEFER" if packet.qos == 1 else "NONE")
            return Ack(AckStatus.REJECTED, f"{r.kind}: {r.reason}", packet.packet_id, "DISCONNECT")
        return Ack(AckStatus.ACCEPTED, None, packet.packet_id,
                   "PUBACK" if packet.qos == 1 else "NONE", env)

    # -- CoAP --------------------------------------------------------------

    def handle_coap_post(self, message: CoapMessage, source: str = "coap") -> Ack:
        now = self.clock()
        key = (source, message.message_id)
        with self._coap_lock:
            self._prune_coap(now)
            seen = self._coap_seen.get(key)
            if seen is not None and now - seen[0] < self.coap_dedup_window:
                prior = seen[1]
                return Ack(prior.status, prior.reason, prior.correlation, prior.code)
            ack = self._coap_post(message, source)
            self._coap_seen[key] = (now, ack)
            return ack

    def _coap_post(self, message: CoapMessage, source: str) -> Ack:
        try:
            if message.code != POST:
                raise Reject("method", f"method {code_str(message.code)} not allowed; use POST")
            peer_id, device_type = self._split_ingest_path(message.uri_path)
            token = None
            for q in message.uri_query:
                if q.startswith("token="):
                    token = q[len("token="):]
            env = self.accept(Protocol.COAP, source, peer_id, device_type, message.payload, token)
        except Reject as r:
            return Ack(AckStatus.REJECTED, r.reason, message.message_id, COAP_CODE[r.kind])
        return Ack(AckStatus.ACCEPTED, None, message.message_id, "2.01", env)

    def _prune_coap(self, now: datetime) -> None:
        if len(self._coap_seen) < 1024:
            return
        cutoff = now - self.coap_dedup_window
        self._coap_seen = {k: v for k, v in self._coap_seen.items() if v[0] >= cutoff}

    # -- consumer side -----------------------------------------------------

    def drain_pipeline(self, batch_limit: int) -> list[IngestEnvelope]:
        return self.pipeline.drain(batch_limit)
