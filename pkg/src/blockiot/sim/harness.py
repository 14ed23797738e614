"""Reliability and load experiments against a node."""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Callable, Optional

from blockiot.clock import ManualClock
from blockiot.config import Config
from blockiot.core.model import DeviceType
from blockiot.errors import BlockIoTError
from blockiot.gateway.pipeline import Protocol
from blockiot.node import BlockIoTNode
from blockiot.sim.cohort import SyntheticCohort, generate_cohort
from blockiot.sim.streams import NodeEndpoint, StreamPlan, make_plan, run_stream
from blockiot.store.names import name_key

SIM_EPOCH = datetime(2026, 1, 5, 8, 0, tzinfo=timezone.utc)
PROTOCOL_CYCLE = (Protocol.HTTP, Protocol.MQTT, Protocol.COAP)


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile; 0.0 for an empty list."""
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


# -- reliability ------------------------------------------------------------


@dataclass
class ReliabilityReport:
    patients: int
    patients_ok: int = 0
    streams: int = 0
    expected_observations: int = 0
    stored_observations: int = 0
    missing: int = 0
    corrupt: int = 0
    rejected_uploads: int = 0
    flagged: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return (
            self.patients_ok == self.patients
            and self.missing == 0
            and self.corrupt == 0
            and self.rejected_uploads == 0
        )

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def _observed(obs) -> tuple:
    return (obs.timestamp, tuple(sorted((v.key, _freeze(v.value)) for v in obs.values)))


def _freeze(value):
    return tuple(value) if isinstance(value, list) else value


def inject_block_deletion(node: BlockIoTNode, peer_id: str, device_type: DeviceType | str) -> str:
    """Delete the current document block of one stream; returns the deleted cid."""
    cid = node.names.resolve_name(name_key(peer_id, DeviceType.parse(device_type)))
    node.blocks.delete_block(cid)
    return cid


def run_reliability_test(
    n_patients: int = 1000,
    seed: int = 7,
    readings_per_device: int = 12,
    node: Optional[BlockIoTNode] = None,
    fault: Optional[Callable[[BlockIoTNode, SyntheticCohort], None]] = None,
    chunk: int = 100,
) -> ReliabilityReport:
    """Upload every synthetic patient's readings, then read everything back and diff."""
    t0 = time.perf_counter()
    node = node or BlockIoTNode(clock=ManualClock(SIM_EPOCH + timedelta(days=1)), in_memory=True)
    cohort = generate_cohort(n_patients, seed)
    report = ReliabilityReport(n_patients)
    endpoint = NodeEndpoint(node)
    expected: dict[tuple[str, DeviceType], list[tuple]] = {}
    start = node.clock() - timedelta(hours=12)

    for i, patient in enumerate(cohort):
        node.register_patient(patient.profile)
        for j, device in enumerate(patient.profile.devices):
            plan = StreamPlan(patient, device, start, readings_per_device, timedelta(minutes=5), seed=seed)
            protocol = PROTOCOL_CYCLE[(i + j) % len(PROTOCOL_CYCLE)]
            r = run_stream(plan, protocol, endpoint, node.device_token(patient.peer_id, device.value),
                           node.registry)
            report.rejected_uploads += r.rejected
            expected[(patient.peer_id, device)] = [
                (t, tuple(sorted((k, _freeze(v)) for k, v in payload.items())))
                for t, payload in plan.readings(node.registry)
            ]
        if (i + 1) % chunk == 0:
            node.process_pending()
    node.process_pending()
    node.tick()

    if fault is not None:
        fault(node, cohort)

    report.streams = len(expected)
    bad_patients: set[str] = set()
    for patient in cohort:
        try:
            if node.docs.get_profile(patient.peer_id) != patient.profile:
                report.flagged.append({"peer_id": patient.peer_id, "device_type": "profile",
                                       "problem": "profile differs"})
                bad_patients.add(patient.peer_id)
        except BlockIoTError as exc:
            report.flagged.append({"peer_id": patient.peer_id, "device_type": "profile",
                                   "problem": f"{type(exc).__name__}: {exc}"})
            bad_patients.add(patient.peer_id)
    for (peer_id, device), want in expected.items():
        report.expected_observations += len(want)
        try:
            doc = node.docs.load_document(peer_id, device)
            got = [_observed(o) for o in doc.observations] if doc else []
        except BlockIoTError as exc:
            report.missing += len(want)
            report.flagged.append({"peer_id": peer_id, "device_type": device.value,
                                   "problem": f"{type(exc).__name__}: {exc}"})
            bad_patients.add(peer_id)
            continue
        report.stored_observations += len(got)
        remaining = list(got)
        missing = corrupt = 0
        for item in want:
            if item in remaining:
                remaining.remove(item)
            else:
                missing += 1
        # stored entries with no counterpart were altered in transit or at rest
        corrupt = min(missing, len(remaining))
        missing -= corrupt
        if missing or corrupt or remaining:
            report.missing += missing
            report.corrupt += corrupt + max(0, len(remaining) - corrupt)
            report.flagged.append({"peer_id": peer_id, "device_type": device.value,
                                   "problem": f"{missing} missing, {len(remaining)} unexpected"})
            bad_patients.add(peer_id)
    report.patients_ok = n_patients - len(bad_patients)
    report.wall_seconds = time.perf_counter() - t0
    return report


# -- load -------------------------------------------------------------------


@dataclass
class LoadReport:
    mode: str
    interval: float
    concurrency: int
    requests_sent: int = 0
    acks_accepted: int = 0
    acks_rejected: int = 0
    envelopes_stored: int = 0
    latency_p50: float = 0.0
    latency_p95: float = 0.0
    latency_max: float = 0.0
    wall_seconds: float = 0.0
    simulated_seconds: float = 0.0
    max_latency_bound: float = 6.0

    @property
    def conserved(self) -> bool:
        return (self.requests_sent == self.acks_accepted + self.acks_rejected
                and self.envelopes_stored == self.acks_accepted)

    @property
    def passed(self) -> bool:
        return self.conserved and self.acks_rejected == 0 and self.latency_max <= self.max_latency_bound

    def set_latencies(self, latencies: list[float]) -> None:
        self.latency_p50 = percentile(latencies, 0.50)
        self.latency_p95 = percentile(latencies, 0.95)
        self.latency_max = max(latencies, default=0.0)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["passed"] = self.passed
        d["conserved"] = self.conserved
        return d


def _load_streams(node: BlockIoTNode, n_requests: int, seed: int, interval: float) -> list[tuple]:
    """Request list ``[(peer_id, device, body, token, protocol)]`` spread over a small cohort."""
    cohort = generate_cohort(max(1, min(100, n_requests)), seed)
    start = node.clock() - timedelta(seconds=interval * n_requests)
    per_stream: list[list[tuple]] = []
    for i, patient in enumerate(cohort):
        node.register_patient(patient.profile)
        devices = patient.profile.devices
        for j, device in enumerate(devices):
            count = math.ceil(n_requests / len(cohort) / len(devices)) + 1
            plan = make_plan(patient, device, start, count, timedelta(seconds=interval), seed=seed)
            token = node.device_token(patient.peer_id, device.value)
            protocol = PROTOCOL_CYCLE[(i + j) % len(PROTOCOL_CYCLE)]
            per_stream.append([(patient.peer_id, device.value, b, token, protocol)
                               for b in plan.bodies(node.registry)])
    # interleave streams so consecutive requests hit different documents
    out: list[tuple] = []
    k = 0
    while len(out) < n_requests:
        for s in per_stream:
            if k < len(s) and len(out) < n_requests:
                out.append(s[k])
        k += 1
    return out


def _count_stored(node: BlockIoTNode, requests: list[tuple]) -> int:
    total = 0
    for peer_id, device in {(r[0], r[1]) for r in requests}:
        doc = node.docs.load_document(peer_id, device)
        total += len(doc.entries) if doc else 0
    return total


def run_load_test(
    n_requests: int = 10_000,
    interval: float = 0.5,
    concurrency: int = 1,
    mode: str = "virtual",
    node: Optional[BlockIoTNode] = None,
    seed: int = 7,
    max_latency: float = 6.0,
) -> LoadReport:
    """Pace ``n_requests`` at ``interval`` seconds (``concurrency`` per tick).

    ``virtual``: every request is pushed through the full pipeline
    (gateway accept to name publish) and its real service time measured; a
    single-server queue in simulated time then gives each request's latency
    as ``max(arrival, previous completion) + service - arrival``.

    ``real``: requests are sent on a wall-clock schedule while a consumer
    thread drains the pipeline; latency is measured enqueue to name publish.
    """
    if mode not in ("virtual", "real"):
        raise ValueError("mode must be 'virtual' or 'real'")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    report = LoadReport(mode, interval, concurrency, max_latency_bound=max_latency)
    if n_requests <= 0:
        return report
    if node is None:
        clock = ManualClock(SIM_EPOCH) if mode == "virtual" else None
        cfg = Config()
        cfg.ledger.nodes = {"ehr-1": "ehr"}
        node = BlockIoTNode(cfg, clock=clock, in_memory=True)
    requests = _load_streams(node, n_requests, seed, interval)
    endpoint = NodeEndpoint(node)
    stored_before = node.stored_total
    entries_before = _count_stored(node, requests)
    t0 = time.perf_counter()

    if mode == "virtual":
        latencies: list[float] = []
        free_at = 0.0
        for i, (peer_id, device, body, token, protocol) in enumerate(requests):
            arrival = (i // concurrency) * interval
            if isinstance(node.clock, ManualClock):
                node.clock.set(SIM_EPOCH + timedelta(seconds=arrival))
            s0 = time.perf_counter()
            ok, _ = endpoint.publish(protocol, peer_id, device, body, token)
            node.process_pending()
            service = time.perf_counter() - s0
            report.requests_sent += 1
            if ok:
                report.acks_accepted += 1
                start = max(arrival, free_at)
                free_at = start + service
                latencies.append(free_at - arrival)
            else:
                report.acks_rejected += 1
            node.tick()
        report.simulated_seconds = max(free_at, ((len(requests) - 1) // concurrency) * interval)
    else:
        stop = threading.Event()
        consumer = threading.Thread(target=node.run_consumer, args=(stop, 0.005), daemon=True)
        consumer.start()
        latency_mark = len(node.latencies)
        lock = threading.Lock()

        def send(batch: list[tuple]) -> None:
            results = []
            for peer_id, device, body, token, protocol in batch:
                results.append(endpoint.publish(protocol, peer_id, device, body, token)[0])
            with lock:
                report.requests_sent += len(results)
                report.acks_accepted += sum(results)
                report.acks_rejected += len(results) - sum(results)

        try:
            for tick_no in range(math.ceil(len(requests) / concurrency)):
                due = t0 + tick_no * interval
                delay = due - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
                batch = requests[tick_no * concurrency:(tick_no + 1) * concurrency]
                if concurrency == 1:
                    send(batch)
                else:
                    threads = [threading.Thread(target=send, args=([r],)) for r in batch]
                    for t in threads:
                        t.start()
                    for t in threads:
                        t.join()
            deadline = time.perf_counter() + 60
            while node.stored_total - stored_before < report.acks_accepted and time.perf_counter() < deadline:
                time.sleep(0.01)
        finally:
            stop.set()
            consumer.join()
        latencies = list(node.latencies)[latency_mark:]
        report.simulated_seconds = time.perf_counter() - t0

    report.wall_seconds = time.perf_counter() - t0
    report.envelopes_stored = _count_stored(node, requests) - entries_before
    report.set_latencies(latencies)
    return report
