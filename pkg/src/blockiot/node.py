"""One BlockIoT node: gateway, content store, ledger and contracts wired together."""

from __future__ import annotations

import logging
import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import Optional

from blockiot.clock import Clock
from blockiot.config import Config
from blockiot.core.model import AlertPrefs, DeviceType, HarmonizedObservation, PatientProfile
from blockiot.core.templates import TemplateRegistry, default_registry, harmonize, load_template_registry
from blockiot.errors import UnknownPatient
from blockiot.gateway.auth import DeviceAuth
from blockiot.gateway.gateway import Gateway
from blockiot.gateway.pipeline import IngestEnvelope, Pipeline
from blockiot.ledger.alerts import AlertService, AlertState
from blockiot.ledger.analyzers import AnalyzerRegistry, EkgRhythmAnalyzer
from blockiot.ledger.chain import Ledger
from blockiot.ledger.grants import ROLE_EHR, GrantService, NodeRegistry
from blockiot.ledger.sinks import FileSink, MemorySink, SinkRegistry
from blockiot.store.blocks import FileBlockStore, MemoryBlockStore
from blockiot.store.crypto import Keyring
from blockiot.store.documents import DocumentStore
from blockiot.store.names import NameStore

log = logging.getLogger(__name__)


@dataclass
class BatchResult:
    stored: int = 0
    failed: int = 0
    alerts: list[AlertState] = field(default_factory=list)
    latencies: list[float] = field(default_factory=list)  # seconds, enqueue to name publish


class BlockIoTNode:
    """Builds every component from a :class:`Config`.

    ``in_memory=True`` keeps blocks, names, keys and the ledger in memory
    (no files are written), which is what most tests want.
    """

    def __init__(
        self,
        config: Optional[Config] = None,
        clock: Optional[Clock] = None,
        in_memory: bool = False,
        registry: Optional[TemplateRegistry] = None,
    ):
        self.config = config or Config()
        cfg = self.config
        self.clock = clock or cfg.make_clock()
        self.in_memory = in_memory
        root = cfg.root_path

        self.registry = registry or default_registry()
        for extra in cfg.templates:
            self.registry = self.registry.merged(load_template_registry(extra))

        if in_memory:
            self.blocks = MemoryBlockStore(cfg.store.block_limit, cfg.store.capacity_bytes)
            self.names = NameStore(self.blocks, None, self.clock)
            self.keyring = Keyring(None)
            self.ledger = Ledger(None, self.clock, cfg.ledger.seal_size,
                                 timedelta(seconds=cfg.ledger.seal_interval_seconds))
            journal = None
            sinks = {"patient": MemorySink(), "physician": MemorySink()}
            self.auth = DeviceAuth(b"in-memory-node-secret", cfg.gateway.auth_enforce)
        else:
            root.mkdir(parents=True, exist_ok=True)
            self.blocks = FileBlockStore(root / "store" / "blocks", cfg.store.block_limit,
                                         cfg.store.capacity_bytes, cfg.store.fsync)
            self.names = NameStore(self.blocks, root / "store" / "names", self.clock)
            self.keyring = Keyring(root / "store" / "keys")
            self.ledger = Ledger(root / "ledger" / "chain.jsonl", self.clock, cfg.ledger.seal_size,
                                 timedelta(seconds=cfg.ledger.seal_interval_seconds))
            journal = root / "gateway" / "queue.journal" if cfg.gateway.journal else None
            sinks = {
                "patient": FileSink(root / "notifications" / "patient.jsonl"),
                "physician": FileSink(root / "notifications" / "physician.jsonl"),
            }
            self.auth = DeviceAuth.from_file(root / "gateway" / "device-secret", cfg.gateway.auth_enforce)

        self.docs = DocumentStore(
            self.blocks, self.names, self.keyring,
            regression_tolerance=timedelta(seconds=cfg.store.regression_tolerance_seconds),
        )
        self.nodes = NodeRegistry(cfg.ledger.nodes)
        for node_id, role in self.nodes.items():
            if role == ROLE_EHR:
                self.keyring.ensure(node_id)
        self.grants = GrantService(
            self.ledger, self.nodes, self.names.resolve_name, self.docs.has_patient_data,
            self.clock, cfg.grant_duration,
        )
        self.sinks = SinkRegistry(sinks)
        self.analyzers = AnalyzerRegistry()
        self.analyzers.register_analyzer(DeviceType.EKG, EkgRhythmAnalyzer())
        self.alerts = AlertService(
            self.ledger, self.sinks, self.registry, self.analyzers, self.clock,
            timedelta(minutes=cfg.ledger.confirmation_timeout_minutes),
        )
        self.pipeline = Pipeline(cfg.gateway.queue_capacity, journal, cfg.store.fsync)
        self.gateway = Gateway(
            self.registry, self.pipeline, self.auth, self.clock,
            timedelta(seconds=cfg.gateway.skew_seconds), cfg.gateway.max_payload,
        )
        self._profiles: OrderedDict[str, PatientProfile] = OrderedDict()
        self._process_lock = threading.Lock()
        self.stored_total = 0
        self.failed_total = 0
        self.latencies: deque[float] = deque(maxlen=200_000)

    # -- patients ----------------------------------------------------------

    def register_node(self, node_id: str, role: str = ROLE_EHR) -> None:
        self.nodes.register(node_id, role)
        if role == ROLE_EHR:
            self.keyring.ensure(node_id)

    def register_patient(self, profile: PatientProfile, replace: bool = False) -> str:
        for device in profile.devices:
            if not self.registry.for_device(device):
                raise ValueError(f"no template registered for device {device.value}")
        self.alerts.validate_prefs(profile.alert_preferences)
        if profile.physician is not None and profile.physician not in self.keyring:
            raise ValueError(f"physician node {profile.physician!r} has no key")
        cid = self.docs.put_profile(profile, self._keys_for(profile), replace=replace)
        self._remember(profile)
        return cid

    def _remember(self, profile: PatientProfile) -> None:
        self._profiles[profile.peer_id] = profile
        self._profiles.move_to_end(profile.peer_id)
        while len(self._profiles) > 4096:
            self._profiles.popitem(last=False)

    def profile(self, peer_id: str) -> Optional[PatientProfile]:
        p = self._profiles.get(peer_id)
        if p is not None:
            return p
        try:
            p = self.docs.get_profile(peer_id)
        except UnknownPatient:
            return None
        self._remember(p)
        return p

    def _keys_for(self, profile: Optional[PatientProfile]):
        return self.docs.recipient_keys([profile.physician] if profile and profile.physician else [])

    def device_token(self, peer_id: str, device_type: str) -> str:
        return self.auth.token_for(peer_id, device_type)

    # -- consumer ----------------------------------------------------------

    def process_batch(self, envelopes: list[IngestEnvelope]) -> BatchResult:
        """Harmonize, append per stream (one write per stream), then run contracts."""
        result = BatchResult()
        streams: OrderedDict[tuple[str, str], list[IngestEnvelope]] = OrderedDict()
        for env in envelopes:
            streams.setdefault(env.stream, []).append(env)
        with self._process_lock:
            for (peer_id, device_type), envs in streams.items():
                profile = self.profile(peer_id)
                try:
                    observations = [
                        harmonize(e.reading, self.registry.get(e.template_id)) for e in envs
                    ]
                    self.docs.append_observations(peer_id, device_type, observations,
                                                  self._keys_for(profile))
                except Exception:
                    log.exception("failed to store %d readings for %s/%s", len(envs),
                                  peer_id[:12], device_type)
                    result.failed += len(envs)
                    continue
                published = time.perf_counter()
                result.stored += len(envs)
                result.latencies.extend(published - e.enqueued_mono for e in envs)
                prefs = profile.alert_preferences if profile else AlertPrefs()
                for obs in observations:
                    result.alerts.extend(self.alerts.evaluate_observation(obs, prefs))
            self.pipeline.commit(envelopes)
            self.stored_total += result.stored
            self.failed_total += result.failed
            self.latencies.extend(result.latencies)
        return result

    def process_pending(self, batch_limit: Optional[int] = None) -> BatchResult:
        total = BatchResult()
        limit = batch_limit or self.config.gateway.batch_limit
        while True:
            batch = self.gateway.drain_pipeline(limit)
            if not batch:
                return total
            r = self.process_batch(batch)
            total.stored += r.stored
            total.failed += r.failed
            total.alerts.extend(r.alerts)
            total.latencies.extend(r.latencies)

    def tick(self) -> None:
        self.ledger.tick()
        self.alerts.tick()

    def run_consumer(self, stop: threading.Event, poll: float = 0.05) -> None:
        """Drain until ``stop`` is set; meant for a background thread."""
        while not stop.is_set():
            if self.pipeline.wait(poll):
                self.process_pending()
            self.tick()
        self.process_pending()

    # -- reads -------------------------------------------------------------

    def observations(self, peer_id: str, device_type: DeviceType | str) -> list[HarmonizedObservation]:
        doc = self.docs.load_document(peer_id, device_type)
        return doc.observations if doc else []

    def close(self) -> None:
        self.ledger.seal()
        self.names.close()
        self.pipeline.close()
