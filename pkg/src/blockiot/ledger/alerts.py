"""Threshold alerting with patient confirmation and preference-based routing."""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from typing import Optional

from blockiot.clock import Clock, format_instant, utcnow
from blockiot.core.model import AlertPrefs, Channel, HarmonizedObservation, ValueStatus
from blockiot.core.templates import TemplateRegistry
from blockiot.errors import UnknownAlert, UnknownSink, WrongStage
from blockiot.ledger.analyzers import AnalyzerRegistry, Finding
from blockiot.ledger.chain import Ledger, TxKind
from blockiot.ledger.sinks import Notification, SinkRegistry


class AlertStage(str, Enum):
    RAISED = "Raised"
    AWAITING_PATIENT_CONFIRMATION = "AwaitingPatientConfirmation"
    DISMISSED = "Dismissed"
    ESCALATED = "Escalated"


_TRANSITIONS = {
    AlertStage.RAISED: {AlertStage.AWAITING_PATIENT_CONFIRMATION, AlertStage.ESCALATED},
    AlertStage.AWAITING_PATIENT_CONFIRMATION: {AlertStage.DISMISSED, AlertStage.ESCALATED},
    AlertStage.DISMISSED: set(),
    AlertStage.ESCALATED: set(),
}


class PatientResponse(str, Enum):
    CONFIRM = "Confirm"  # benign explanation, e.g. just ate
    DENY = "Deny"


@dataclass
class AlertState:
    alert_id: str
    peer_id: str
    device_type: str
    field: str
    value: object
    status: str
    observed_at: datetime
    source: str
    stage: AlertStage = AlertStage.RAISED
    history: list[tuple[AlertStage, datetime]] = field(default_factory=list)
    prefs: AlertPrefs = field(default_factory=AlertPrefs, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "alert_id": self.alert_id,
            "peer_id": self.peer_id,
            "device_type": self.device_type,
            "field": self.field,
            "value": self.value,
            "status": self.status,
            "observed_at": format_instant(self.observed_at),
            "source": self.source,
            "stage": self.stage.value,
            "history": [[s.value, format_instant(t)] for s, t in self.history],
        }


class AlertService:
    def __init__(
        self,
        ledger: Ledger,
        sinks: SinkRegistry,
        registry: TemplateRegistry | None = None,
        analyzers: AnalyzerRegistry | None = None,
        clock: Clock = utcnow,
        confirmation_timeout: timedelta = timedelta(minutes=30),
    ):
        self.ledger = ledger
        self.sinks = sinks
        self.registry = registry
        self.analyzers = analyzers or AnalyzerRegistry()
        self.clock = clock
        self.confirmation_timeout = confirmation_timeout
        self._alerts: dict[str, AlertState] = {}
        self._awaiting: dict[str, AlertState] = {}
        self._deferred: list[tuple[Channel, Notification]] = []
        self._lock = threading.RLock()

    # -- queries -----------------------------------------------------------

    def get(self, alert_id: str) -> AlertState:
        try:
            return self._alerts[alert_id]
        except KeyError:
            raise UnknownAlert(alert_id) from None

    def alerts(self) -> list[AlertState]:
        with self._lock:
            return list(self._alerts.values())

    @property
    def deferred(self) -> list[Notification]:
        return [n for _, n in self._deferred]

    def validate_prefs(self, prefs: AlertPrefs) -> None:
        for ch in prefs.channels:
            if ch.sink_id not in self.sinks:
                raise UnknownSink(f"alert preferences reference unknown sink {ch.sink_id!r}")

    # -- evaluation --------------------------------------------------------

    def _limited(self, obs: HarmonizedObservation, key: str) -> bool:
        if self.registry is None or obs.template_id not in self.registry:
            return False
        try:
            return self.registry.get(obs.template_id).field(key).has_limits
        except KeyError:
            return False

    def evaluate_observation(self, obs: HarmonizedObservation, prefs: AlertPrefs) -> list[AlertState]:
        """Run the device's analyzer, then threshold checks. Returns raised alerts (empty: no alert)."""
        raised = []
        for finding in self.analyzers.analyze(obs):
            raised.extend(self._raise_for(obs, prefs, finding.field, finding.message,
                                          finding.label, f"analyzer:{self._analyzer_name(obs)}"))
        for v in obs.values:
            abnormal = v.status in (ValueStatus.ABOVE_UPPER, ValueStatus.BELOW_LOWER) or (
                v.status is ValueStatus.NOT_NUMERIC and self._limited(obs, v.key)
            )
            if abnormal:
                raised.extend(self._raise_for(obs, prefs, v.key, v.value, v.status.value, "threshold"))
        return raised

    def _analyzer_name(self, obs: HarmonizedObservation) -> str:
        a = self.analyzers.get(obs.device_type)
        return getattr(a, "name", type(a).__name__)

    def _raise_for(self, obs, prefs: AlertPrefs, key, value, status, source) -> list[AlertState]:
        rule = prefs.rule_for(obs.device_type, key)
        if rule.suppress:
            return []
        self.validate_prefs(prefs)
        now = self.clock()
        alert = AlertState(
            alert_id=uuid.uuid4().hex,
            peer_id=obs.peer_id,
            device_type=obs.device_type.value,
            field=key,
            value=value,
            status=status,
            observed_at=obs.timestamp,
            source=source,
            history=[(AlertStage.RAISED, now)],
            prefs=prefs,
        )
        with self._lock:
            self._alerts[alert.alert_id] = alert
            self.ledger.record(
                TxKind.ALERT_RAISED,
                obs.peer_id,
                {
                    "alert_id": alert.alert_id,
                    "device_type": alert.device_type,
                    "field": key,
                    "status": status,
                    "value": value,
                    "observed_at": format_instant(obs.timestamp),
                    "source": source,
                },
            )
            if rule.confirm_with_patient_first:
                self._move(alert, AlertStage.AWAITING_PATIENT_CONFIRMATION, TxKind.ALERT_TRANSITION)
                self._notify(alert, prefs, "patient", "patient_query",
                             f"Your {alert.device_type} {key} reading ({value}) was {status}. "
                             f"Reply Confirm if there is a benign reason (for example a recent meal), "
                             f"otherwise Deny.")
            else:
                self._escalate(alert, prefs)
        return [alert]

    # -- transitions -------------------------------------------------------

    def _move(self, alert: AlertState, stage: AlertStage, kind: TxKind) -> None:
        if stage not in _TRANSITIONS[alert.stage]:
            raise WrongStage(f"{alert.stage.value} -> {stage.value} is not allowed")
        now = self.clock()
        alert.stage = stage
        alert.history.append((stage, now))
        if stage is AlertStage.AWAITING_PATIENT_CONFIRMATION:
            self._awaiting[alert.alert_id] = alert
        else:
            self._awaiting.pop(alert.alert_id, None)
        self.ledger.record(kind, alert.peer_id, {"alert_id": alert.alert_id, "stage": stage.value})

    def _escalate(self, alert: AlertState, prefs: AlertPrefs) -> None:
        self._move(alert, AlertStage.ESCALATED, TxKind.ALERT_TRANSITION)
        self._notify(alert, prefs, "physician", "physician_alert",
                     f"{alert.device_type}.{alert.field} = {alert.value} ({alert.status}) "
                     f"at {format_instant(alert.observed_at)}")

    def _notify(self, alert: AlertState, prefs: AlertPrefs, party: str, kind: str, message: str) -> None:
        now = self.clock()
        for ch in prefs.channels_for(party):
            n = Notification(ch.sink_id, party, kind, alert.alert_id, alert.peer_id, message,
                             format_instant(now))
            if ch.is_quiet(now):
                self._deferred.append((ch, n))
            else:
                self.sinks.get(ch.sink_id).deliver(n)

    def receive_patient_response(
        self, alert_id: str, response: PatientResponse | str, now: Optional[datetime] = None
    ) -> AlertState:
        response = PatientResponse(response)
        with self._lock:
            alert = self.get(alert_id)
            if alert.stage is not AlertStage.AWAITING_PATIENT_CONFIRMATION:
                raise WrongStage(f"alert {alert_id} is {alert.stage.value}")
            if response is PatientResponse.CONFIRM:
                self._move(alert, AlertStage.DISMISSED, TxKind.ALERT_RESOLVED)
            else:
                self._escalate(alert, alert.prefs)
            return alert

    def tick(self, now: Optional[datetime] = None) -> list[AlertState]:
        """Escalate unanswered confirmations and flush notifications whose quiet hours ended."""
        now = self.clock() if now is None else now
        escalated = []
        with self._lock:
            for alert in list(self._awaiting.values()):
                if now - alert.history[-1][1] >= self.confirmation_timeout:
                    self._escalate(alert, alert.prefs)
                    escalated.append(alert)
            still = []
            for ch, n in self._deferred:
                if ch.is_quiet(now):
                    still.append((ch, n))
                else:
                    self.sinks.get(ch.sink_id).deliver(n)
            self._deferred = still
        return escalated
