from blockiot.ledger.adherence import AdherenceReport, DoseSchedule, check_adherence
from blockiot.ledger.alerts import AlertService, AlertStage, AlertState, PatientResponse
from blockiot.ledger.analyzers import AnalyzerRegistry, EkgRhythmAnalyzer, Finding
from blockiot.ledger.chain import (
    Block,
    Ledger,
    Transaction,
    TxKind,
    VerificationReport,
    verify_chain,
    verify_chain_bytes,
    verify_chain_file,
)
from blockiot.ledger.grants import AccessGrant, GrantService, NodeRegistry
from blockiot.ledger.sinks import FileSink, MemorySink, Notification, SinkRegistry

__all__ = [
    "AccessGrant", "AdherenceReport", "AlertService", "AlertStage", "AlertState",
    "AnalyzerRegistry", "Block", "DoseSchedule", "EkgRhythmAnalyzer", "FileSink", "Finding",
    "GrantService", "Ledger", "MemorySink", "NodeRegistry", "Notification", "PatientResponse",
    "SinkRegistry", "Transaction", "TxKind", "VerificationReport", "check_adherence",
    "verify_chain", "verify_chain_bytes", "verify_chain_file",
]
