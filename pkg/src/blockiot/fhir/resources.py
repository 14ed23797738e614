"""FHIR-shaped JSON resources built from stored documents."""

from __future__ import annotations

from datetime import datetime
from typing import Iterable, Optional

from blockiot.clock import format_instant
from blockiot.core.model import DeviceType, PatientProfile, ValueStatus, is_number
from blockiot.store.documents import PatientDocument

INTERPRETATION_SYSTEM = "http://terminology.hl7.org/CodeSystem/v3-ObservationInterpretation"
_INTERPRETATION = {
    ValueStatus.WITHIN_LIMITS: ("N", "normal"),
    ValueStatus.BELOW_LOWER: ("L", "low"),
    ValueStatus.ABOVE_UPPER: ("H", "high"),
}
PEER_ID_SYSTEM = "urn:blockiot:peer-id"


def interpretation_text(status: ValueStatus) -> Optional[str]:
    pair = _INTERPRETATION.get(status)
    return pair[1] if pair else None


def patient_resource(profile: PatientProfile) -> dict:
    return {
        "resourceType": "Patient",
        "id": profile.peer_id,
        "identifier": [{"system": PEER_ID_SYSTEM, "value": profile.peer_id}],
        "name": [{"use": "official", "family": profile.last, "given": [profile.first]}],
        "birthDate": profile.dob.isoformat(),
        "extension": [
            {"url": "urn:blockiot:diagnoses", "valueString": d} for d in profile.diagnoses
        ],
    }


def observation_resources(
    doc: PatientDocument,
    field: Optional[str] = None,
    window: tuple[Optional[datetime], Optional[datetime]] = (None, None),
) -> list[dict]:
    """One Observation per stored value, ascending by time, window is ``[start, end)``."""
    start, end = window
    out = []
    for entry in doc.entries:
        obs = entry.observation
        if start is not None and obs.timestamp < start:
            continue
        if end is not None and obs.timestamp >= end:
            continue
        for v in obs.values:
            if field is not None and v.key != field:
                continue
            res = {
                "resourceType": "Observation",
                "id": f"{doc.logical_id}.{entry.seq}.{v.key}",
                "status": "final",
                "category": [{"text": doc.device_type.value}],
                "code": {"text": v.key, "unit": v.unit},
                "subject": {"reference": f"Patient/{doc.peer_id}"},
                "effectiveDateTime": format_instant(obs.timestamp),
                "meta": {"tag": [{"system": "urn:blockiot:template", "code": obs.template_id}]},
            }
            if is_number(v.value):
                res["valueQuantity"] = {"value": v.value, "unit": v.unit}
            elif isinstance(v.value, list):
                res["valueSampledData"] = {"data": " ".join(f"{x:g}" for x in v.value), "unit": v.unit}
            else:
                res["valueString"] = v.value
            code = _INTERPRETATION.get(v.status)
            if code is not None:
                res["interpretation"] = [
                    {"coding": [{"system": INTERPRETATION_SYSTEM, "code": code[0]}], "text": code[1]}
                ]
            out.append(res)
    # documents are already time-ordered; sort is stable, so ties keep stored order
    out.sort(key=lambda r: r["effectiveDateTime"])
    return out


def bundle(resources: Iterable[dict], base_url: str = "") -> dict:
    entries = [
        {"fullUrl": f"{base_url}/{r['resourceType']}/{r['id']}", "resource": r} for r in resources
    ]
    return {"resourceType": "Bundle", "type": "searchset", "total": len(entries), "entry": entries}


def device_resource(peer_id: str, device_type: DeviceType, template_ids: list[str]) -> dict:
    return {
        "resourceType": "Device",
        "id": f"{peer_id[:16]}-{device_type.value}",
        "type": {"text": device_type.value},
        "patient": {"reference": f"Patient/{peer_id}"},
        "extension": [{"url": "urn:blockiot:template", "valueString": t} for t in template_ids],
    }


def operation_outcome(code: str, diagnostics: str, severity: str = "error") -> dict:
    return {
        "resourceType": "OperationOutcome",
        "issue": [{"severity": severity, "code": code, "diagnostics": diagnostics}],
    }
