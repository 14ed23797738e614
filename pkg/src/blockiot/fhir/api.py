"""HTTP surface of a node: device ingest plus a read-only FHIR-style API.

Every clinical read needs ``Authorization: Bearer <token>`` from a live
access grant; data is read through the folder the grant resolves to.
"""

from __future__ import annotations

from datetime import datetime, timedelta
from typing import Optional

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, Response

from blockiot.clock import format_instant, parse_instant
from blockiot.core.model import DeviceType, PatientProfile, is_number
from blockiot.ledger.grants import ROLE_ADMIN
from blockiot.errors import (
    BlockIoTError,
    GrantExpired,
    GrantUnknown,
    NotFound,
    PeerIdCollision,
    UnknownRequester,
    UnknownSubject,
)
from blockiot.fhir.chart import render_chart
from blockiot.fhir.resources import (
    bundle,
    device_resource,
    observation_resources,
    operation_outcome,
    patient_resource,
)
from blockiot.store.documents import PROFILE, PatientDocument

FHIR_JSON = "application/fhir+json"


class ApiError(Exception):
    def __init__(self, status: int, code: str, diagnostics: str):
        self.status = status
        self.code = code
        self.diagnostics = diagnostics


def _outcome(status: int, code: str, diagnostics: str) -> JSONResponse:
    return JSONResponse(operation_outcome(code, diagnostics), status_code=status, media_type=FHIR_JSON)


def _fhir(body: dict, status: int = 200) -> JSONResponse:
    return JSONResponse(body, status_code=status, media_type=FHIR_JSON)


def parse_date_window(params: list[str]) -> tuple[Optional[datetime], Optional[datetime]]:
    """``date=ge<instant>`` and ``date=lt<instant>`` give a half-open window."""
    start = end = None
    for raw in params:
        prefix, value = raw[:2], raw[2:]
        if prefix not in ("ge", "lt"):
            raise ApiError(422, "invalid", f"date parameter {raw!r} must start with ge or lt")
        try:
            when = parse_instant(value)
        except (ValueError, TypeError):
            raise ApiError(422, "invalid", f"cannot parse date {value!r}") from None
        if prefix == "ge":
            if start is not None:
                raise ApiError(422, "invalid", "date=ge given twice")
            start = when
        else:
            if end is not None:
                raise ApiError(422, "invalid", "date=lt given twice")
            end = when
    if start is not None and end is not None and end < start:
        raise ApiError(422, "invalid", "date window is reversed")
    return start, end


def create_app(node) -> FastAPI:
    app = FastAPI(title="BlockIoT node", docs_url=None, redoc_url=None)
    docs = node.docs

    @app.exception_handler(ApiError)
    async def _api_error(_request: Request, exc: ApiError):
        return _outcome(exc.status, exc.code, exc.diagnostics)

    def folder_for(request: Request, peer_id: str) -> dict:
        header = request.headers.get("authorization", "")
        scheme, _, token = header.partition(" ")
        if scheme.lower() != "bearer" or not token.strip():
            raise ApiError(401, "login", "bearer token required")
        try:
            cid = node.grants.resolve_grant(token.strip(), subject=peer_id)
        except (GrantUnknown, GrantExpired) as exc:
            raise ApiError(401, "expired" if isinstance(exc, GrantExpired) else "login", str(exc)) from None
        except UnknownSubject:
            raise ApiError(404, "not-found", f"unknown patient {peer_id}") from None
        return docs.read_folder(cid)

    def documents(folder: dict, device: Optional[str]) -> list[PatientDocument]:
        links = folder["links"]
        if device is not None:
            try:
                device = DeviceType.parse(device).value
            except ValueError:
                raise ApiError(422, "invalid", f"unknown device type {device!r}") from None
            names = [device] if device in links else []
        else:
            names = sorted(k for k in links if k != PROFILE)
        return [docs.read_document(links[n]) for n in names]

    def subject_of(subject: str) -> str:
        if not subject.startswith("Patient/") or len(subject) <= len("Patient/"):
            raise ApiError(422, "invalid", "subject must be Patient/{id}")
        return subject[len("Patient/"):]

    # -- ingest ------------------------------------------------------------

    @app.api_route("/ingest/{peer_id}/{device_type}", methods=["GET", "POST", "PUT", "PATCH", "DELETE"])
    async def ingest(peer_id: str, device_type: str, request: Request):
        body = await request.body()
        source = f"http:{request.client.host}" if request.client else "http"
        ack = node.gateway.handle_http_publish(
            request.method, request.url.path, dict(request.headers), body, source
        )
        payload = {"status": ack.status.value}
        if ack.accepted:
            payload["seq"] = ack.envelope.seq
        else:
            payload["reason"] = ack.reason
        return JSONResponse(payload, status_code=int(ack.code))

    # -- access ------------------------------------------------------------

    @app.post("/access-requests")
    async def access_request(request: Request):
        try:
            body = await request.json()
        except ValueError:
            raise ApiError(400, "invalid", "body must be JSON") from None
        if not isinstance(body, dict) or not isinstance(body.get("requester"), str):
            raise ApiError(400, "invalid", "requester is required")
        patient = body.get("patient")
        hours = body.get("duration_hours")
        if hours is not None and (not is_number(hours) or hours <= 0):
            raise ApiError(400, "invalid", "duration_hours must be a positive number")
        try:
            grant = node.grants.grant_access(
                body["requester"], patient, None if hours is None else timedelta(hours=hours)
            )
        except UnknownRequester:
            raise ApiError(403, "forbidden", f"unknown node {body['requester']!r}") from None
        except UnknownSubject as exc:
            raise ApiError(404, "not-found", str(exc)) from None
        return JSONResponse(
            {
                "grant_id": grant.grant_id,
                "token": grant.name_link,
                "expires_at": format_instant(grant.expires_at),
            },
            status_code=201,
        )

    @app.delete("/access-grants/{grant_id}")
    async def revoke(grant_id: str):
        try:
            grant = node.grants.revoke(grant_id)
        except GrantUnknown:
            raise ApiError(404, "not-found", f"unknown grant {grant_id}") from None
        return {"grant_id": grant.grant_id, "expires_at": format_instant(grant.expires_at)}

    @app.post("/Patient")
    async def register_patient(request: Request):
        header = request.headers.get("authorization", "")
        scheme, _, token = header.partition(" ")
        if scheme.lower() != "bearer" or not token.strip():
            raise ApiError(401, "login", "bearer token required")
        try:
            grant = node.grants.check(token.strip())
        except (GrantUnknown, GrantExpired) as exc:
            raise ApiError(401, "login", str(exc)) from None
        if node.nodes.role(grant.requester) != ROLE_ADMIN:
            raise ApiError(403, "forbidden", "only admin nodes may register patients")
        try:
            profile = PatientProfile.from_dict(await request.json())
            node.register_patient(profile)
        except PeerIdCollision as exc:
            raise ApiError(409, "conflict", str(exc)) from None
        except (ValueError, KeyError, TypeError, BlockIoTError) as exc:
            raise ApiError(422, "invalid", f"bad profile: {exc}") from None
        return _fhir(patient_resource(profile), 201)

    # -- FHIR reads --------------------------------------------------------

    @app.get("/Patient/{peer_id}")
    async def get_patient(peer_id: str, request: Request):
        folder = folder_for(request, peer_id)
        cid = folder["links"].get(PROFILE)
        if cid is None:
            raise ApiError(404, "not-found", f"patient {peer_id} has no profile")
        return _fhir(patient_resource(docs.read_profile(cid)))

    @app.get("/Observation")
    async def search_observations(
        request: Request,
        subject: str = Query(...),
        code: Optional[str] = None,
        device: Optional[str] = None,
        date: list[str] = Query(default=[]),
    ):
        peer_id = subject_of(subject)
        window = parse_date_window(date)
        folder = folder_for(request, peer_id)
        resources: list[dict] = []
        for doc in documents(folder, device):
            resources.extend(observation_resources(doc, code, window))
        resources.sort(key=lambda r: r["effectiveDateTime"])
        return _fhir(bundle(resources, str(request.base_url).rstrip("/")))

    @app.get("/Patient/{peer_id}/chart")
    async def chart(
        peer_id: str,
        request: Request,
        device: str = Query(...),
        code: str = Query(...),
        date: list[str] = Query(default=[]),
    ):
        window = parse_date_window(date)
        folder = folder_for(request, peer_id)
        docs_found = documents(folder, device)
        points, template_id = [], None
        start, end = window
        for doc in docs_found:
            for obs in doc.observations:
                if (start and obs.timestamp < start) or (end and obs.timestamp >= end):
                    continue
                for v in obs.values:
                    if v.key == code and is_number(v.value):
                        points.append((obs.timestamp, float(v.value), v.status))
                        template_id = obs.template_id
        if not points:
            return Response(status_code=204)
        try:
            field = node.registry.get(template_id).field(code)
        except (KeyError, NotFound, BlockIoTError):
            raise ApiError(404, "not-found", f"template {template_id} no longer registered") from None
        title = f"{DeviceType.parse(device).value} {code}"
        svg, trend = render_chart(points, field, title, window)
        headers = {"X-Generated-At": format_instant(node.clock()), "X-Point-Count": str(len(points))}
        if trend is not None:
            headers["X-Trend-Slope-Per-Day"] = repr(trend.slope)
        return Response(svg, media_type="image/svg+xml", headers=headers)

    @app.get("/Device")
    async def devices(request: Request, patient: str = Query(...)):
        folder = folder_for(request, patient)
        resources = [
            device_resource(patient, doc.device_type, sorted({o.template_id for o in doc.observations}))
            for doc in documents(folder, None)
        ]
        return _fhir(bundle(resources, str(request.base_url).rstrip("/")))

    # -- catalogue ---------------------------------------------------------

    @app.get("/templates")
    async def templates():
        return {"templates": [t.to_dict() for t in node.registry]}

    @app.get("/templates/{template_id}")
    async def template(template_id: str):
        if template_id not in node.registry:
            raise ApiError(404, "not-found", f"unknown template {template_id}")
        return node.registry.get(template_id).to_dict()

    @app.get("/metadata")
    async def metadata():
        routes = sorted(
            {(r.path, m) for r in app.routes for m in getattr(r, "methods", None) or ()
             if m not in ("HEAD", "OPTIONS")}
        )
        return _fhir({
            "resourceType": "CapabilityStatement",
            "status": "active",
            "kind": "instance",
            "format": ["json"],
            "rest": [{"mode": "server", "routes": [{"path": p, "method": m} for p, m in routes]}],
        })

    return app
