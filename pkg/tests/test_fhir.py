import random
import re
from datetime import timedelta
from fractions import Fraction

import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings
from hypothesis import strategies as st

from blockiot.clock import format_instant
from blockiot.core.model import TemplateField, ValueStatus
from blockiot.fhir import create_app
from blockiot.fhir.api import parse_date_window
from blockiot.fhir.chart import render_chart
from blockiot.fhir.trend import compute_trend

from conftest import T0, ingest

D = timedelta(days=1)


@pytest.fixture
def api(node, wendy):
    node.register_patient(wendy)
    return TestClient(create_app(node))


def _grant(api, peer, requester="ehr-1"):
    r = api.post("/access-requests", json={"requester": requester, "patient": peer})
    assert r.status_code == 201, r.text
    return r.json()


def _auth(grant):
    return {"Authorization": f"Bearer {grant['token']}"}


# -- trend -------------------------------------------------------------------


def test_trend_examples():
    t = compute_trend([(0, 5), (1, 5), (2, 5)])
    assert (t.slope, t.intercept) == (0.0, 5.0)
    t = compute_trend([(0, 0), (1, 2)])
    assert (t.slope, t.intercept) == (2.0, 0.0)
    assert compute_trend([(0, 1)]) is None
    assert compute_trend([(3, 1), (3, 2)]) is None
    t = compute_trend([(T0, 1.0), (T0 + D / 2, 2.0)])
    assert t.slope == pytest.approx(2.0)


def _ols(points):
    n = len(points)
    ts = [Fraction(t) for t, _ in points]
    vs = [Fraction(v) for _, v in points]
    st_, sv = sum(ts), sum(vs)
    stt = sum(t * t for t in ts)
    stv = sum(t * v for t, v in zip(ts, vs))
    slope = (n * stv - st_ * sv) / (n * stt - st_ * st_)
    return slope, (sv - slope * st_) / n


MS_PER_DAY = 86_400_000


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 60 * MS_PER_DAY), st.floats(-500, 500)), min_size=2, max_size=40))
def test_trend_matches_exact_ols(raw):
    points = [(ms / MS_PER_DAY, v) for ms, v in raw]  # millisecond timestamps, as stored
    if len({t for t, _ in points}) < 2:
        assert compute_trend(points) is None
        return
    got = compute_trend(points)
    slope, intercept = _ols(points)
    scale = max(1.0, max(abs(v) for _, v in points))
    assert abs(got.slope - float(slope)) <= 1e-6 * scale * max(1.0, abs(float(slope)))
    assert abs(got.intercept - float(intercept)) <= 1e-6 * scale * max(1.0, abs(float(intercept)))


# -- chart -------------------------------------------------------------------

SYS = TemplateField("systolic", "mmHg", 90, 180)


def test_chart_points_and_limits():
    pts = [(T0 + i * D, 120 + (i % 7) * 10, ValueStatus.WITHIN_LIMITS) for i in range(30)]
    pts[5] = (pts[5][0], 200, ValueStatus.ABOVE_UPPER)
    svg, trend = render_chart(pts, SYS, "bp")
    text = svg.decode()
    assert text.count('class="point') == 30
    assert text.count('class="point out-of-limit"') == 1
    assert text.count('class="limit-line') == 2
    assert 'class="trend"' in text and trend.n == 30
    assert render_chart(pts, SYS, "bp")[0] == svg


def test_chart_single_point_no_trend():
    svg, trend = render_chart([(T0, 120, ValueStatus.WITHIN_LIMITS)], SYS, "bp")
    assert trend is None and b'class="trend"' not in svg


# -- routes ------------------------------------------------------------------


def test_date_window_parser():
    assert parse_date_window([]) == (None, None)
    s, e = parse_date_window([f"ge{format_instant(T0)}", f"lt{format_instant(T0 + D)}"])
    assert (s, e) == (T0, T0 + D)


def test_access_request(api, wendy, clock):
    g = _grant(api, wendy.peer_id)
    assert g["expires_at"] == format_instant(T0 + timedelta(hours=24))
    assert api.post("/access-requests", json={"requester": "rogue", "patient": wendy.peer_id}).status_code == 403
    assert api.post("/access-requests", json={"requester": "ehr-1", "patient": "0" * 64}).status_code == 404
    assert api.post("/access-requests", json={"patient": wendy.peer_id}).status_code == 400
    clock.advance(timedelta(hours=25))
    g2 = _grant(api, wendy.peer_id)
    assert g2["token"] != g["token"]
    assert api.get(f"/Patient/{wendy.peer_id}", headers=_auth(g)).status_code == 401
    assert api.get(f"/Patient/{wendy.peer_id}", headers=_auth(g2)).status_code == 200


def test_get_patient(api, wendy, node, clock):
    g = _grant(api, wendy.peer_id)
    r1 = api.get(f"/Patient/{wendy.peer_id}", headers=_auth(g))
    r2 = api.get(f"/Patient/{wendy.peer_id}", headers=_auth(g))
    assert r1.status_code == 200 and r1.headers["content-type"].startswith("application/fhir+json")
    body = r1.json()
    assert body["resourceType"] == "Patient" and body["id"] == r2.json()["id"] == wendy.peer_id
    assert body["birthDate"] == "1969-01-15" and body["name"][0]["family"] == "Barnes"
    assert api.get(f"/Patient/{wendy.peer_id}").status_code == 401
    assert api.get(f"/Patient/{wendy.peer_id}", headers={"Authorization": "Bearer nope"}).status_code == 401
    admin = _grant(api, None, "admin")
    assert api.get(f"/Patient/{'0' * 64}", headers=_auth(admin)).status_code == 404
    clock.advance(timedelta(hours=24))
    r = api.get(f"/Patient/{wendy.peer_id}", headers=_auth(g))
    assert r.status_code == 401 and r.json()["resourceType"] == "OperationOutcome"


def test_revoke_route(api, wendy):
    g = _grant(api, wendy.peer_id)
    assert api.delete(f"/access-grants/{g['grant_id']}").status_code == 200
    assert api.get(f"/Patient/{wendy.peer_id}", headers=_auth(g)).status_code == 401
    assert api.delete("/access-grants/none").status_code == 404


def test_observation_bundle(api, node, wendy):
    p = wendy.peer_id
    for i, bpm in enumerate([70, 110, 50]):
        ingest(node, p, "heart_rate", {"bpm": bpm}, T0 - timedelta(hours=3 - i))
    g = _grant(api, p)
    start, end = T0 - timedelta(hours=2), T0
    r = api.get("/Observation", headers=_auth(g), params=[
        ("subject", f"Patient/{p}"), ("code", "bpm"),
        ("date", f"ge{format_instant(start)}"), ("date", f"lt{format_instant(end)}"),
    ])
    assert r.status_code == 200
    b = r.json()
    assert b["resourceType"] == "Bundle" and b["total"] == 2
    got = [(e["resource"]["valueQuantity"]["value"], e["resource"]["interpretation"][0]["text"])
           for e in b["entry"]]
    assert got == [(110, "high"), (50, "low")]
    same = format_instant(T0)
    r = api.get("/Observation", headers=_auth(g),
                params=[("subject", f"Patient/{p}"), ("date", f"ge{same}"), ("date", f"lt{same}")])
    assert r.status_code == 200 and r.json()["total"] == 0
    r = api.get("/Observation", headers=_auth(g), params=[
        ("subject", f"Patient/{p}"), ("date", f"ge{format_instant(end)}"), ("date", f"lt{format_instant(start)}")])
    assert r.status_code == 422
    assert api.get("/Observation", headers=_auth(g), params={"subject": p}).status_code == 422


@settings(max_examples=15, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 200), st.integers(30, 200)), min_size=1, max_size=12),
       st.integers(0, 200), st.integers(0, 200))
def test_bundle_equals_sort_filter_oracle(readings, a, b):
    from blockiot.clock import ManualClock
    from blockiot.config import Config
    from blockiot.node import BlockIoTNode
    from conftest import WENDY_DOB
    from blockiot.core.model import DeviceType, PatientProfile

    node = BlockIoTNode(Config(), clock=ManualClock(T0 + timedelta(hours=300)), in_memory=True)
    profile = PatientProfile("a" * 64, "A", "B", WENDY_DOB, (), (DeviceType.HEART_RATE,), (), physician="ehr-1")
    node.register_patient(profile)
    for minute, bpm in readings:
        ingest(node, profile.peer_id, "heart_rate", {"bpm": bpm}, T0 + timedelta(minutes=minute))
    lo, hi = min(a, b), max(a, b)
    client = TestClient(create_app(node))
    g = _grant(client, profile.peer_id)
    r = client.get("/Observation", headers=_auth(g), params=[
        ("subject", f"Patient/{profile.peer_id}"), ("code", "bpm"),
        ("date", f"ge{format_instant(T0 + timedelta(minutes=lo))}"),
        ("date", f"lt{format_instant(T0 + timedelta(minutes=hi))}")])
    got = [(e["resource"]["effectiveDateTime"], e["resource"]["valueQuantity"]["value"]) for e in r.json()["entry"]]
    indexed = sorted((m, i, v) for i, (m, v) in enumerate(readings) if lo <= m < hi)
    oracle = [(format_instant(T0 + timedelta(minutes=m)), v) for m, _, v in indexed]
    assert got == oracle


def test_chart_route(api, node, wendy, clock):
    p = wendy.peer_id
    g = _grant(api, p)
    url = f"/Patient/{p}/chart"
    params = {"device": "blood_pressure", "code": "systolic"}
    assert api.get(url, headers=_auth(g), params=params).status_code == 204
    ingest(node, p, "blood_pressure", {"systolic": 120, "diastolic": 80}, T0 - 2 * D)
    r = api.get(url, headers=_auth(g), params=params)
    assert r.status_code == 200 and r.headers["content-type"] == "image/svg+xml"
    assert r.headers["X-Point-Count"] == "1" and "X-Trend-Slope-Per-Day" not in r.headers
    ingest(node, p, "blood_pressure", {"systolic": 140, "diastolic": 80}, T0 - D)
    first = api.get(url, headers=_auth(g), params=params)
    second = api.get(url, headers=_auth(g), params=params)
    assert first.content == second.content
    assert first.headers["X-Point-Count"] == "2"
    assert float(first.headers["X-Trend-Slope-Per-Day"]) == pytest.approx(20.0)
    ingest(node, p, "blood_pressure", {"systolic": 130, "diastolic": 80}, T0)
    third = api.get(url, headers=_auth(g), params=params)
    assert int(third.headers["X-Point-Count"]) == 3
    assert third.text.count('class="point') == 3
    assert api.get(url, params=params).status_code == 401


def test_device_and_templates(api, node, wendy):
    p = wendy.peer_id
    ingest(node, p, "heart_rate", {"bpm": 70}, T0)
    g = _grant(api, p)
    r = api.get("/Device", headers=_auth(g), params={"patient": p})
    assert r.json()["total"] == 1
    assert len(api.get("/templates").json()["templates"]) == 8
    assert api.get("/templates/hr-monitor-v1").json()["device_type"] == "heart_rate"
    assert api.get("/templates/none").status_code == 404


def test_metadata_lists_routes(api):
    routes = {(r["path"], r["method"]) for r in api.get("/metadata").json()["rest"][0]["routes"]}
    for expected in [("/Patient/{peer_id}", "GET"), ("/Observation", "GET"),
                     ("/Patient/{peer_id}/chart", "GET"), ("/access-requests", "POST"),
                     ("/ingest/{peer_id}/{device_type}", "POST")]:
        assert expected in routes


def test_http_ingest_route(api, node, wendy):
    p = wendy.peer_id
    tok = {"X-Device-Token": node.device_token(p, "heart_rate")}
    r = api.post(f"/ingest/{p}/heart_rate", json={"bpm": 70}, headers=tok)
    assert r.status_code == 202 and r.json()["status"] == "Accepted"
    assert api.post(f"/ingest/{p}/heart_rate", json={}, headers=tok).status_code == 400
    assert api.get(f"/ingest/{p}/heart_rate", headers=tok).status_code == 405
    assert node.process_pending().stored == 1


def test_register_patient_route(node, wendy):
    api = TestClient(create_app(node))
    body = wendy.to_dict()
    assert api.post("/Patient", json=body).status_code == 401
    admin = _grant(api, None, "admin")
    assert api.post("/Patient", json=body, headers=_auth(admin)).status_code == 201
    ehr = _grant(api, wendy.peer_id)
    assert api.post("/Patient", json=body, headers=_auth(ehr)).status_code == 403
    clash = dict(body, medications=["Aspirin"])
    assert api.post("/Patient", json=clash, headers=_auth(admin)).status_code == 409
    assert api.post("/Patient", json={"first": "x"}, headers=_auth(admin)).status_code == 422


def test_every_data_response_has_live_grant(api, node, wendy, clock):
    """Any 200 on a data route coincides with an unexpired grant in the ledger."""
    from blockiot.ledger import TxKind
    from blockiot.clock import parse_instant

    p = wendy.peer_id
    ingest(node, p, "heart_rate", {"bpm": 70}, T0)
    rng = random.Random(3)
    tokens = [None, "bogus"]
    for step in range(40):
        if rng.random() < 0.2:
            tokens.append(_grant(api, p)["token"])
        clock.advance(timedelta(hours=rng.choice([1, 5, 12])))
        tok = rng.choice(tokens)
        headers = {} if tok is None else {"Authorization": f"Bearer {tok}"}
        r = api.get(f"/Patient/{p}", headers=headers)
        live = [t for t in node.ledger.transactions(TxKind.ACCESS_GRANT)
                if parse_instant(t.body["expires_at"]) > clock()]
        if r.status_code == 200:
            assert live
        else:
            assert r.status_code == 401
