import math
from datetime import timedelta
from importlib import resources

import pytest
import yaml

from blockiot.core.model import DeviceType
from blockiot.gateway import Protocol
from blockiot.ledger import TxKind
from blockiot.sim import (
    NodeEndpoint,
    StreamPlan,
    forced_patient,
    generate_cohort,
    inject_block_deletion,
    make_plan,
    percentile,
    run_load_test,
    run_reliability_test,
    run_stream,
)

from conftest import T0


def test_cohort_deterministic():
    a, b = generate_cohort(200, seed=7), generate_cohort(200, seed=7)
    assert a.to_dict() == b.to_dict()
    assert generate_cohort(200, seed=8).to_dict() != a.to_dict()
    assert len({p.peer_id for p in a}) == 200


def test_table1_profile():
    [p] = generate_cohort(1, forced=("table1",))
    prof = p.profile
    assert (prof.first, prof.last, prof.dob.isoformat()) == ("Wendy", "Barnes", "1969-01-15")
    assert len(prof.diagnoses) == 5 and len(prof.devices) == 5
    assert p.peer_id == "50bdcc1386e34a34b0fef144cbc67149a61c9b536faaaba36c45ae4984f3ba7c"
    assert p.baselines[DeviceType.HEART_RATE]["bpm"] == 80
    assert forced_patient("table1").profile == prof


def test_prevalence_within_three_sigma():
    raw = yaml.safe_load(resources.files("blockiot.data").joinpath("conditions.yaml").read_text())
    conds = {c["name"]: c for c in raw["conditions"]}
    p_ob = conds[raw["obesity_condition"]]["prevalence"]
    n = 10_000
    cohort = generate_cohort(n, seed=11)
    for name, c in conds.items():
        if name == raw["obesity_condition"]:
            p = p_ob
        else:
            m = c.get("obesity_multiplier", 1.0)
            p = p_ob * min(1.0, c["prevalence"] * m) + (1 - p_ob) * c["prevalence"]
        k = sum(name in pt.profile.diagnoses for pt in cohort)
        sigma = math.sqrt(n * p * (1 - p))
        assert abs(k - n * p) <= 3 * sigma, (name, k, n * p)


def test_obesity_raises_comorbidity():
    cohort = generate_cohort(10_000, seed=5)
    obese = [p for p in cohort if "Obesity" in p.profile.diagnoses]
    lean = [p for p in cohort if "Obesity" not in p.profile.diagnoses]
    rate = lambda group: sum("Hypertension" in p.profile.diagnoses for p in group) / len(group)
    assert rate(obese) > 1.4 * rate(lean)


def test_every_patient_has_templates(registry):
    for p in generate_cohort(300, seed=2):
        for d in p.profile.devices:
            assert registry.for_device(d)


def test_percentile():
    assert percentile([], 0.5) == 0.0
    assert percentile([3.0], 0.95) == 3.0
    assert percentile([1, 2, 3, 4], 0.5) == 2
    assert percentile(list(range(1, 101)), 0.95) == 95


# -- streams -----------------------------------------------------------------


@pytest.fixture
def table1():
    return forced_patient("table1")


def test_stream_100_http(node, table1):
    node.register_patient(table1.profile)
    plan = StreamPlan(table1, DeviceType.HEART_RATE, T0 - timedelta(hours=1), 100)
    r = run_stream(plan, "http", NodeEndpoint(node), node.device_token(table1.peer_id, "heart_rate"))
    node.process_pending()
    assert (r.sent, r.accepted, r.rejected) == (100, 100, 0)
    assert len(node.observations(table1.peer_id, "heart_rate")) == 100


def test_stream_anomalies_raise_alerts(node, table1):
    node.register_patient(table1.profile)
    plan = make_plan(table1, "blood_pressure", T0 - timedelta(hours=1), 40, anomalies=3, seed=4)
    run_stream(plan, Protocol.COAP, NodeEndpoint(node), node.device_token(table1.peer_id, "blood_pressure"))
    node.process_pending()
    raised = list(node.ledger.transactions(TxKind.ALERT_RAISED))
    assert len(raised) == 3
    assert sorted(t.body["observed_at"] for t in raised) == sorted(
        a.at.strftime("%Y-%m-%dT%H:%M:%S.000Z") for a in plan.anomalies)


def test_no_anomalies_no_alerts(node, table1):
    node.register_patient(table1.profile)
    for device in table1.profile.devices:
        plan = make_plan(table1, device, T0 - timedelta(hours=1), 30, seed=1)
        run_stream(plan, "mqtt", NodeEndpoint(node), node.device_token(table1.peer_id, device.value))
    node.process_pending()
    assert list(node.ledger.transactions(TxKind.ALERT_RAISED)) == []


def test_protocols_store_identical_observations(clock, table1):
    from blockiot.config import Config
    from blockiot.node import BlockIoTNode

    stored = {}
    for proto in ("http", "mqtt", "coap"):
        node = BlockIoTNode(Config(), clock=clock, in_memory=True)
        node.register_patient(table1.profile)
        plan = make_plan(table1, "sugar_levels", T0 - timedelta(hours=2), 25, anomalies=2, seed=9)
        run_stream(plan, proto, NodeEndpoint(node), node.device_token(table1.peer_id, "sugar_levels"))
        node.process_pending()
        stored[proto] = [o.to_dict() for o in node.observations(table1.peer_id, "sugar_levels")]
    assert stored["http"] == stored["mqtt"] == stored["coap"]
    assert len(stored["http"]) == 25


def test_separate_coap_endpoints_are_not_deduplicated(node, table1):
    node.register_patient(table1.profile)
    for device in ("heart_rate", "sugar_levels"):
        plan = make_plan(table1, device, T0 - timedelta(hours=1), 10, seed=2)
        run_stream(plan, "coap", NodeEndpoint(node), node.device_token(table1.peer_id, device))
    node.process_pending()
    assert len(node.observations(table1.peer_id, "heart_rate")) == 10
    assert len(node.observations(table1.peer_id, "sugar_levels")) == 10


def test_plan_validation(table1):
    from blockiot.sim import Anomaly

    bad = StreamPlan(table1, DeviceType.HEART_RATE, T0, 5, anomalies=(Anomaly(T0, "bpm", 80),))
    with pytest.raises(ValueError):
        bad.validate()
    with pytest.raises(ValueError):
        make_plan(table1, "heart_rate", T0, 2, anomalies=3)


# -- harness -----------------------------------------------------------------


def test_reliability_small():
    r = run_reliability_test(30, readings_per_device=5)
    assert r.passed and r.patients_ok == 30 and r.missing == 0 and r.corrupt == 0
    assert r.stored_observations == r.expected_observations > 0


def test_reliability_vacuous():
    r = run_reliability_test(0)
    assert r.passed and r.patients == 0


def test_reliability_block_deletion_flagged():
    target = {}

    def fault(node, cohort):
        p = list(cohort)[4]
        target["key"] = (p.peer_id, p.profile.devices[0].value)
        inject_block_deletion(node, p.peer_id, p.profile.devices[0])

    r = run_reliability_test(10, readings_per_device=4, fault=fault)
    assert not r.passed and r.patients_ok == 9
    assert [(f["peer_id"], f["device_type"]) for f in r.flagged] == [target["key"]]


def test_load_single_request():
    r = run_load_test(1)
    assert r.passed and r.requests_sent == r.envelopes_stored == 1
    assert r.latency_p50 == r.latency_p95 == r.latency_max


def test_load_virtual_conservation():
    r = run_load_test(300, interval=0.5, concurrency=3)
    assert r.conserved and r.acks_rejected == 0 and r.envelopes_stored == 300
    assert r.simulated_seconds >= 99 * 0.5


def test_load_real_small():
    r = run_load_test(100, interval=0.002, mode="real")
    assert r.conserved and r.acks_rejected == 0 and r.envelopes_stored == 100
