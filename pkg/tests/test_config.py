from datetime import timedelta

import pytest

from blockiot.clock import ManualClock
from blockiot.config import Config, load_config


def test_defaults():
    cfg = load_config(env={})
    assert cfg.gateway.http_port == 8080 and cfg.gateway.mqtt_port == 1883
    assert cfg.gateway.coap_port == 5683
    assert cfg.ledger.seal_size == 64 and cfg.ledger.seal_interval_seconds == 5
    assert cfg.grant_duration == timedelta(hours=24)
    assert cfg.ledger.confirmation_timeout_minutes == 30


def test_yaml_and_env(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("root: /tmp/x\ngateway:\n  http_port: 9000\nledger:\n  seal_size: 8\n")
    cfg = load_config(p, env={"BLOCKIOT_GATEWAY_AUTH_ENFORCE": "false", "BLOCKIOT_LEDGER_SEAL_SIZE": "16",
                              "BLOCKIOT_CLOCK": "fixed:2026-03-02T09:00:00Z"})
    assert cfg.gateway.http_port == 9000 and cfg.ledger.seal_size == 16
    assert cfg.gateway.auth_enforce is False
    clock = cfg.make_clock()
    assert isinstance(clock, ManualClock) and clock().hour == 9


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("store:\n  bogus: 1\n")
    with pytest.raises(ValueError):
        load_config(p, env={})
    p.write_text("nonsense: 1\n")
    with pytest.raises(ValueError):
        load_config(p, env={})


def test_file_backed_node_roundtrip(tmp_path, wendy):
    from blockiot.node import BlockIoTNode
    from conftest import T0, ingest

    cfg = Config(root=str(tmp_path))
    clock = ManualClock(T0)
    node = BlockIoTNode(cfg, clock=clock)
    node.register_patient(wendy)
    ingest(node, wendy.peer_id, "heart_rate", {"bpm": 120}, T0)
    node.close()
    again = BlockIoTNode(cfg, clock=clock)
    assert again.profile(wendy.peer_id) == wendy
    [obs] = again.observations(wendy.peer_id, "heart_rate")
    assert obs.value("bpm").value == 120
    assert again.ledger.verify().ok and len(again.ledger) == 2
    assert (tmp_path / "notifications" / "physician.jsonl").read_text().count("\n") == 1
    again.close()
