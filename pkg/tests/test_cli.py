import json

import pytest

from blockiot.cli import main


@pytest.fixture(autouse=True)
def _isolate(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    for k in list(__import__("os").environ):
        if k.startswith("BLOCKIOT_"):
            monkeypatch.delenv(k)


def test_unknown_subcommand():
    assert main(["frobnicate"]) == 2


def test_no_subcommand():
    assert main([]) == 2


def test_templates_list(capsys):
    assert main(["templates", "list"]) == 0
    out = capsys.readouterr().out
    assert "hr-monitor-v1" in out and "cbc-panel-v1" in out


def test_gen_cohort(tmp_path):
    out = tmp_path / "cohort.json"
    assert main(["gen-cohort", "--patients", "3", "--forced", "table1", "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert len(data["patients"]) == 3
    assert data["patients"][0]["profile"]["first"] == "Wendy"


def test_reliability_writes_report(tmp_path):
    assert main(["reliability", "--patients", "5", "--readings", "3", "--reports-dir", "r"]) == 0
    [report] = list((tmp_path / "r").glob("*/reliability.json"))
    assert json.loads(report.read_text())["passed"] is True


def test_load_virtual(tmp_path):
    assert main(["load", "--requests", "20", "--reports-dir", "r"]) == 0
    assert list((tmp_path / "r").glob("*/load.json"))


def test_load_failure_exit(tmp_path):
    assert main(["load", "--requests", "20", "--max-latency", "0", "--reports-dir", "r"]) == 1


def test_stream_in_process():
    assert main(["stream", "--in-process", "--forced", "table1", "--readings", "5",
                 "--anomalies", "1", "--protocol", "coap", "--reports-dir", "r"]) == 0


def test_stream_unreachable():
    assert main(["stream", "--readings", "1", "--reports-dir", "r", "--root", "d"]) in (1, 2)


def test_grant_and_verify_chain(tmp_path, capsys):
    from blockiot.config import Config
    from blockiot.node import BlockIoTNode
    from blockiot.sim import forced_patient

    cfg = Config(root=str(tmp_path / "data"))
    node = BlockIoTNode(cfg)
    node.register_patient(forced_patient("table1").profile)
    node.close()
    pid = forced_patient("table1").peer_id
    assert main(["--root", str(tmp_path / "data"), "grant", "--patient", pid]) == 0
    grant = json.loads(capsys.readouterr().out)
    assert grant["token"]
    assert main(["--root", str(tmp_path / "data"), "grant", "--revoke", grant["grant_id"]]) == 0
    assert main(["--root", str(tmp_path / "data"), "grant", "--requester", "nobody",
                 "--patient", pid]) == 1
    assert main(["--root", str(tmp_path / "data"), "verify-chain"]) == 0

    chain = tmp_path / "data" / "ledger" / "chain.jsonl"
    raw = bytearray(chain.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    tampered = tmp_path / "tampered.jsonl"
    tampered.write_bytes(bytes(raw))
    capsys.readouterr()
    assert main(["verify-chain", "--file", str(tampered), "--json"]) == 1
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] is False and report["issues"]


def test_verify_chain_missing_file():
    assert main(["verify-chain", "--file", "nope.jsonl"]) in (1, 2)


def test_bad_config(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("gateway:\n  nonsense: 1\n")
    assert main(["--config", str(p), "templates", "list"]) == 2
