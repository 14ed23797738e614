"""Operator command line: ``blockiot <command> [options]``.

Exit status is 0 on success, 1 when a report fails and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
import threading
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional, Sequence

from blockiot.clock import format_instant
from blockiot.config import Config, load_config
from blockiot.errors import BlockIoTError, EndpointUnreachable

log = logging.getLogger("blockiot")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def write_report(reports_dir: str, name: str, payload: dict) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    out = Path(reports_dir) / stamp
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.json"
    path.write_text(json.dumps(payload, indent=2, default=str) + "\n", "utf-8")
    return path


def _node(cfg: Config, in_memory: bool = False):
    from blockiot.node import BlockIoTNode

    return BlockIoTNode(cfg, in_memory=in_memory)


# -- commands ---------------------------------------------------------------


def cmd_serve(args, cfg: Config) -> int:
    import uvicorn

    from blockiot.fhir.api import create_app
    from blockiot.gateway.coap import start_coap_server
    from blockiot.gateway.mqtt import start_mqtt_server

    node = _node(cfg)
    g = cfg.gateway

    async def main() -> None:
        server = uvicorn.Server(uvicorn.Config(create_app(node), host=g.host, port=g.http_port,
                                               log_level=args.log_level))
        mqtt = await start_mqtt_server(node.gateway, g.host, g.mqtt_port)
        coap = await start_coap_server(node.gateway, g.host, g.coap_port)
        stop = threading.Event()
        consumer = threading.Thread(target=node.run_consumer, args=(stop,), name="consumer", daemon=True)
        consumer.start()
        log.info("http :%d  mqtt :%d  coap :%d  root %s", g.http_port, g.mqtt_port, g.coap_port, cfg.root)
        try:
            await server.serve()
        finally:
            mqtt.close()
            coap.close()
            stop.set()
            consumer.join()
            node.close()

    asyncio.run(main())
    return EXIT_OK


def cmd_gen_cohort(args, cfg: Config) -> int:
    from blockiot.sim.cohort import generate_cohort

    cohort = generate_cohort(args.patients, args.seed, forced=args.forced or ())
    text = json.dumps(cohort.to_dict(), indent=2, default=str)
    if args.out:
        Path(args.out).write_text(text + "\n", "utf-8")
        print(f"wrote {len(cohort)} patients to {args.out}")
    else:
        print(text)
    return EXIT_OK


def cmd_stream(args, cfg: Config) -> int:
    from blockiot.gateway.auth import DeviceAuth
    from blockiot.sim.cohort import generate_cohort
    from blockiot.sim.streams import NetworkEndpoint, NodeEndpoint, make_plan, run_streams

    cohort = generate_cohort(args.patients, args.seed, forced=args.forced or ())
    start = datetime.now(timezone.utc) - timedelta(seconds=args.interval * args.readings)
    plans = [
        make_plan(p, d, start, args.readings, timedelta(seconds=args.interval), args.anomalies, args.seed)
        for p in cohort for d in p.profile.devices
        if not args.device or d.value == args.device
    ]
    if args.in_process:
        node = _node(cfg, in_memory=True)
        for p in cohort:
            node.register_patient(p.profile)
        endpoint, tokens = NodeEndpoint(node), node.device_token
    else:
        endpoint = NetworkEndpoint(cfg.gateway.host, cfg.gateway.http_port, cfg.gateway.mqtt_port,
                                   cfg.gateway.coap_port)
        secret = cfg.root_path / "gateway" / "device-secret"
        if not secret.exists():
            raise UsageError(f"no device secret at {secret}; run against the server's --root")
        tokens = DeviceAuth.from_file(secret).token_for
        try:
            register_remote(cfg, [p.profile for p in cohort])
        except (OSError, RuntimeError) as exc:
            print(f"error: cannot register patients: {exc}", file=sys.stderr)
            return EXIT_FAIL
    try:
        reports = run_streams(plans, args.protocol, endpoint, tokens, args.workers,
                              speedup=args.speedup)
    except EndpointUnreachable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        endpoint.close()
    if args.in_process:
        node.process_pending()
        node.close()
    sent = sum(r.sent for r in reports)
    accepted = sum(r.accepted for r in reports)
    summary = {"protocol": args.protocol, "streams": len(reports), "sent": sent, "accepted": accepted,
               "rejected": sent - accepted, "reports": [r.to_dict() for r in reports]}
    path = write_report(args.reports_dir, "stream", summary)
    print(f"{accepted}/{sent} readings accepted over {len(reports)} streams; report {path}")
    return EXIT_OK if accepted == sent else EXIT_FAIL


def register_remote(cfg: Config, profiles) -> None:
    """Register profiles on a running server using a short admin grant."""
    import httpx

    base = f"http://{cfg.gateway.host}:{cfg.gateway.http_port}"
    admin = next((n for n, r in cfg.ledger.nodes.items() if r == "admin"), None)
    if admin is None:
        raise RuntimeError("config declares no admin node")
    with httpx.Client(base_url=base, timeout=30) as client:
        r = client.post("/access-requests", json={"requester": admin, "patient": None, "duration_hours": 1})
        if r.status_code != 201:
            raise RuntimeError(f"admin grant refused: {r.status_code} {r.text}")
        grant = r.json()
        headers = {"Authorization": f"Bearer {grant['token']}"}
        try:
            for profile in profiles:
                r = client.post("/Patient", json=profile.to_dict(), headers=headers)
                if r.status_code != 201:
                    raise RuntimeError(f"registering {profile.peer_id[:12]}: {r.status_code} {r.text}")
        finally:
            client.delete(f"/access-grants/{grant['grant_id']}")


def cmd_reliability(args, cfg: Config) -> int:
    from blockiot.sim.harness import run_reliability_test

    node = None
    if args.root:
        cfg.root = args.root
        node = _node(cfg)
    report = run_reliability_test(args.patients, args.seed, args.readings, node=node)
    if node is not None:
        node.close()
    path = write_report(args.reports_dir, "reliability", report.to_dict())
    print(
        f"{report.patients_ok}/{report.patients} patients round-tripped, "
        f"{report.missing} missing, {report.corrupt} corrupt observations "
        f"({report.stored_observations}/{report.expected_observations} stored) "
        f"in {report.wall_seconds:.1f}s; report {path}"
    )
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_load(args, cfg: Config) -> int:
    from blockiot.sim.harness import run_load_test

    report = run_load_test(args.requests, args.interval, args.concurrency, args.mode,
                           seed=args.seed, max_latency=args.max_latency)
    path = write_report(args.reports_dir, "load", report.to_dict())
    print(
        f"{report.mode}: sent {report.requests_sent}, accepted {report.acks_accepted}, "
        f"rejected {report.acks_rejected}, stored {report.envelopes_stored}; latency "
        f"p50 {report.latency_p50 * 1000:.2f} ms, p95 {report.latency_p95 * 1000:.2f} ms, "
        f"max {report.latency_max * 1000:.2f} ms; report {path}"
    )
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_verify_chain(args, cfg: Config) -> int:
    from blockiot.ledger.chain import verify_chain_file

    path = Path(args.file) if args.file else cfg.root_path / "ledger" / "chain.jsonl"
    if not path.exists():
        raise UsageError(f"no ledger file at {path}")
    report = verify_chain_file(path)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    elif report.ok:
        print(f"{path}: chain intact")
    else:
        for issue in report.issues:
            print(f"block {issue.index}: {issue.reason}")
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_grant(args, cfg: Config) -> int:
    if args.url:
        import httpx

        try:
            if args.revoke:
                r = httpx.delete(f"{args.url.rstrip('/')}/access-grants/{args.revoke}")
            else:
                body = {"requester": args.requester, "patient": args.patient}
                if args.hours is not None:
                    body["duration_hours"] = args.hours
                r = httpx.post(f"{args.url.rstrip('/')}/access-requests", json=body)
        except httpx.HTTPError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAIL
        print(json.dumps(r.json(), indent=2))
        return EXIT_OK if r.status_code < 300 else EXIT_FAIL

    node = _node(cfg)
    try:
        if args.revoke:
            grant = node.grants.revoke(args.revoke)
        else:
            hours = None if args.hours is None else timedelta(hours=args.hours)
            grant = node.grants.grant_access(args.requester, args.patient, hours)
    except BlockIoTError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        node.close()
    out = grant.to_dict()
    if args.revoke:
        out.pop("token")
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_templates(args, cfg: Config) -> int:
    from blockiot.core.templates import default_registry, load_template_registry

    registry = default_registry()
    for extra in list(cfg.templates) + list(args.file or ()):
        registry = registry.merged(load_template_registry(extra))
    if args.yaml:
        print(registry.dumps(), end="")
        return EXIT_OK
    for t in registry:
        keys = ",".join(sorted(t.identifying_keys))
        print(f"{t.template_id:24} {t.device_type.value:15} keys={keys}")
        for f in t.fields:
            lim = "" if not f.has_limits else f" [{_num(f.lower_limit)}, {_num(f.upper_limit)}]"
            print(f"    {f.key:18} {f.unit}{lim}")
    return EXIT_OK


def _num(x: Optional[float]) -> str:
    return "-" if x is None else f"{x:g}"


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockiot", description="Medical IoT gateway node and simulator")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--root", dest="root_override", help="data directory (overrides config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("serve", help="run the HTTP/MQTT/CoAP gateway and the FHIR API")
    p.add_argument("--log-level", default="info")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("gen-cohort", help="generate a synthetic cohort as JSON")
    p.add_argument("--patients", type=int, default=10)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--forced", action="append", choices=["table1"], help="prepend a fixed profile")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_cohort)

    p = sub.add_parser("stream", help="replay synthetic device streams to a gateway")
    p.add_argument("--protocol", choices=["http", "mqtt", "coap"], default="http")
    p.add_argument("--patients", type=int, default=1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--forced", action="append", choices=["table1"])
    p.add_argument("--device", help="only this device type")
    p.add_argument("--readings", type=int, default=10)
    p.add_argument("--interval", type=float, default=1.0, help="seconds between readings")
    p.add_argument("--anomalies", type=int, default=0, help="out-of-limit readings per stream")
    p.add_argument("--speedup", type=float, help="pace in real time divided by this factor")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--in-process", action="store_true", help="use a throwaway in-memory node")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("reliability", help="upload a cohort, read it back and diff")
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--readings", type=int, default=12, help="readings per device")
    p.add_argument("--root", help="use a file-backed node in this directory")
    p.set_defaults(func=cmd_reliability)

    p = sub.add_parser("load", help="paced request load test")
    p.add_argument("--requests", type=int, default=10_000)
    p.add_argument("--interval", type=float, default=0.5)
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--mode", choices=["virtual", "real"], default="virtual")
    p.add_argument("--max-latency", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_load)

    p = sub.add_parser("verify-chain", help="check a ledger file for tampering")
    p.add_argument("--file", help="chain file (default: <root>/ledger/chain.jsonl)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_verify_chain)

    p = sub.add_parser("grant", help="mint or revoke an access grant")
    p.add_argument("--requester", default="ehr-1")
    p.add_argument("--patient", help="peer id (omit for an admin-wide grant)")
    p.add_argument("--hours", type=float)
    p.add_argument("--revoke", metavar="GRANT_ID")
    p.add_argument("--url", help="talk to a running server instead of the local data directory")
    p.set_defaults(func=cmd_grant)

    p = sub.add_parser("templates", help="device template registry")
    tsub = p.add_subparsers(dest="templates_command", required=True, metavar="action")
    tl = tsub.add_parser("list", help="print registered templates")
    tl.add_argument("--file", action="append", help="extra template YAML to merge")
    tl.add_argument("--yaml", action="store_true", help="print as YAML")
    tl.set_defaults(func=cmd_templates)

    for action in sub.choices.values():
        if action.prog.endswith(("stream", "reliability", "load")):
            action.add_argument("--reports-dir", default="reports")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger("httpx").setLevel(logging.WARNING)
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.root_override:
        cfg.root = args.root_override
    if args.command == "grant" and not args.revoke and not args.requester:
        parser.error("grant needs --requester")
    try:
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        # an interrupted server is a normal stop; anything else was cut short
        return EXIT_OK if args.command == "serve" else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
