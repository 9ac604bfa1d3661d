"""Command-line entry point: ``gemombus <command> ...``.

Exit codes: 0 ok, 2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import asyncio
import base64
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import crypto
from .asm import Actuators, AdaptationManager, AsmParams, SensorHub
from .audit import AuditLog
from .config import EXIT_CONFIG, EXIT_FATAL, EXIT_OK, ConfigError, load_config
from .kmf import Kmf, KmfError, SecurityToken
from .monitoring import MetricSample, Monitor
from .net import BrokerNode, ClientNode, KmfNode, NodeHost, measure_throughput
from .scenario import ScenarioError, load_scenario
from .sim import export_report, run_scenario
from .wire import METRICS_PREFIX, Envelope

log = logging.getLogger("gemombus")


class UsageError(Exception):
    """Bad input the user can fix; maps to exit code 2."""


# KMF state on disk: root key, principals and secure topics


def _kmf_from_state(state: Path) -> Kmf:
    state.mkdir(parents=True, exist_ok=True)
    root_path = state / "root.pem"
    if root_path.exists():
        root = crypto.load_private_pem(root_path.read_bytes())
    else:
        root = crypto.generate_keypair()
        root_path.write_bytes(crypto.private_pem(root))
        (state / "kmf.pub").write_text(base64.b64encode(crypto.public_bytes(root)).decode() + "\n")
    kmf = Kmf("kmf", clock=lambda: time.time() * 1000.0, root_key=root)
    principals = _read_json(state / "principals.json", {})
    for name, rec in sorted(principals.items()):
        kmf.register_principal(name, base64.b64decode(rec["public_key"]), rec.get("groups", ()))
    for topic, rec in sorted(_read_json(state / "topics.json", {}).items()):
        kmf.register_secure_topic(topic, rec["owner"])
        kmf.grant(topic, *rec.get("acl", ()))
    return kmf


def _save_state(kmf: Kmf, state: Path) -> None:
    principals = {
        name: {"public_key": base64.b64encode(rec.public_key).decode(), "groups": list(rec.groups)}
        for name, rec in sorted(kmf.principals.items())
    }
    topics = {t: {"owner": owner, "acl": sorted(kmf.acl[t])} for t, owner in sorted(kmf.secure_topics.items())}
    (state / "principals.json").write_text(json.dumps(principals, indent=1, sort_keys=True) + "\n")
    (state / "topics.json").write_text(json.dumps(topics, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path, default):
    if not path.exists():
        return default
    return json.loads(path.read_text())


def _read_kmf_pub(path: Optional[str]) -> bytes:
    if not path:
        raise UsageError("the KMF public key file is required (--kmf-pub or kmf.public_key_file)")
    try:
        return base64.b64decode(Path(path).read_text().strip())
    except OSError as exc:
        raise UsageError(f"cannot read KMF public key: {exc}") from None


def cmd_kmf(args) -> int:
    state = Path(args.state)
    kmf = _kmf_from_state(state)
    if args.provision:
        return _provision(kmf, state, args)
    if not args.listen:
        raise UsageError("kmf needs --listen, or --provision to create a principal")

    async def serve():
        node = KmfNode(kmf)
        host, port = await node.start(args.listen)
        print(f"kmf listening on {host}:{port}", flush=True)
        await asyncio.Event().wait()

    asyncio.run(serve())
    return EXIT_OK


def _provision(kmf: Kmf, state: Path, args) -> int:
    name = args.provision
    out = Path(args.out or state / name)
    out.mkdir(parents=True, exist_ok=True)
    key = crypto.generate_keypair()
    kmf.register_principal(name, crypto.public_bytes(key), args.groups.split(",") if args.groups else ("clients",))
    for topic in args.topic or ():
        if topic not in kmf.secure_topics:
            kmf.register_secure_topic(topic, name)
        kmf.grant(topic, name)
    tok = kmf.issue_token(name, args.pattern, args.rights.split(","), args.strength, int(args.ttl * 1000))
    (out / "key.pem").write_bytes(crypto.private_pem(key))
    (out / "token").write_text(tok.encode() + "\n")
    _save_state(kmf, state)
    print(f"provisioned {name}: token {tok.token_id} for {args.pattern} ({','.join(tok.rights)}) in {out}")
    return EXIT_OK


def cmd_broker(args) -> int:
    cfg = load_config(args.config, {"listen": args.listen, "node.id": args.node_id, "kmf.public_key_file": args.kmf_pub})
    kmf_pub = _read_kmf_pub(cfg["kmf.public_key_file"])
    policy = directory = None
    if cfg["policy.file"]:
        policy = json.loads(Path(cfg["policy.file"]).read_text())
        directory = json.loads(Path(cfg["directory.file"]).read_text())
    audit = AuditLog(cfg["audit.file"])

    async def serve():
        node = BrokerNode(
            cfg.node_id,
            kmf_pub,
            policy=policy,
            kmf_address=cfg["kmf.address"] if args.with_kmf else None,
            directory=directory or {},
            max_redelivery=cfg["broker.max_redelivery"],
            ack_timeout=cfg["broker.ack_timeout_s"],
            replay_capacity=cfg["broker.replay_capacity"],
            audit=audit,
        )
        host, port = await node.start(cfg["listen"])
        print(f"broker {cfg.node_id} listening on {host}:{port}", flush=True)
        await asyncio.Event().wait()

    asyncio.run(serve())
    return EXIT_OK


class _LoggingActuators(Actuators):
    """A stand-alone ASM has no components attached: it reports what it would do."""

    def __init__(self, out):
        self.out = out

    def _say(self, what: str) -> None:
        print(f"actuate {what}", file=self.out, flush=True)

    def rotate_keys(self, bits: int) -> None:
        self._say(f"rotate-keys {bits}")

    def revoke_all(self) -> None:
        self._say("revoke-all")

    def set_floor(self, n: int) -> None:
        self._say(f"set-floor {n}")

    def failover(self, group: str) -> None:
        self._say(f"failover {group}")

    def thresholds_profile(self, profile: str) -> None:
        self._say(f"thresholds {profile}")


def cmd_asm(args) -> int:
    cfg = load_config(args.config, {"listen": args.listen})
    params = AsmParams.from_config(cfg)
    monitor = Monitor(lam=cfg["monitoring.lambda"], z_max=cfg["monitoring.z_max"], warmup=cfg["monitoring.warmup"])
    hub = SensorHub()
    audit = AuditLog(cfg["audit.file"])
    manager = AdaptationManager(hub, _LoggingActuators(sys.stdout), params=params, audit=audit)

    def on_metric(src: str, e: Envelope) -> None:
        if not e.topic.startswith(METRICS_PREFIX):
            return
        node, _, metric = e.topic[len(METRICS_PREFIX):].partition("/")
        try:
            body = json.loads(e.payload)
            mid = f"{node}.{metric}"
            monitor.record_sample(MetricSample(mid, float(body["value"]), time.time(), node))
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("bad metric sample from %s: %s", src, exc)
            return
        hub.set_anomaly(mid, monitor.scores[mid], time.time())

    async def run():
        host = NodeHost(on_metric)
        addr = await host.serve(*cfg.host_port())
        print("asm listening on %s:%d" % tuple(addr), flush=True)
        steps = 0
        while args.steps is None or steps < args.steps:
            await asyncio.sleep(params.period_s)
            rep = manager.control_step(time.time())
            print(json.dumps(rep.audit_line(), sort_keys=True), flush=True)
            steps += 1
        await host.close()

    asyncio.run(run())
    return EXIT_OK


def _client_node(args) -> tuple[ClientNode, SecurityToken]:
    try:
        tok = SecurityToken.decode(Path(args.token).read_text().strip())
        key = crypto.load_private_pem(Path(args.key).read_bytes())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load client credentials: {exc}") from None
    node = ClientNode(tok.subject, key, "broker", _read_kmf_pub(args.kmf_pub), encrypt=not args.plaintext)
    node.client.add_token(tok)
    return node, tok


def cmd_client(args) -> int:
    node, tok = _client_node(args)
    c = node.client

    async def run() -> int:
        await node.start(args.broker, args.kmf)
        if args.action == "pub":
            messages = args.message or [line.rstrip("\n") for line in sys.stdin]
            for text in messages:
                c.publish(args.topic, text.encode())
            deadline = time.monotonic() + args.timeout
            while c.pending and time.monotonic() < deadline:
                await asyncio.sleep(0.01)
            unconfirmed = len(c.pending)
            print(f"published {len(messages) - unconfirmed}/{len(messages)} on {args.topic}")
            await node.close()
            return EXIT_OK if unconfirmed == 0 else EXIT_FATAL
        got = 0
        done = asyncio.Event()

        def on_message(env, payload):
            nonlocal got
            got += 1
            print(payload.decode("utf-8", "replace"), flush=True)
            if args.count and got >= args.count:
                done.set()

        c.on_message = on_message
        c.subscribe(args.topic)
        try:
            await asyncio.wait_for(done.wait(), args.timeout)
        except asyncio.TimeoutError:
            pass
        await node.close()
        return EXIT_OK

    return asyncio.run(run())


def cmd_scenario(args) -> int:
    sc = load_scenario(args.file)
    if sc["mode"] == "wallclock":
        wl = sc["workload"]
        result = measure_throughput(wl["messages"] or 20_000, wl["payload_bytes"], encrypt=wl["encrypt"])
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "throughput.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
        print(f"{sc['name']}: {result['throughput_mps']:.0f} msg/s over {result['messages']} messages "
              f"({result['machine']['cpus']} cpu, {result['machine']['processor']})")
        return EXIT_OK
    report = run_scenario(sc, args.out)
    if report.failed:
        print(f"{sc['name']}: FAILED: {report.error}", file=sys.stderr)
        return EXIT_FATAL
    print(f"{sc['name']}: delivery_ratio {report.delivery_ratio:.6f}, {report.published} published, "
          f"{len(report.actions)} adaptation actions; report in {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.dir) / "report.json"
    try:
        r = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    print(f"scenario   {r['name']} (seed {r['seed']}){'  FAILED: ' + r['error'] if r.get('failed') else ''}")
    print(f"delivery   {r['delivery_ratio']:.6f} ({r['acked_deliveries']}/{r['expected_deliveries']})")
    print(f"published  {r['published']} at {r['throughput_mps']:.1f} msg/s")
    peak = max((t for _, t in r["threat"]), default=0.0)
    print(f"threat     peak {peak:.3f} over {len(r['threat'])} steps")
    print(f"key leaks  {len(r['key_leaks'])} in {r['frames']} frames")
    print()
    print(f"{'topic':<24}{'published':>10}{'expected':>10}{'acked':>10}{'lost':>8}{'inflight':>10}{'ratio':>10}")
    for topic, row in sorted(r["per_topic"].items()):
        print(f"{topic:<24}{row['published']:>10}{row['expected']:>10}{row['acked']:>10}{row['lost']:>8}"
              f"{row['in_flight']:>10}{row['ratio']:>10.4f}")
    if r["actions"]:
        print()
        print(f"{'ts':>8}  action")
        for a in r["actions"]:
            print(f"{a['ts']:>8.1f}  {a['action']}  ({a['cause']})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gemombus", description="Adaptive secure publish/subscribe middleware.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("broker", help="run an operational broker node")
    b.add_argument("--listen")
    b.add_argument("--config")
    b.add_argument("--node-id")
    b.add_argument("--kmf-pub", help="file holding the KMF public key (base64)")
    b.add_argument("--with-kmf", action="store_true", help="connect to kmf.address for control traffic")
    b.set_defaults(fn=cmd_broker)

    k = sub.add_parser("kmf", help="run the key management service, or provision a principal")
    k.add_argument("--listen")
    k.add_argument("--state", default="kmf-state")
    k.add_argument("--provision", metavar="NAME")
    k.add_argument("--pattern", default="#")
    k.add_argument("--rights", default="publish,subscribe")
    k.add_argument("--strength", type=int, default=3)
    k.add_argument("--ttl", type=float, default=86400.0, help="token lifetime in seconds")
    k.add_argument("--groups")
    k.add_argument("--topic", action="append", help="secure topic to create and grant (repeatable)")
    k.add_argument("--out")
    k.set_defaults(fn=cmd_kmf)

    a = sub.add_parser("asm", help="run the adaptation manager on incoming metric samples")
    a.add_argument("--config")
    a.add_argument("--listen")
    a.add_argument("--steps", type=int)
    a.set_defaults(fn=cmd_asm)

    c = sub.add_parser("client", help="publish or subscribe from the command line")
    c.add_argument("action", choices=("pub", "sub"))
    c.add_argument("--topic", required=True)
    c.add_argument("--token", required=True, help="file holding the encoded token")
    c.add_argument("--key", required=True, help="principal private key (PEM)")
    c.add_argument("--kmf-pub", required=True)
    c.add_argument("--broker", default="127.0.0.1:7400")
    c.add_argument("--kmf", default="127.0.0.1:7500")
    c.add_argument("--message", action="append", help="payload to publish (repeatable; default: stdin lines)")
    c.add_argument("--count", type=int, help="exit after this many received messages")
    c.add_argument("--timeout", type=float, default=30.0)
    c.add_argument("--plaintext", action="store_true", help="do not encrypt payloads")
    c.set_defaults(fn=cmd_client)

    s = sub.add_parser("scenario", help="scenario runs")
    s_sub = s.add_subparsers(dest="scenario_command", required=True)
    run = s_sub.add_parser("run", help="run a scenario file")
    run.add_argument("file")
    run.add_argument("--out", required=True)
    run.set_defaults(fn=cmd_scenario)

    r = sub.add_parser("report", help="print the summary of a finished run")
    r.add_argument("dir")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ScenarioError) as exc:
        problems = getattr(exc, "violations", None) or getattr(exc, "problems", None) or [str(exc)]
        for line in problems:
            print(f"error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, KmfError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.exception("fatal: %s", exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
