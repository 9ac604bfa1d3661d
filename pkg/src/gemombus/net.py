"""Wall-clock transport: components exchanging length-prefixed frames over TCP.

A ``NodeHost`` owns one component's connections.  Inbound connections are
named ``c<n>``; outbound ones take the name the caller gives them (a broker
id, ``"kmf"``), so components address peers exactly as they do in the
simulator.
"""

from __future__ import annotations

import asyncio
import logging
import os
import platform
import time
from typing import Callable, Optional

from . import crypto
from .authz import Authorizer, policy_from_json
from .broker import DEFAULT_GROUP, Broker, GroupInfo, RoutingTable
from .client import Client
from .kmf import Kmf, TokenVerifier
from .wire import DEFAULT_MAX_FRAME, Envelope, FrameReader, FrameTooLarge, ParseError, encode_envelope, parse_body

log = logging.getLogger(__name__)

Handler = Callable[[str, Envelope], None]


class NodeHost:
    def __init__(self, handler: Handler, max_frame: int = DEFAULT_MAX_FRAME):
        self.handler = handler
        self.max_frame = max_frame
        self.conns: dict[str, asyncio.StreamWriter] = {}
        self.tasks: set = set()
        self.parse_errors = 0
        self.server: Optional[asyncio.base_events.Server] = None
        self._n = 0

    async def serve(self, host: str, port: int) -> tuple[str, int]:
        self.server = await asyncio.start_server(self._accept, host, port)
        return self.server.sockets[0].getsockname()[:2]

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._n += 1
        name = f"c{self._n}"
        self.conns[name] = writer
        await self._read_loop(name, reader)

    async def connect(self, name: str, host: str, port: int) -> None:
        reader, writer = await asyncio.open_connection(host, port)
        self.conns[name] = writer
        task = asyncio.get_running_loop().create_task(self._read_loop(name, reader))
        self.tasks.add(task)
        task.add_done_callback(self.tasks.discard)

    async def _read_loop(self, name: str, reader: asyncio.StreamReader) -> None:
        frames = FrameReader(self.max_frame)
        try:
            while True:
                data = await reader.read(1 << 16)
                if not data:
                    break
                for body in frames.feed(data):
                    try:
                        env = parse_body(body)
                    except ParseError as exc:
                        self.parse_errors += 1
                        log.warning("%s: dropping unparseable frame: %s at byte %d", name, exc, exc.offset)
                        continue
                    self.handler(name, env)
        except FrameTooLarge as exc:
            log.warning("%s: closing connection: %s", name, exc)
        except ConnectionError:
            pass
        finally:
            w = self.conns.pop(name, None)
            if w is not None:
                w.close()

    def send(self, dest: str, env: Envelope) -> None:
        w = self.conns.get(dest)
        if w is None or w.is_closing():
            log.debug("no connection to %s; dropping %s", dest, env.id)
            return
        w.write(encode_envelope(env, self.max_frame))

    async def drain(self) -> None:
        for w in list(self.conns.values()):
            if not w.is_closing():
                await w.drain()

    async def close(self) -> None:
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        for w in list(self.conns.values()):
            w.close()
        for t in list(self.tasks):
            t.cancel()


async def every(period: float, fn: Callable[[], None]) -> None:
    while True:
        await asyncio.sleep(period)
        fn()


def single_node_routing(node_id: str) -> RoutingTable:
    return RoutingTable(1, (GroupInfo(DEFAULT_GROUP, ("#",), node_id),))


def wall_clock() -> float:
    return time.time()


def machine_spec() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "cpus": os.cpu_count(),
        "python": platform.python_version(),
        "system": platform.system(),
    }


def _host_port(addr: str) -> tuple[str, int]:
    host, port = addr.rsplit(":", 1)
    return host, int(port)


class BrokerNode:
    """A broker behind a TCP listener, with its redelivery timer."""

    def __init__(self, node_id: str, kmf_public_key: bytes, policy: Optional[dict] = None, kmf_address: Optional[str] = None,
                 **broker_kw):
        self.host = NodeHost(self._handle)
        self.kmf_address = kmf_address
        directory = broker_kw.pop("directory", {})
        authorizer = None
        if policy is not None:
            authorizer = Authorizer(directory)
            authorizer.install(policy_from_json(policy))
        self.broker = Broker(
            node_id,
            verifier=TokenVerifier(kmf_public_key),
            send=self.host.send,
            routing=lambda table=single_node_routing(node_id): table,
            clock=wall_clock,
            authorizer=authorizer,
            kmf_endpoint="kmf" if kmf_address else None,
            **broker_kw,
        )
        self.broker.promote(DEFAULT_GROUP, 1)

    def _handle(self, src: str, e: Envelope) -> None:
        self.broker.handle(src, e)

    async def start(self, listen: str) -> tuple[str, int]:
        addr = await self.host.serve(*_host_port(listen))
        if self.kmf_address:
            await self.host.connect("kmf", *_host_port(self.kmf_address))
        loop = asyncio.get_running_loop()
        self._timer = loop.create_task(every(0.25, self.broker.tick))
        return addr

    async def close(self) -> None:
        self._timer.cancel()
        await self.host.close()


class KmfNode:
    def __init__(self, kmf: Kmf):
        self.kmf = kmf
        self.host = NodeHost(self._handle)

    def _handle(self, src: str, e: Envelope) -> None:
        self.host.send(src, self.kmf.handle(e))

    async def start(self, listen: str) -> tuple[str, int]:
        return await self.host.serve(*_host_port(listen))

    async def close(self) -> None:
        await self.host.close()


class ClientNode:
    """A client connected to one broker and the KMF."""

    def __init__(self, principal: str, private_key, broker_id: str, kmf_public_key: bytes, **client_kw):
        self.host = NodeHost(self._handle)
        self.broker_id = broker_id
        self.client = Client(
            principal,
            private_key,
            send=self.host.send,
            routing=lambda table=single_node_routing(broker_id): table,
            clock=wall_clock,
            kmf_public_key=kmf_public_key,
            **client_kw,
        )

    def _handle(self, src: str, e: Envelope) -> None:
        self.client.handle(src, e)

    async def start(self, broker_address: str, kmf_address: str) -> None:
        await self.host.connect(self.broker_id, *_host_port(broker_address))
        await self.host.connect("kmf", *_host_port(kmf_address))
        loop = asyncio.get_running_loop()
        self.client.tick()
        self._timer = loop.create_task(every(0.5, self.client.tick))

    async def close(self) -> None:
        self._timer.cancel()
        await self.host.close()


async def _wait_for(cond: Callable[[], bool], timeout: float, what: str) -> None:
    deadline = time.monotonic() + timeout
    while not cond():
        if time.monotonic() > deadline:
            raise TimeoutError(f"timed out waiting for {what}")
        await asyncio.sleep(0.005)


async def _throughput(messages: int, payload_bytes: int, window: int, encrypt: bool, timeout: float) -> dict:
    kmf = Kmf("kmf", clock=lambda: time.time() * 1000.0)
    keys = {}
    for name in ("owner", "pub", "sub"):
        keys[name] = crypto.generate_keypair()
        kmf.register_principal(name, crypto.public_bytes(keys[name]), ("clients",))
    topic = "bench/t0"
    kmf.register_secure_topic(topic, "owner")
    kmf.grant(topic, "group:clients")
    kmf_node = KmfNode(kmf)
    kmf_addr = "%s:%d" % await kmf_node.start("127.0.0.1:0")
    broker = BrokerNode("b1", kmf.public_key)
    broker_addr = "%s:%d" % await broker.start("127.0.0.1:0")
    pub = ClientNode("pub", keys["pub"], "b1", kmf.public_key, encrypt=encrypt)
    sub = ClientNode("sub", keys["sub"], "b1", kmf.public_key, encrypt=encrypt)
    pub.client.add_token(kmf.issue_token("pub", topic, ["publish"], 3, 3_600_000))
    sub.client.add_token(kmf.issue_token("sub", topic, ["subscribe"], 3, 3_600_000))
    await pub.start(broker_addr, kmf_addr)
    await sub.start(broker_addr, kmf_addr)
    received = 0

    def on_message(env, payload):
        nonlocal received
        received += 1

    sub.client.on_message = on_message
    s = sub.client.subscribe(topic)
    await _wait_for(lambda: bool(s.sub_id), timeout, "subscription")
    payload = os.urandom(payload_bytes)
    # warm the key cache so the timed run measures steady state
    pub.client.publish(topic, payload)
    await _wait_for(lambda: received >= 1 and not pub.client.pending, timeout, "warm-up message")
    received = 0
    t0 = time.perf_counter()
    sent = 0
    while sent < messages:
        if len(pub.client.pending) >= window:
            await asyncio.sleep(0)
            continue
        burst = min(window - len(pub.client.pending), messages - sent, 64)
        for _ in range(burst):
            pub.client.publish(topic, payload)
        sent += burst
        await pub.host.drain()
    await _wait_for(lambda: received >= messages, timeout, "delivery of every message")
    elapsed = time.perf_counter() - t0
    for node in (pub, sub, broker, kmf_node):
        await node.close()
    return {
        "messages": messages,
        "payload_bytes": payload_bytes,
        "encrypt": encrypt,
        "seconds": elapsed,
        "throughput_mps": messages / elapsed,
        "machine": machine_spec(),
    }


def measure_throughput(messages: int = 20_000, payload_bytes: int = 512, window: int = 2000, encrypt: bool = True,
                       timeout: float = 300.0) -> dict:
    """Publish ``messages`` through a loopback broker and time end-to-end delivery."""
    return asyncio.run(_throughput(messages, payload_bytes, window, encrypt, timeout))
