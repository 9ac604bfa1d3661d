import random

import pytest
from hypothesis import HealthCheck, settings

from gemombus import crypto
from gemombus.broker import Broker, GroupInfo, RoutingTable
from gemombus.client import Client
from gemombus.kmf import Kmf, TokenVerifier
from gemombus.sim import Network, Sim

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class Bus:
    """A handful of brokers, clients and a KMF on the simulated network."""

    def __init__(self, nodes=("b1",), mirrors=(), pseudonym_secret=None, seed=0):
        self.sim = Sim()
        self.rng = random.Random(seed)
        self.net = Network(self.sim, 0.001, None, self.rng)
        self.kmf = Kmf("kmf", clock=lambda: self.sim.now * 1000.0, rng=self.rng)
        self.net.attach("kmf", lambda src, e: self.net.send("kmf", src, self.kmf.handle(e)))
        self.table = RoutingTable(1, (GroupInfo("default", ("#",), nodes[0], tuple(mirrors)),))
        self.pseudonym_secret = pseudonym_secret
        self.brokers = {}
        self.evidence = []
        for nid in nodes + tuple(mirrors):
            self.add_broker(nid)
        self.brokers[nodes[0]].promote("default", 1)
        self.clients = {}

    def add_broker(self, nid):
        peers = lambda nid=nid: [b for b in self.brokers if b != nid]
        b = Broker(
            nid,
            verifier=TokenVerifier(self.kmf.public_key),
            send=lambda dst, e, nid=nid: self.net.send(nid, dst, e),
            routing=lambda: self.table,
            clock=lambda: self.sim.now,
            kmf_endpoint="kmf",
            peers=peers,
            pseudonym_secret=self.pseudonym_secret,
            evidence=lambda entity, outcome: self.evidence.append((entity, outcome)),
            rng=self.rng,
        )
        self.brokers[nid] = b
        self.net.attach(nid, b.handle)
        return b

    def client(self, name, pattern="app/#", rights=("publish", "subscribe"), strength=3, ttl_ms=3_600_000,
               groups=("clients",), **kw):
        key = crypto.generate_keypair()
        if name not in self.kmf.principals:
            self.kmf.register_principal(name, crypto.public_bytes(key), groups)
        c = Client(name, key, send=lambda dst, e: self.net.send(name, dst, e), routing=lambda: self.table,
                   clock=lambda: self.sim.now, kmf_public_key=self.kmf.public_key,
                   pseudonym_secret=self.pseudonym_secret, rng=self.rng, **kw)
        c.add_token(self.kmf.issue_token(name, pattern, rights, strength, ttl_ms))
        self.net.attach(name, c.handle)
        self.clients[name] = c
        return c

    def secure(self, topic, owner, *members):
        if owner not in self.kmf.principals:
            self.kmf.register_principal(owner, crypto.public_bytes(crypto.generate_keypair()))
        self.kmf.register_secure_topic(topic, owner)
        if members:
            self.kmf.grant(topic, *members)

    def run(self, seconds=1.0, tick=0.1):
        end = self.sim.now + seconds
        while self.sim.now < end:
            self.sim.run(min(self.sim.now + tick, end))
            for b in self.brokers.values():
                b.tick()
            for c in self.clients.values():
                c.tick()


@pytest.fixture
def bus():
    return Bus()
