"""Simulated replicas: an honest node and the Byzantine strategies.

A faulty node runs the normal protocol engine and then reshapes what it
sends, so every strategy only ever affects that node's outgoing traffic.
"""

from __future__ import annotations

import functools
import random

from ..crypto import KeyDirectory, SigningKey
from ..dag import Message
from ..db import THIS_HASH, BECReplica, Schema, TupleTriple, UpdateSet
from ..errors import StaleDelete, UnsafeUpdate
from ..sync import BroadcastConfig, Connection, Outgoing, Phase, Replica
from ..bloom import BloomFilter
from ..wire import Heads, HeadsV2, Msgs
from .config import ScenarioConfig, Strategy, Workload

SCHEMA_TEXT = """
relation events origin:str seq:int payload:bytes
relation accounts owner:str balance:int
relation items id:str name:str
relation orders item:str qty:int
check orders qty > 0
nonnegative accounts balance
foreign_key orders item -> items id
unique items id hash_derived
view n_items count items
"""


@functools.lru_cache(maxsize=1)
def workload_schema() -> Schema:
    # Shared by every simulated replica so safety verdicts are computed once.
    return Schema.parse(SCHEMA_TEXT)


class Node:
    strategy = Strategy.HONEST

    def __init__(self, index: int, key: SigningKey, directory: KeyDirectory, cfg: ScenarioConfig, rng: random.Random):
        self.index = index
        self.key = key
        self.id = key.replica
        self.name = key.replica.display_name
        self.cfg = cfg
        self.rng = rng
        self.crashed = False
        self.seq = 0
        self.broadcasts: list[Message] = []
        bc = BroadcastConfig(
            protocol=cfg.protocol,
            eager_send=cfg.eager_send,
            eager_relay=cfg.eager_relay,
            bloom_bits=cfg.bloom_bits,
            bloom_hashes=cfg.bloom_hashes,
            check_signatures=cfg.check_signatures,
        )
        self.personas = [
            BECReplica(Replica(key, directory, bc), workload_schema(), cfg.check_causality)
            for _ in range(self.n_personas)
        ]

    n_personas = 1

    @property
    def correct(self) -> bool:
        return self.strategy is Strategy.HONEST

    @property
    def bec(self) -> BECReplica:
        return self.personas[0]

    @property
    def replica(self) -> Replica:
        return self.personas[0].replica

    def persona(self, peer: "Node") -> BECReplica:
        return self.personas[0]

    # -- protocol plumbing ---------------------------------------------

    def start(self, peer: "Node") -> list[Outgoing]:
        _, wire = self.persona(peer).replica.connect(peer.id)
        return self.shape([Outgoing(peer.id, wire)])

    def receive(self, peer: "Node", wire) -> list[Outgoing]:
        return self.shape(self.persona(peer).replica.on_wire(peer.id, wire))

    def connection(self, peer: "Node") -> Connection | None:
        return self.persona(peer).replica.connections.get(peer.id)

    def phase(self, peer: "Node") -> Phase | None:
        c = self.connection(peer)
        return c.phase if c is not None else None

    def abort(self, peer: "Node") -> None:
        self.persona(peer).replica.abort(peer.id)

    def close(self, peer: "Node") -> None:
        self.persona(peer).replica.close(peer.id)

    def crash(self) -> None:
        for p in self.personas:
            p.replica.crash()

    def shape(self, outs: list[Outgoing]) -> list[Outgoing]:
        return outs

    # -- workload ------------------------------------------------------

    def update(self) -> list[Outgoing]:
        self.seq += 1
        return self.shape(self._commit(self.bec, self._honest_tx(self.bec)))

    def _commit(self, bec: BECReplica, tx) -> list[Outgoing]:
        try:
            m, outs = bec.commit(tx)
        except (UnsafeUpdate, StaleDelete):
            m, outs = bec.commit(self._event_tx(bec))
        self.broadcasts.append(m)
        return outs

    def _event_tx(self, bec: BECReplica, tag: str = ""):
        payload = self.rng.randbytes(self.cfg.costs.update_bytes)
        return bec.transaction().insert("events", self.name + tag, self.seq, payload)

    def _honest_tx(self, bec: BECReplica):
        if self.cfg.workload is Workload.EVENTS:
            return self._event_tx(bec)
        rng = self.rng
        tx = bec.transaction()
        roll = rng.random()
        if roll < 0.2:
            return tx.insert("accounts", f"{self.name}-{self.seq}", rng.randint(0, 100))
        if roll < 0.4:
            mine = sorted(x for x in tx.read("accounts") if x[1][0].startswith(self.name + "-"))
            if mine:
                h, t = rng.choice(mine)
                return tx.update(h, "accounts", t, balance=t[1] + rng.randint(1, 50))
        elif roll < 0.6:
            return tx.insert("items", THIS_HASH, f"item {self.name}-{self.seq}")
        elif roll < 0.8:
            items = sorted(tx.read("items"))
            if items:
                _, t = rng.choice(items)
                return tx.insert("orders", t[0], rng.randint(1, 5))
        return self._event_tx(bec)


class Equivocator(Node):
    """Shows one history to even-numbered peers and another to odd ones."""

    strategy = Strategy.EQUIVOCATOR
    n_personas = 2

    def persona(self, peer: "Node") -> BECReplica:
        return self.personas[peer.index % 2]

    def update(self) -> list[Outgoing]:
        self.seq += 1
        outs = []
        for i, bec in enumerate(self.personas):
            outs += self._commit(bec, self._event_tx(bec, tag=f"/{i}"))
        return outs


class DanglingHasher(Node):
    """Advertises heads and predecessors that resolve to nothing."""

    strategy = Strategy.DANGLING_HASHER

    def shape(self, outs):
        shaped = []
        for o in outs:
            w = o.wire
            fake = frozenset(self.rng.randbytes(32) for _ in range(self.rng.randint(1, 3)))
            if isinstance(w, Heads):
                w = Heads(w.hs | fake)
            elif isinstance(w, HeadsV2):
                w = HeadsV2(w.hs | fake, w.old_heads, w.filter)
            elif isinstance(w, Msgs):
                poison = Message.create(self.key, b"poison", fake)
                w = Msgs(w.msgs | {poison})
            shaped.append(Outgoing(o.peer, w))
        return shaped


class BloomCorruptor(Node):
    strategy = Strategy.BLOOM_CORRUPTOR

    def shape(self, outs):
        shaped = []
        for o in outs:
            w = o.wire
            if isinstance(w, HeadsV2):
                roll = self.rng.randrange(3)
                m = 8 * self.rng.randint(1, 64)
                if roll == 0:
                    bad = BloomFilter(b"\xff" * (m // 8), self.rng.randint(1, 10), m)
                elif roll == 1:
                    bad = BloomFilter(self.rng.randbytes(m // 8), self.rng.randint(1, 10), m)
                else:
                    bad = None
                w = HeadsV2(w.hs, w.old_heads, bad)
            shaped.append(Outgoing(o.peer, w))
        return shaped


class HeadsOmitter(Node):
    strategy = Strategy.HEADS_OMITTER

    def shape(self, outs):
        shaped = []
        for o in outs:
            w = o.wire
            if isinstance(w, (Heads, HeadsV2)):
                keep = frozenset(h for h in sorted(w.hs) if self.rng.random() < 0.5)
                w = Heads(keep) if isinstance(w, Heads) else HeadsV2(keep, w.old_heads, w.filter)
            shaped.append(Outgoing(o.peer, w))
        return shaped


class SignatureForger(Node):
    """Ships messages with broken signatures or signed by an outsider key."""

    strategy = Strategy.SIGNATURE_FORGER

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.outsider = SigningKey.from_seed(b"outsider:" + self.id.public_key, "outsider")

    def shape(self, outs):
        shaped = []
        for o in outs:
            w = o.wire
            if isinstance(w, Msgs):
                msgs = set()
                for m in sorted(w.msgs):
                    if self.rng.random() < 0.5:
                        sig = bytearray(m.sig)
                        sig[self.rng.randrange(len(sig))] ^= 1 << self.rng.randrange(8)
                        m = Message.build(m.value, m.hs, bytes(sig))
                    msgs.add(m)
                    hs = m.hs
                msgs.add(Message.create(self.outsider, b"forged", hs if w.msgs else ()))
                w = Msgs(frozenset(msgs))
            shaped.append(Outgoing(o.peer, w))
        return shaped


class Silent(Node):
    """Opens connections, then never answers."""

    strategy = Strategy.SILENT

    def receive(self, peer, wire):
        self.persona(peer).replica.on_wire(peer.id, wire)
        return []


class UnsafeUpdater(Node):
    """Broadcasts updates that break invariants if anyone applied them."""

    strategy = Strategy.UNSAFE_UPDATER

    def update(self) -> list[Outgoing]:
        self.seq += 1
        bec = self.bec
        rng = self.rng
        state = bec.state
        accounts = sorted(state.query("accounts"))
        items = sorted(state.query("items"))
        choice = rng.randrange(10)
        u = None
        if choice == 0 and items:
            h, t = rng.choice(items)
            u = UpdateSet.of(dels=[TupleTriple(h, "items", t)])
        elif choice == 1:
            u = UpdateSet.of(ins=[("items", (f"chosen-{self.seq % 3}", "dup"))])
        elif choice == 2 and accounts:
            h, t = rng.choice(accounts)
            u = UpdateSet.of(ins=[("accounts", (t[0], t[1] - rng.randint(1, 500)))], dels=[TupleTriple(h, "accounts", t)])
        elif choice == 3 and accounts:
            h, t = rng.choice(accounts)
            u = UpdateSet.of(dels=[TupleTriple(h, "accounts", t)])
        elif choice == 4:
            u = UpdateSet.of(ins=[("accounts", (f"{self.name}-neg", -rng.randint(1, 99)))])
        elif choice == 5:
            u = UpdateSet.of(ins=[("orders", (f"no-such-item-{self.seq}", 1))])
        elif choice == 6 and items:
            u = UpdateSet.of(ins=[("orders", (rng.choice(items)[1][0], 0))])
        elif choice == 7:
            u = UpdateSet.of(ins=[("n_items", (999,))])
        elif choice == 8:
            return self._concurrent_delete()
        if u is None:
            self.broadcasts.append(bec.replica.broadcast(rng.randbytes(rng.randint(0, 40)))[0])
            return []
        m, outs = bec.replica.broadcast(u.encode())
        self.broadcasts.append(m)
        return outs

    def _concurrent_delete(self) -> list[Outgoing]:
        """Insert a tuple and, concurrently, a message deleting it."""
        replica = self.replica
        with replica.store.lock:
            before = replica.store.heads()
        ins, outs = replica.broadcast(UpdateSet.of(ins=[("accounts", (f"{self.name}-c{self.seq}", 5))]).encode())
        t = TupleTriple(ins.id, "accounts", (f"{self.name}-c{self.seq}", 5))
        u = UpdateSet.of(ins=[("accounts", (t.tuple[0], 6))], dels=[t])
        dele = Message.create(self.key, u.encode(), before)
        with replica.store.lock:
            replica.store.insert_batch([dele])
            replica._deliver([dele])
        self.broadcasts += [ins, dele]
        return outs


NODE_TYPES = {
    cls.strategy: cls
    for cls in (Node, Equivocator, DanglingHasher, BloomCorruptor, HeadsOmitter, SignatureForger, Silent, UnsafeUpdater)
}


def make_node(strategy: Strategy, *args, **kw) -> Node:
    return NODE_TYPES[Strategy(strategy)](*args, **kw)
