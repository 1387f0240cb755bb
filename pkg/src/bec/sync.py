"""Byzantine causal broadcast: broadcast plus per-connection reconciliation.

The engine is sans-IO. Every entry point returns the wire messages it wants
sent as ``Outgoing(peer, wire)`` pairs and leaves transport to the caller,
which may be the deterministic simulator or one thread per connection.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple

from .bloom import make_bloom
from .crypto import Hash, KeyDirectory, ReplicaId, SigningKey
from .dag import DagView, Message, MessageStore, StoreSnapshot
from .wire import Heads, HeadsV2, Msgs, Needs, WireMessage

log = logging.getLogger(__name__)


class Protocol(str, enum.Enum):
    BASIC = "basic"
    BLOOM = "bloom"


class Phase(enum.Enum):
    ACTIVE = "active"
    COMPLETE = "complete"
    ABORTED = "aborted"


@dataclass
class BroadcastConfig:
    protocol: Protocol = Protocol.BLOOM
    eager_send: bool = False
    eager_relay: bool = False
    bloom_bits: int = 10
    bloom_hashes: int = 7
    # Only ever switched off to prove the trace checker notices forgeries.
    check_signatures: bool = True

    def __post_init__(self):
        self.protocol = Protocol(self.protocol)


class Outgoing(NamedTuple):
    peer: ReplicaId
    wire: WireMessage


@dataclass
class Connection:
    peer: ReplicaId
    snapshot: StoreSnapshot
    conn_id: int = 0
    sent: set = field(default_factory=set)
    recvd: dict = field(default_factory=dict)
    missing: set = field(default_factory=set)
    # Predecessor hashes of recvd messages that neither recvd nor the
    # snapshot resolve; kept incrementally since recvd only grows.
    unresolved: set = field(default_factory=set)
    # (old heads, messages_since) computed when this side opened.
    since: tuple | None = None
    phase: Phase = Phase.ACTIVE
    violations: list = field(default_factory=list)
    delivered: list = field(default_factory=list)

    def violation(self, what: str) -> None:
        log.debug("protocol violation from %s: %s", self.peer, what)
        self.violations.append(what)


class PeerHeadsStore:
    """Heads agreed at the end of the last reconciliation with each peer."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._heads: dict[bytes, frozenset] = {}
        if self.path is not None and self.path.exists():
            raw = json.loads(self.path.read_text())
            self._heads = {bytes.fromhex(k): frozenset(bytes.fromhex(h) for h in v) for k, v in raw.items()}

    def load(self, peer: ReplicaId) -> frozenset:
        return self._heads.get(peer.public_key, frozenset())

    def store(self, peer: ReplicaId, heads: Iterable[Hash]) -> None:
        self._heads[peer.public_key] = frozenset(heads)
        if self.path is not None:
            data = {k.hex(): sorted(h.hex() for h in v) for k, v in self._heads.items()}
            self.path.write_text(json.dumps(data, sort_keys=True))


Listener = Callable[[Message, "Replica"], None]


class Replica:
    """One participant in Byzantine causal broadcast."""

    def __init__(
        self,
        key: SigningKey,
        directory: KeyDirectory,
        config: BroadcastConfig | None = None,
        store: MessageStore | None = None,
        peer_heads: PeerHeadsStore | None = None,
    ):
        self.key = key
        self.id = key.replica
        self.directory = directory
        self.config = config or BroadcastConfig()
        self.store = store if store is not None else MessageStore()
        self.peer_heads = peer_heads if peer_heads is not None else PeerHeadsStore()
        self.connections: dict[ReplicaId, Connection] = {}
        self.delivered: list[Message] = []
        self._listeners: list[Listener] = []
        self._conn_lock = threading.Lock()
        self._next_conn = 0

    def __repr__(self) -> str:
        return f"Replica({self.id})"

    def add_listener(self, fn: Listener) -> None:
        self._listeners.append(fn)

    def _deliver(self, msgs: list[Message]) -> None:
        # Caller holds the store lock.
        for m in msgs:
            self.delivered.append(m)
            for fn in self._listeners:
                fn(m, self)

    def broadcast(self, value: bytes) -> tuple[Message, list[Outgoing]]:
        with self.store.lock:
            m = Message.create(self.key, value, self.store.heads())
            self.directory.record_signature(m.payload, m.sig, self.id)
            self.store.insert_batch([m])
            self._deliver([m])
        out = []
        if self.config.eager_send:
            out = [Outgoing(c.peer, Msgs(frozenset([m]))) for c in self._active()]
        return m, out

    def _active(self) -> list[Connection]:
        with self._conn_lock:
            return [c for c in self.connections.values() if c.phase is Phase.ACTIVE]

    def connect(self, peer: ReplicaId) -> tuple[Connection, WireMessage]:
        """Open a reconciliation with ``peer`` and return the opening message."""
        with self._conn_lock:
            old = self.connections.get(peer)
            if old is not None and old.phase is Phase.ACTIVE:
                raise RuntimeError(f"{self.id} already reconciling with {peer}")
            self._next_conn += 1
            conn = Connection(peer, self.store.snapshot(), self._next_conn)
            self.connections[peer] = conn
        snap = conn.snapshot
        if self.config.protocol is Protocol.BASIC:
            return conn, Heads(frozenset(snap.heads()))
        old_heads = self.peer_heads.load(peer)
        since = snap.messages_since(old_heads)
        conn.since = (old_heads, since)
        bloom = make_bloom(since, self.config.bloom_bits, self.config.bloom_hashes)
        return conn, HeadsV2(frozenset(snap.heads()), old_heads, bloom)

    def abort(self, peer: ReplicaId) -> None:
        with self._conn_lock:
            conn = self.connections.pop(peer, None)
        if conn is not None and conn.phase is Phase.ACTIVE:
            conn.phase = Phase.ABORTED

    def close(self, peer: ReplicaId) -> Connection | None:
        with self._conn_lock:
            return self.connections.pop(peer, None)

    def crash(self) -> None:
        """Forget all connection-local state; the store survives."""
        with self._conn_lock:
            conns = list(self.connections.values())
            self.connections.clear()
        for c in conns:
            if c.phase is Phase.ACTIVE:
                c.phase = Phase.ABORTED

    def on_wire(self, peer: ReplicaId, msg: WireMessage) -> list[Outgoing]:
        conn = self.connections.get(peer)
        if conn is None or conn.phase is Phase.ABORTED:
            return []
        if isinstance(msg, Needs):
            return self._on_needs(conn, msg)
        if conn.phase is not Phase.ACTIVE:
            return []
        if isinstance(msg, HeadsV2):
            return self._on_heads_v2(conn, msg)
        if isinstance(msg, Heads):
            return self._handle_missing(conn, self._unknown(conn.snapshot, msg.hs))
        if isinstance(msg, Msgs):
            return self._on_msgs(conn, msg)
        conn.violation(f"unexpected wire message {type(msg).__name__}")
        return []

    @staticmethod
    def _unknown(snap: DagView, hs: Iterable[Hash]) -> set[Hash]:
        return {h for h in hs if not snap.knows(h)}

    def _on_heads_v2(self, conn: Connection, msg: HeadsV2) -> list[Outgoing]:
        snap = conn.snapshot
        if conn.since is not None and conn.since[0] == msg.old_heads:
            since = conn.since[1]
        else:
            since = snap.messages_since(msg.old_heads)
        if msg.filter is None:
            conn.violation("undecodable bloom filter")
            negative = {m.id for m in since}
        else:
            negative = {m.id for m in since if m.id not in msg.filter}
        reply_ids = (negative | snap.succ_star_many(negative)) - conn.sent
        out = []
        if reply_ids:
            conn.sent |= reply_ids
            out.append(Outgoing(conn.peer, Msgs(frozenset(snap[h] for h in reply_ids))))
        out += self._handle_missing(conn, self._unknown(snap, msg.hs))
        return out

    def _on_msgs(self, conn: Connection, msg: Msgs) -> list[Outgoing]:
        if msg.undecodable:
            conn.violation(f"{msg.undecodable} undecodable messages")
        for m in msg.msgs:
            if m.id in conn.recvd:
                continue
            if self.config.check_signatures and m.sender(self.directory) is None:
                conn.violation(f"bad signature on {m.short()}")
                continue
            conn.recvd[m.id] = m
            conn.unresolved.discard(m.id)
            conn.unresolved.update(h for h in m.hs if h not in conn.recvd and not conn.snapshot.knows(h))
        return self._handle_missing(conn, conn.unresolved)

    def _on_needs(self, conn: Connection, msg: Needs) -> list[Outgoing]:
        snap = conn.snapshot
        unknown = [h for h in msg.hashes if h not in snap]
        if unknown:
            conn.violation(f"needs {len(unknown)} hashes not in snapshot")
        reply = {h for h in msg.hashes if h in snap} - conn.sent
        conn.sent |= reply
        return [Outgoing(conn.peer, Msgs(frozenset(snap[h] for h in reply)))]

    def _handle_missing(self, conn: Connection, hashes: set[Hash]) -> list[Outgoing]:
        have = conn.recvd
        conn.missing = {h for h in conn.missing | hashes if h not in have}
        if conn.missing:
            return [Outgoing(conn.peer, Needs(frozenset(conn.missing)))]
        recvd = list(conn.recvd.values())
        with self.store.lock:
            new = self.store.insert_batch(recvd)
            self._deliver(new)
            self.peer_heads.store(conn.peer, heads_with(conn.snapshot, recvd))
            conn.delivered = new
            conn.phase = Phase.COMPLETE
        out = []
        if self.config.eager_relay and new:
            relay = frozenset(new)
            out = [Outgoing(c.peer, Msgs(relay)) for c in self._active() if c is not conn]
        return out


def heads_with(snap: DagView, extra: Iterable[Message]) -> frozenset:
    """heads(snap ∪ extra) without materialising the union."""
    extra = list(extra)
    referenced = {h for m in extra for h in m.hs}
    cand = set(snap.heads()) | {m.id for m in extra if m.id not in snap}
    return frozenset(cand - referenced)


def start_reconciliation(replica: Replica, peer: ReplicaId) -> WireMessage:
    return replica.connect(peer)[1]
