"""Deterministic discrete-event simulation of a replica network."""

from __future__ import annotations

import csv
import heapq
import io
import logging
import math
import random
from dataclasses import dataclass, field
from statistics import mean
from typing import Any

from ..crypto import ReplicaId, make_keys
from ..dag import Message
from ..sync import Phase
from ..wire import Msgs
from .config import ScenarioConfig
from .costs import cost_of, optimal_cost
from .nodes import Node, make_node

log = logging.getLogger(__name__)


@dataclass
class ReconRecord:
    rid: int
    pair: tuple[int, int]
    start: int
    latency: int
    started: bool = True
    bytes_sent: int = 0
    wires: int = 0
    done: dict = field(default_factory=dict)  # node index -> completion time
    delivered: dict = field(default_factory=dict)  # node index -> list of Message
    redundant: int = 0  # messages shipped that the receiver already had
    violations: dict = field(default_factory=dict)
    end: int | None = None
    aborted: str = ""
    in_flight: int = 0
    optimal_bytes: int = 0
    # (node index, hash) -> time the hash first showed up as missing
    missing_since: dict = field(default_factory=dict, repr=False)

    @property
    def completed(self) -> bool:
        return self.started and not self.aborted and len(self.done) == 2

    @property
    def round_trips(self) -> int:
        if not self.done:
            return 0
        return math.ceil((max(self.done.values()) - self.start) / (2 * self.latency))

    @property
    def new_messages(self) -> int:
        return sum(len(v) for v in self.delivered.values())


@dataclass
class ReconStats:
    records: list

    def completed(self) -> list[ReconRecord]:
        return [r for r in self.records if r.completed]

    def mean_round_trips(self) -> float:
        done = self.completed()
        return mean(r.round_trips for r in done) if done else 0.0

    def round_trip_distribution(self) -> dict[int, float]:
        done = self.completed()
        out: dict[int, float] = {}
        for r in done:
            out[r.round_trips] = out.get(r.round_trips, 0) + 1
        return {k: v / len(done) for k, v in sorted(out.items())}

    def mean_bytes(self) -> float:
        done = self.completed()
        return mean(r.bytes_sent for r in done) if done else 0.0

    def mean_optimal_bytes(self) -> float:
        done = self.completed()
        return mean(r.optimal_bytes for r in done) if done else 0.0

    def to_csv(self, names: list[str]) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "round_trips", "bytes", "new_msgs", "completed"])
        for r in self.records:
            a, b = r.pair
            w.writerow([f"{names[a]}-{names[b]}", r.round_trips, r.bytes_sent, r.new_messages, int(r.completed)])
        return buf.getvalue()


@dataclass
class SimResult:
    config: ScenarioConfig
    nodes: list
    stats: ReconStats
    # Oracle sets captured when faulty replicas were cut off.
    quiesce_oracle: dict | None = None
    invariant_violations: list = field(default_factory=list)
    decisions: dict = field(default_factory=dict)  # node index -> {msg id: applied}
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def correct_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.correct]

    def store_ids(self, i: int) -> frozenset:
        return frozenset(self.nodes[i].replica.store.ids())

    def fingerprint(self) -> bytes:
        """Digest of stats and every replica's state; equal runs give equal bytes."""
        from ..crypto import hash_bytes

        parts = [self.stats.to_csv(self.names).encode()]
        for n in self.nodes:
            for p in n.personas:
                parts.append(b"".join(sorted(p.replica.store.ids())))
                parts.append(b"".join(m.id for m in p.replica.delivered))
                parts.append(p.state.canonical())
        return hash_bytes(b"\x00".join(parts))


class Simulator:
    def __init__(self, cfg: ScenarioConfig):
        cfg.validate()
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        names = [f"r{i}" for i in range(cfg.replicas)]
        keys, self.directory = make_keys(names, seed=cfg.seed)
        self.nodes: list[Node] = [
            make_node(
                cfg.adversaries.get(i, "honest"),
                i,
                keys[i],
                self.directory,
                cfg,
                random.Random(self.rng.getrandbits(64)),
            )
            for i in range(cfg.replicas)
        ]
        self.by_id: dict[ReplicaId, int] = {n.id: n.index for n in self.nodes}
        self.now = 0
        self._queue: list = []
        self._ctr = 0
        self.records: list[ReconRecord] = []
        self.open: dict[tuple[int, int], ReconRecord] = {}
        self.isolated = False
        self.result = SimResult(cfg, self.nodes, ReconStats(self.records))
        for n in self.nodes:
            if n.correct:
                n.replica.add_listener(self._watch(n))

    def _watch(self, node: Node):
        state = node.bec.state
        decisions = self.result.decisions.setdefault(node.index, {})
        check = self.cfg.check_invariants

        def on_deliver(m: Message, replica) -> None:
            decisions[m.id] = m.id not in state.ignored
            if check:
                for inv in state.violated():
                    self.result.invariant_violations.append((node.index, m.id, inv))

        return on_deliver

    def schedule(self, t: int, kind: str, *args) -> None:
        self._ctr += 1
        heapq.heappush(self._queue, (t, self._ctr, kind, args))

    def run(self) -> SimResult:
        cfg = self.cfg
        edges = cfg.edges()
        ilen = cfg.interval_length()
        total = cfg.intervals * ilen
        if cfg.updates_per_interval:
            for n in self.nodes:
                phase = self.rng.random()
                count = cfg.updates_per_interval * cfg.intervals
                for k in range(count):
                    self.schedule(int((k + phase) * ilen / cfg.updates_per_interval), "update", n.index)
        for r in range(cfg.intervals):
            for e, (a, b) in enumerate(edges):
                self.schedule(r * ilen + e * cfg.slot + cfg.slot // 2, "recon", a, b)
        if cfg.quiesce_rounds:
            self.schedule(total, "isolate")
            for r in range(cfg.quiesce_rounds):
                for e, (a, b) in enumerate(edges):
                    if cfg.is_correct(a) and cfg.is_correct(b):
                        self.schedule(total + r * ilen + e * cfg.slot + cfg.slot // 2, "recon", a, b)
        for t, i, down in cfg.crashes:
            self.schedule(t, "crash", i)
            self.schedule(t + down, "recover", i)
        while self._queue:
            t, _, kind, args = heapq.heappop(self._queue)
            self.now = t
            getattr(self, "_ev_" + kind)(*args)
        for rec in list(self.open.values()):
            self._finish(rec, "run ended")
        return self.result

    # -- events --------------------------------------------------------

    def _ev_update(self, i: int) -> None:
        node = self.nodes[i]
        if node.crashed or (self.isolated and not node.correct):
            return
        self._route(i, node.update())

    def _ev_recon(self, a: int, b: int) -> None:
        rec = ReconRecord(len(self.records), (a, b), self.now, self.cfg.link(a, b))
        self.records.append(rec)
        na, nb = self.nodes[a], self.nodes[b]
        if na.crashed or nb.crashed or (a, b) in self.open:
            rec.started = False
            rec.aborted = "peer unavailable" if (na.crashed or nb.crashed) else "previous reconciliation still open"
            return
        if self.isolated and not (na.correct and nb.correct):
            rec.started = False
            rec.aborted = "faulty replica isolated"
            return
        self.open[(a, b)] = rec
        self.schedule(self.now + self.cfg.timeout_intervals * self.cfg.interval_length(), "timeout", rec.rid)
        self._route(a, na.start(nb))
        self._route(b, nb.start(na))

    def _ev_wire(self, rid: int, src: int, dst: int, wire) -> None:
        rec = self.records[rid]
        rec.in_flight -= 1
        if rec.end is not None:
            return
        node, peer = self.nodes[dst], self.nodes[src]
        conn = node.connection(peer)
        if isinstance(wire, Msgs) and conn is not None:
            rec.redundant += sum(1 for m in wire.msgs if m.id in conn.snapshot)
        outs = node.receive(peer, wire)
        if dst not in rec.done and node.phase(peer) is Phase.COMPLETE:
            rec.done[dst] = self.now
            rec.delivered[dst] = list(conn.delivered) if conn is not None else []
        self._route(dst, outs)
        if conn is not None and self._stalled(rec, dst, conn.missing):
            self._finish(rec, f"{peer.name} never supplied requested messages")
            return
        self._maybe_close(rec)

    def _stalled(self, rec: ReconRecord, i: int, missing) -> bool:
        limit = self.cfg.stall_round_trips * 2 * rec.latency
        for h in missing:
            first = rec.missing_since.setdefault((i, h), self.now)
            if self.now - first > limit:
                return True
        return False

    def _ev_timeout(self, rid: int) -> None:
        rec = self.records[rid]
        if rec.end is None:
            self._finish(rec, "timeout")

    def _ev_crash(self, i: int) -> None:
        node = self.nodes[i]
        node.crashed = True
        node.crash()
        for pair, rec in list(self.open.items()):
            if i in pair:
                self._finish(rec, f"{node.name} crashed")

    def _ev_recover(self, i: int) -> None:
        self.nodes[i].crashed = False

    def _ev_isolate(self) -> None:
        self.isolated = True
        for pair, rec in list(self.open.items()):
            if not all(self.nodes[i].correct for i in pair):
                self._finish(rec, "faulty replica isolated")
        self.result.quiesce_oracle = oracle_full_exchange(self.nodes, self.cfg.edges())

    # -- plumbing ------------------------------------------------------

    def _route(self, src: int, outs) -> None:
        for peer_id, wire in outs:
            dst = self.by_id.get(peer_id)
            if dst is None:
                continue
            rec = self.open.get((min(src, dst), max(src, dst)))
            if rec is None:
                continue
            rec.in_flight += 1
            rec.wires += 1
            rec.bytes_sent += cost_of(wire, self.cfg.costs)
            self.schedule(self.now + rec.latency, "wire", rec.rid, src, dst, wire)

    def _maybe_close(self, rec: ReconRecord) -> None:
        if len(rec.done) == 2 and rec.in_flight == 0:
            self._finish(rec, "")

    def _finish(self, rec: ReconRecord, why: str) -> None:
        rec.end = self.now
        rec.aborted = why
        a, b = rec.pair
        na, nb = self.nodes[a], self.nodes[b]
        for x, y in ((na, nb), (nb, na)):
            conn = x.connection(y)
            if conn is not None:
                rec.violations[x.index] = list(conn.violations)
                if x.index not in rec.done and conn.phase is Phase.COMPLETE:
                    rec.done[x.index] = self.now
                    rec.delivered[x.index] = list(conn.delivered)
            if why:
                x.abort(y)
            else:
                x.close(y)
        rec.optimal_bytes = optimal_cost(
            (m for msgs in rec.delivered.values() for m in msgs), self.cfg.costs
        )
        self.open.pop(rec.pair, None)


def oracle_full_exchange(nodes: list[Node], edges: list[tuple[int, int]]) -> dict[int, frozenset]:
    """Per correct replica, the union of stores across its correct component.

    This is what exchanging complete message sets along every correct link
    until nothing changes would produce.
    """
    correct = {n.index for n in nodes if n.correct}
    stores = {i: frozenset(nodes[i].replica.store.ids()) for i in correct}
    return full_exchange(stores, edges)


def full_exchange(stores: dict[int, frozenset], edges: list[tuple[int, int]]) -> dict[int, frozenset]:
    sets = dict(stores)
    links = [(a, b) for a, b in edges if a in sets and b in sets]
    changed = True
    while changed:
        changed = False
        for a, b in links:
            u = sets[a] | sets[b]
            if u != sets[a] or u != sets[b]:
                sets[a] = sets[b] = u
                changed = True
    return sets


def run_scenario(cfg: ScenarioConfig) -> SimResult:
    return Simulator(cfg).run()
