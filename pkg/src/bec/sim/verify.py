"""Property checks run by ``bec verify`` and the acceptance suite.

Each check returns a list of human-readable failures; empty means pass.
"""

from __future__ import annotations

import logging
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator

from ..crypto import make_keys
from ..dag import Message, MessageStore
from ..db import THIS_HASH, ReplicatedState, TupleTriple, UpdateSet, resolve
from ..errors import PropertyViolation
from ..sync import BroadcastConfig, Protocol, Replica
from .config import ScenarioConfig, Strategy, Workload
from .engine import SimResult, run_scenario
from .nodes import workload_schema
from .trace import assert_trace_properties, check_decisions

log = logging.getLogger(__name__)

FAULTY = [s for s in Strategy if s is not Strategy.HONEST]


@dataclass
class MatrixOutcome:
    strategy: Strategy
    seed: int
    failures: list = field(default_factory=list)


def matrix_config(strategy: Strategy, seed: int, intervals: int = 6) -> ScenarioConfig:
    """Four correct replicas plus two running ``strategy`` (none if honest)."""
    adversaries = {} if strategy is Strategy.HONEST else {4: strategy, 5: strategy}
    return ScenarioConfig(
        replicas=6,
        adversaries=adversaries,
        workload=Workload.MIXED,
        updates_per_interval=1,
        intervals=intervals,
        quiesce_rounds=2,
        check_invariants=True,
        seed=seed,
    )


def check_run(result: SimResult) -> list[str]:
    failures = [str(v) for v in assert_trace_properties(result).violations]
    for i, mid, inv in result.invariant_violations:
        failures.append(f"invariant {inv} violated at {result.nodes[i].name} after {mid.hex()[:8]}")
    for mid in check_decisions(result):
        failures.append(f"correct replicas disagree on applying {mid[:8]}")
    failures += isolation_failures(result)
    return failures


def isolation_failures(result: SimResult) -> list[str]:
    """Faulty peers only ever hand correct replicas valid, closed messages,
    and reconciliations between correct replicas always finish."""
    out = []
    directory = result.nodes[0].replica.directory
    for rec in result.stats.records:
        a, b = (result.nodes[i] for i in rec.pair)
        if a.correct and b.correct:
            if rec.started and not rec.completed and rec.aborted not in ("", "run ended"):
                out.append(f"correct pair {a.name}-{b.name} reconciliation {rec.rid} ended: {rec.aborted}")
            elif rec.started and not rec.completed:
                out.append(f"correct pair {a.name}-{b.name} reconciliation {rec.rid} never finished")
            continue
        for node in (a, b):
            if not node.correct:
                continue
            got = rec.delivered.get(node.index, [])
            have = {m.id for m in got}
            store = node.replica.store
            for m in got:
                if m.sender(directory) is None:
                    out.append(f"{node.name} stored an unsigned message from a faulty peer")
                for h in m.hs:
                    if h not in have and h not in store:
                        out.append(f"{node.name} stored {m.short()} without its predecessor")
    return out


def run_matrix(strategies=None, seeds=range(20), intervals: int = 6) -> list[MatrixOutcome]:
    out = []
    for s in strategies or [Strategy.HONEST, *FAULTY]:
        for seed in seeds:
            res = run_scenario(matrix_config(Strategy(s), seed, intervals))
            out.append(MatrixOutcome(Strategy(s), seed, check_run(res)))
            log.info("matrix %s seed %d: %d failures", s, seed, len(out[-1].failures))
    return out


# -- pairwise reconciliation ---------------------------------------------


def reconcile_local(a: Replica, b: Replica) -> int:
    """Run one reconciliation between two in-process replicas over a FIFO
    link until it goes quiet; returns the number of wire messages."""
    queue = deque()
    queue.append((a, b, a.connect(b.id)[1]))
    queue.append((b, a, b.connect(a.id)[1]))
    sent = 0
    while queue:
        src, dst, wire = queue.popleft()
        sent += 1
        for out in dst.on_wire(src.id, wire):
            queue.append((dst, src, out.wire))
    a.close(b.id)
    b.close(a.id)
    return sent


def random_pair_stores(rng: random.Random, n: int, keys) -> tuple[MessageStore, MessageStore, set[bytes]]:
    """Two predecessor-closed stores sharing a random common prefix.

    Returns both stores and the ids of their union.
    """
    left, right = MessageStore(), MessageStore()
    placed: list[tuple[Message, str]] = []
    for i in range(n):
        side = rng.choice(("both", "left", "right"))
        pool = [m for m, s in placed if s in ("both", side)]
        preds = rng.sample(pool, min(len(pool), rng.randint(0, 3)))
        m = Message.create(keys[i % len(keys)], f"m{i}".encode(), [p.id for p in preds])
        placed.append((m, side))
        for store, name in ((left, "left"), (right, "right")):
            if side in ("both", name):
                store.insert_batch([m])
    return left, right, {m.id for m, _ in placed}


def exactness_failures(instances: int = 200, max_messages: int = 200, seed: int = 0) -> list[str]:
    """After one reconciliation both stores must equal the union exactly."""
    rng = random.Random(seed)
    keys, directory = make_keys(["p", "q", "r"], seed="exactness")
    out = []
    for i in range(instances):
        left, right, union = random_pair_stores(rng, rng.randint(1, max_messages), keys)
        # Half the instances start from heads remembered by an earlier round.
        common = left.ids() & right.ids()
        old = {h for h in common if not left.successors(h) & common} if rng.random() < 0.5 else set()
        for protocol in Protocol:
            cfg = BroadcastConfig(protocol=protocol)
            p = Replica(keys[0], directory, cfg, _copy(left))
            q = Replica(keys[1], directory, cfg, _copy(right))
            p.peer_heads.store(q.id, old)
            q.peer_heads.store(p.id, old)
            reconcile_local(p, q)
            for r in (p, q):
                if r.store.ids() != union:
                    out.append(f"instance {i} {protocol.value}: {r.id} holds {len(r.store)} of {len(union)}")
    return out


def _copy(store: MessageStore) -> MessageStore:
    fresh = MessageStore()
    fresh.insert_batch(store)
    return fresh


def equivocation_outcome(protocol: Protocol | str = Protocol.BLOOM) -> dict[str, set[bytes]]:
    """q signs A for p and B for r; then p and r reconcile.

    Returns the values each of p and r delivered.
    """
    keys, directory = make_keys(["p", "q", "r"], seed="equivocation")
    cfg = BroadcastConfig(protocol=protocol)
    p, r = Replica(keys[0], directory, cfg), Replica(keys[2], directory, cfg)
    q_for_p, q_for_r = Replica(keys[1], directory, cfg), Replica(keys[1], directory, cfg)
    q_for_p.broadcast(b"A")
    q_for_r.broadcast(b"B")
    reconcile_local(p, q_for_p)
    reconcile_local(r, q_for_r)
    reconcile_local(p, r)
    return {"p": {m.value for m in p.delivered}, "r": {m.value for m in r.delivered}}


# -- commutativity -----------------------------------------------------


def random_bec_dag(rng: random.Random, n: int = 6) -> list[Message]:
    """A small DAG of update messages mixing safe and unsafe updates.

    Deletes sometimes target a concurrent message's tuple and orders
    sometimes name a missing item, so delivery order would matter if the
    replicated state did not check causality and safety.
    """
    keys, _ = make_keys(["a", "b", "c"], seed="commute")
    msgs: list[Message] = []
    inserted: list[TupleTriple] = []
    for i in range(n):
        preds = [m for m in msgs if rng.random() < 0.5]
        anc = _ancestors(preds, msgs)
        mine = [t for t in inserted if t.h in anc]
        others = [t for t in inserted if t.h not in anc]
        ins, dels = [], []
        for _ in range(rng.randint(1, 2)):
            roll = rng.random()
            if roll < 0.25:
                ins.append(("accounts", (f"acct{rng.randrange(3)}", rng.randint(0, 9))))
            elif roll < 0.4:
                ins.append(("items", (THIS_HASH, f"item{i}")))
            elif roll < 0.55:
                targets = [t.tuple[0] for t in inserted if t.rel == "items"]
                item = rng.choice(targets) if targets and rng.random() < 0.8 else "nothing"
                ins.append(("orders", (item, rng.randint(1, 3))))
            elif roll < 0.8 and mine:
                d = rng.choice(mine)
                dels.append(d)
                if d.rel == "accounts":
                    ins.append(("accounts", (d.tuple[0], d.tuple[1] + 1)))
            elif others:
                d = rng.choice(others)
                dels.append(d)
        value = UpdateSet.of(ins, dels).encode()
        m = Message.create(rng.choice(keys), value, {p.id for p in preds})
        if any(m.id == x.id for x in msgs):
            continue  # same author, value and predecessors: the same message
        msgs.append(m)
        for r, t in ins:
            inserted.append(TupleTriple(m.id, r, resolve(t, m.id)))
    return msgs


def _ancestors(preds: list[Message], msgs: list[Message]) -> set[bytes]:
    by_id = {m.id: m for m in msgs}
    seen: set[bytes] = set()
    todo = [p.id for p in preds]
    while todo:
        h = todo.pop()
        if h not in seen:
            seen.add(h)
            todo += by_id[h].hs
    return seen


def topological_orders(msgs: list[Message]) -> Iterator[list[Message]]:
    """Every delivery order in which predecessors come first."""
    ids = {m.id for m in msgs}

    def rec(done: set, order: list) -> Iterator[list[Message]]:
        if len(order) == len(msgs):
            yield list(order)
            return
        for m in msgs:
            if m.id not in done and all(h in done or h not in ids for h in m.hs):
                done.add(m.id)
                order.append(m)
                yield from rec(done, order)
                order.pop()
                done.discard(m.id)

    return rec(set(), [])


def replay(order: list[Message], check_causality: bool = True) -> ReplicatedState:
    store = MessageStore()
    state = ReplicatedState(workload_schema(), check_causality)
    for m in order:
        store.insert_batch([m])
        state.on_deliver(m, store)
    return state


def commutativity_failures(trials: int = 50, seed: int = 0, max_messages: int = 6) -> list[str]:
    rng = random.Random(seed)
    out = []
    for trial in range(trials):
        msgs = random_bec_dag(rng, rng.randint(2, max_messages))
        states = {replay(order).canonical() for order in topological_orders(msgs)}
        if len(states) != 1:
            out.append(f"trial {trial}: {len(states)} distinct final states over delivery orders")
    return out


# -- mutation self-tests -------------------------------------------------


def signature_mutation_detected(seed: int = 0) -> bool:
    """With signature checks off, forged messages must show up as
    authenticity violations."""
    cfg = ScenarioConfig(
        replicas=3,
        adversaries={2: Strategy.SIGNATURE_FORGER},
        updates_per_interval=1,
        intervals=4,
        check_signatures=False,
        seed=seed,
    )
    report = assert_trace_properties(run_scenario(cfg))
    return any(v.prop == "authenticity" for v in report.violations)


def causality_mutation_detected() -> bool:
    """With the causality check off, a delete concurrent with the insert
    it targets must make two replicas with equal messages diverge."""
    keys, _ = make_keys(["p", "q"], seed="mutation")
    ins = Message.create(keys[0], UpdateSet.of(ins=[("accounts", ("acct", 5))]).encode(), ())
    victim = TupleTriple(ins.id, "accounts", ("acct", 5))
    dele = Message.create(keys[1], UpdateSet.of(ins=[("accounts", ("acct", 6))], dels=[victim]).encode(), ())
    try:
        _expect_same(replay([ins, dele], False), replay([dele, ins], False))
    except PropertyViolation:
        return True
    return False


def _expect_same(a: ReplicatedState, b: ReplicatedState) -> None:
    if a.canonical() != b.canonical():
        raise PropertyViolation("convergence", "p/q", None, "equal delivered sets, different state")


def verify_all(seeds=range(3), trials: int = 30) -> dict[str, list[str]]:
    """Everything ``bec verify`` runs, keyed by check name."""
    report: dict[str, list[str]] = {}
    for o in run_matrix(seeds=seeds):
        report.setdefault(f"matrix {o.strategy.value}", []).extend(f"seed {o.seed}: {f}" for f in o.failures)
    report["commutativity"] = commutativity_failures(trials)
    report["reconciliation exactness"] = exactness_failures(instances=trials, max_messages=100)
    report["equivocation"] = [] if all(v == {b"A", b"B"} for v in equivocation_outcome().values()) else ["p and r disagree"]
    report["mutation: signatures off"] = [] if signature_mutation_detected() else ["forgeries went unnoticed"]
    report["mutation: causality off"] = [] if causality_mutation_detected() else ["divergence went unnoticed"]
    return report


__all__ = [
    "FAULTY",
    "MatrixOutcome",
    "causality_mutation_detected",
    "check_run",
    "commutativity_failures",
    "equivocation_outcome",
    "exactness_failures",
    "isolation_failures",
    "matrix_config",
    "random_bec_dag",
    "random_pair_stores",
    "reconcile_local",
    "replay",
    "run_matrix",
    "signature_mutation_detected",
    "topological_orders",
    "verify_all",
]
