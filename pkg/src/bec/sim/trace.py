"""Checks of the broadcast and replication guarantees on a finished run."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import PropertyViolation
from .engine import SimResult, full_exchange


@dataclass
class TraceReport:
    violations: list = field(default_factory=list)
    checked: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, prop: str, replica: str, message: bytes | None = None, detail: str = "") -> None:
        self.violations.append(PropertyViolation(prop, replica, message, detail))

    def raise_first(self) -> None:
        if self.violations:
            raise self.violations[0]

    def summary(self) -> str:
        if self.ok:
            return "all properties hold: " + ", ".join(self.checked)
        return "\n".join(str(v) for v in self.violations)


def assert_trace_properties(result: SimResult, *, quiescent: bool | None = None) -> TraceReport:
    """Check every correct replica's delivery trace.

    Non-duplication, authenticity, causal order and self-delivery are always
    checked. When the run ended with reconciliation rounds among correct
    replicas only (``quiescent``; defaults to whether the config asked for
    them) all correct stores must equal the full-exchange oracle and equal
    delivered sets must give identical relational state.
    """
    rep = TraceReport()
    cfg = result.config
    directory = result.nodes[0].replica.directory
    broadcasts = {n.id: {m.id for m in n.broadcasts} for n in result.nodes if n.correct}
    rep.checked += ["non-duplication", "authenticity", "causal order", "self-delivery"]
    for node in result.correct_nodes():
        name = node.name
        seen: dict[bytes, int] = {}
        for pos, m in enumerate(node.replica.delivered):
            if m.id in seen:
                rep.add("non-duplication", name, m.id, f"delivered at {seen[m.id]} and {pos}")
                continue
            seen[m.id] = pos
            sender = m.sender(directory)
            if sender is None:
                rep.add("authenticity", name, m.id, "signature does not verify against any directory key")
            elif sender in broadcasts and m.id not in broadcasts[sender]:
                rep.add("authenticity", name, m.id, f"never broadcast by correct sender {sender}")
            for h in m.hs:
                if h not in seen and h not in node.replica.store.tombstones:
                    rep.add("causal order", name, m.id, f"predecessor {h.hex()[:8]} not delivered first")
        for mid in broadcasts[node.id]:
            if mid not in seen:
                rep.add("self-delivery", name, mid, "own broadcast never delivered")
    if quiescent is None:
        quiescent = cfg.quiesce_rounds > 0
    if quiescent:
        rep.checked += ["eventual delivery", "convergence"]
        _check_convergence(result, rep)
    return rep


def _check_convergence(result: SimResult, rep: TraceReport) -> None:
    oracle = result.quiesce_oracle
    if oracle is None:
        correct = {n.index: result.store_ids(n.index) for n in result.correct_nodes()}
        oracle = full_exchange(correct, result.config.edges())
    for node in result.correct_nodes():
        have = result.store_ids(node.index)
        want = oracle[node.index]
        if not want <= have:
            rep.add("eventual delivery", node.name, detail=f"missing {len(want - have)} messages the oracle holds")
    by_set: dict[frozenset, tuple[str, bytes]] = {}
    for node in result.correct_nodes():
        ids = result.store_ids(node.index)
        state = node.bec.state.canonical()
        if ids in by_set and by_set[ids][1] != state:
            rep.add("convergence", node.name, detail=f"same messages as {by_set[ids][0]} but different state")
        by_set.setdefault(ids, (node.name, state))


def check_decisions(result: SimResult) -> list[str]:
    """Messages that correct replicas disagree on applying."""
    verdicts: dict[bytes, set[bool]] = {}
    for d in result.decisions.values():
        for mid, applied in d.items():
            verdicts.setdefault(mid, set()).add(applied)
    return [mid.hex() for mid, v in verdicts.items() if len(v) > 1]
