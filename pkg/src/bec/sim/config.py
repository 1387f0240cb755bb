"""Scenario configuration for the simulator."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..errors import ConfigError
from ..sync import Protocol
from .costs import CostParams


class Strategy(str, enum.Enum):
    HONEST = "honest"
    EQUIVOCATOR = "equivocator"
    DANGLING_HASHER = "dangling_hasher"
    BLOOM_CORRUPTOR = "bloom_corruptor"
    HEADS_OMITTER = "heads_omitter"
    SIGNATURE_FORGER = "signature_forger"
    UNSAFE_UPDATER = "unsafe_updater"
    SILENT = "silent"


class Workload(str, enum.Enum):
    # One 200-byte insert per update; what the bandwidth experiments use.
    EVENTS = "events"
    # Accounts, items and orders, so the invariants have something to protect.
    MIXED = "mixed"


@dataclass
class ScenarioConfig:
    replicas: int = 4
    adversaries: dict = field(default_factory=dict)  # replica index -> Strategy
    topology: list | None = None  # edge list; None means complete graph
    protocol: Protocol = Protocol.BLOOM
    eager_send: bool = False
    eager_relay: bool = False
    updates_per_interval: int = 1  # per replica
    intervals: int = 100
    # Extra reconciliation rounds among correct replicas after the last update.
    quiesce_rounds: int = 0
    slot: int = 1000  # logical time between reconciliation starts
    latency: int = 1
    link_latency: dict = field(default_factory=dict)  # (i, j) -> latency
    timeout_intervals: int = 10
    # A correct peer answers a Needs within one round trip, so a hash still
    # missing after this many round trips means the peer is faulty.
    stall_round_trips: int = 3
    bloom_bits: int = 10
    bloom_hashes: int = 7
    seed: int = 0
    costs: CostParams = field(default_factory=CostParams)
    workload: Workload = Workload.EVENTS
    crashes: list = field(default_factory=list)  # (time, replica index, downtime)
    check_invariants: bool = False  # check every invariant after every delivery
    # Mutation switches used to prove the property checkers can fail.
    check_signatures: bool = True
    check_causality: bool = True

    def __post_init__(self):
        self.protocol = Protocol(self.protocol)
        self.workload = Workload(self.workload)
        self.adversaries = {int(i): Strategy(v) for i, v in self.adversaries.items()}

    def edges(self) -> list[tuple[int, int]]:
        if self.topology is None:
            return list(itertools.combinations(range(self.replicas), 2))
        return [tuple(sorted(e)) for e in self.topology]

    def is_correct(self, i: int) -> bool:
        return Strategy(self.adversaries.get(i, Strategy.HONEST)) is Strategy.HONEST

    def interval_length(self) -> int:
        return max(1, len(self.edges())) * self.slot

    def link(self, i: int, j: int) -> int:
        return self.link_latency.get((min(i, j), max(i, j)), self.latency)

    def validate(self) -> None:
        if self.replicas < 1:
            raise ConfigError("need at least one replica")
        for i, s in self.adversaries.items():
            if not 0 <= i < self.replicas:
                raise ConfigError(f"adversary index {i} out of range")
            Strategy(s)
        for a, b in self.edges():
            if a == b or not (0 <= a < self.replicas and 0 <= b < self.replicas):
                raise ConfigError(f"bad edge {a}-{b}")
        if self.updates_per_interval < 0 or self.intervals < 0:
            raise ConfigError("updates and intervals must be non-negative")
        if self.latency < 1 or any(v < 1 for v in self.link_latency.values()):
            raise ConfigError("latency must be at least 1")
        if self.stall_round_trips < 2:
            raise ConfigError("stall_round_trips must be at least 2")
        if self.slot <= 0 or self.bloom_bits < 1 or self.bloom_hashes < 1:
            raise ConfigError("slot, bloom_bits and bloom_hashes must be positive")
        correct = [i for i in range(self.replicas) if self.is_correct(i)]
        if len(correct) > 1 and not _connected(correct, self.edges()):
            raise ConfigError("correct replicas do not form a connected component")

    def with_(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


def _connected(nodes: list[int], edges: list[tuple[int, int]]) -> bool:
    keep = set(nodes)
    adj: dict[int, set[int]] = {n: set() for n in nodes}
    for a, b in edges:
        if a in keep and b in keep:
            adj[a].add(b)
            adj[b].add(a)
    seen = {nodes[0]}
    todo = [nodes[0]]
    while todo:
        for nb in adj[todo.pop()]:
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    return seen == keep


_SIMPLE = {f.name: f for f in fields(ScenarioConfig)}


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse ``key = value`` lines into a config.

    ``adversary.<i> = <strategy>`` assigns strategies, ``topology`` takes
    ``0-1,1-2``, ``crash`` lines take ``time,replica,downtime`` and may
    repeat; cost parameters use their own names.
    """
    cfg = ScenarioConfig()
    costs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("adversary."):
                cfg.adversaries[int(key.split(".", 1)[1])] = Strategy(value)
            elif key == "topology":
                cfg.topology = [tuple(int(x) for x in e.split("-")) for e in value.split(",") if e]
            elif key == "crash":
                t, r, d = (int(x) for x in value.split(","))
                cfg.crashes.append((t, r, d))
            elif key in ("update_bytes", "hash_bytes", "per_message_overhead_bytes"):
                costs[key] = int(value)
            elif key == "protocol":
                cfg.protocol = Protocol(value)
            elif key == "workload":
                cfg.workload = Workload(value)
            elif key in _SIMPLE and _SIMPLE[key].type in ("bool",):
                setattr(cfg, key, value.lower() in ("1", "true", "yes", "on"))
            elif key in _SIMPLE and _SIMPLE[key].type in ("int",):
                setattr(cfg, key, int(value))
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    if costs:
        cfg.costs = CostParams(**costs)
    cfg.validate()
    return cfg


def load_scenario(path: str | Path) -> ScenarioConfig:
    return parse_scenario(Path(path).read_text())
