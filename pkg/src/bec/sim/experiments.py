"""Round-trip and bandwidth sweeps over updates per reconciliation interval."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable

from ..sync import Protocol
from .config import ScenarioConfig
from .engine import run_scenario

DEFAULT_SWEEP = (1, 2, 4, 8, 16, 32, 64, 128, 256)


@dataclass(frozen=True)
class SweepPoint:
    protocol: Protocol
    updates_per_interval: int
    completed: int
    mean_round_trips: float
    round_trips: dict  # round trips -> share of completed reconciliations
    mean_bytes: float
    optimal_bytes: float
    mean_new_messages: float

    def share(self, lo: int, hi: int | None = None) -> float:
        """Share of reconciliations needing between lo and hi round trips."""
        return sum(v for k, v in self.round_trips.items() if k >= lo and (hi is None or k <= hi))

    @property
    def overhead_bytes(self) -> float:
        return self.mean_bytes - self.optimal_bytes


def run_point(
    protocol: Protocol | str,
    updates: int,
    *,
    replicas: int = 4,
    pairs_recons: int = 100,
    seed: int = 0,
    bloom_bits: int = 10,
    bloom_hashes: int = 7,
) -> SweepPoint:
    cfg = ScenarioConfig(
        replicas=replicas,
        protocol=protocol,
        updates_per_interval=updates,
        intervals=pairs_recons,
        bloom_bits=bloom_bits,
        bloom_hashes=bloom_hashes,
        seed=seed,
    )
    stats = run_scenario(cfg).stats
    done = stats.completed()
    new = sum(r.new_messages for r in done) / len(done) if done else 0.0
    return SweepPoint(
        cfg.protocol,
        updates,
        len(done),
        stats.mean_round_trips(),
        stats.round_trip_distribution(),
        stats.mean_bytes(),
        stats.mean_optimal_bytes(),
        new,
    )


def sweep(protocols: Iterable[Protocol | str], values: Iterable[int], **kw) -> list[SweepPoint]:
    values = list(values)
    return [run_point(p, u, **kw) for p in protocols for u in values]


def _csv(header: list[str], rows: Iterable[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def roundtrips_csv(points: Iterable[SweepPoint]) -> str:
    return _csv(
        ["protocol", "updates_per_interval", "mean_round_trips", "p_one_rt", "p_two_rt", "p_three_plus_rt"],
        (
            [
                p.protocol.value,
                p.updates_per_interval,
                f"{p.mean_round_trips:.4f}",
                f"{p.share(0, 1):.4f}",
                f"{p.share(2, 2):.4f}",
                f"{p.share(3):.4f}",
            ]
            for p in points
        ),
    )


def bandwidth_csv(points: Iterable[SweepPoint]) -> str:
    return _csv(
        ["protocol", "updates_per_interval", "mean_kb", "optimal_kb"],
        ([p.protocol.value, p.updates_per_interval, f"{p.mean_bytes / 1000:.4f}", f"{p.optimal_bytes / 1000:.4f}"] for p in points),
    )
