"""Analytic byte accounting for reconciliation traffic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from ..dag import Message
from ..wire import Heads, HeadsV2, Msgs, Needs, WireMessage


@dataclass(frozen=True)
class CostParams:
    update_bytes: int = 200
    hash_bytes: int = 32
    per_message_overhead_bytes: int = 100


def message_cost(m: Message, p: CostParams) -> int:
    return p.update_bytes + p.hash_bytes * len(m.hs)


def cost_of(wire: WireMessage, p: CostParams = CostParams()) -> int:
    over = p.per_message_overhead_bytes
    if isinstance(wire, Heads):
        return over + p.hash_bytes * len(wire.hs)
    if isinstance(wire, HeadsV2):
        bloom = wire.filter.nbytes if wire.filter is not None else 0
        return over + p.hash_bytes * (len(wire.hs) + len(wire.old_heads)) + bloom
    if isinstance(wire, Needs):
        return over + p.hash_bytes * len(wire.hashes)
    if isinstance(wire, Msgs):
        return over + sum(message_cost(m, p) for m in wire.msgs)
    raise TypeError(f"not a wire message: {wire!r}")


def optimal_cost(delivered: Iterable[Message], p: CostParams = CostParams()) -> int:
    """Bytes a metadata-free protocol would need to ship the same new messages."""
    return sum(message_cost(m, p) for m in delivered)
