"""Reconciliation wire messages and their binary encoding.

Every message is a one-byte tag followed by count-prefixed hash lists,
length-prefixed message encodings, or a length-prefixed Bloom filter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Union

from .bloom import BloomFilter
from .crypto import HASH_LEN
from .dag import Message
from .errors import MalformedFilter, MalformedWire

TAG_HEADS = 1
TAG_HEADS_V2 = 2
TAG_NEEDS = 3
TAG_MSGS = 4

_U32 = struct.Struct(">I")


@dataclass(frozen=True)
class Heads:
    hs: frozenset


@dataclass(frozen=True)
class HeadsV2:
    hs: frozenset
    old_heads: frozenset
    # None when the peer's filter bytes could not be decoded.
    filter: BloomFilter | None


@dataclass(frozen=True)
class Needs:
    hashes: frozenset


@dataclass(frozen=True)
class Msgs:
    msgs: frozenset
    # Entries that failed to decode; kept only so a receiver can log them.
    undecodable: int = field(default=0, compare=False)


WireMessage = Union[Heads, HeadsV2, Needs, Msgs]


def _hashes(hs) -> bytes:
    hs = sorted(hs)
    return _U32.pack(len(hs)) + b"".join(hs)


def encode_wire(msg: WireMessage) -> bytes:
    if isinstance(msg, Heads):
        return bytes([TAG_HEADS]) + _hashes(msg.hs)
    if isinstance(msg, HeadsV2):
        fb = msg.filter.encode() if msg.filter is not None else b""
        return bytes([TAG_HEADS_V2]) + _hashes(msg.hs) + _hashes(msg.old_heads) + _U32.pack(len(fb)) + fb
    if isinstance(msg, Needs):
        return bytes([TAG_NEEDS]) + _hashes(msg.hashes)
    if isinstance(msg, Msgs):
        parts = [bytes([TAG_MSGS]), _U32.pack(len(msg.msgs))]
        for m in sorted(msg.msgs):
            data = m.encode()
            parts.append(_U32.pack(len(data)) + data)
        return b"".join(parts)
    raise TypeError(f"not a wire message: {msg!r}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or len(self.data) - self.pos < n:
            raise MalformedWire(f"truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def hashes(self) -> frozenset:
        n = self.u32()
        raw = self.take(n * HASH_LEN)
        hs = frozenset(raw[i * HASH_LEN : (i + 1) * HASH_LEN] for i in range(n))
        if len(hs) != n:
            raise MalformedWire("duplicate hash in list")
        return hs


def decode_wire(data: bytes) -> WireMessage:
    """Decode one wire message; raises MalformedWire on structural errors."""
    r = _Reader(bytes(data))
    tag = r.take(1)[0]
    if tag == TAG_HEADS:
        out: WireMessage = Heads(r.hashes())
    elif tag == TAG_HEADS_V2:
        hs = r.hashes()
        old = r.hashes()
        raw = r.take(r.u32())
        try:
            bloom = BloomFilter.decode(raw)
        except MalformedFilter:
            bloom = None
        out = HeadsV2(hs, old, bloom)
    elif tag == TAG_NEEDS:
        out = Needs(r.hashes())
    elif tag == TAG_MSGS:
        n = r.u32()
        msgs = set()
        bad = 0
        for _ in range(n):
            raw = r.take(r.u32())
            try:
                msgs.add(Message.decode(raw))
            except ValueError:
                bad += 1
        out = Msgs(frozenset(msgs), bad)
    else:
        raise MalformedWire(f"unknown tag {tag}")
    if r.pos != len(r.data):
        raise MalformedWire(f"{len(r.data) - r.pos} trailing bytes")
    return out
