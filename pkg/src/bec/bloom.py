"""Bloom filters over message ids, used to summarise recently added messages."""

from __future__ import annotations

import functools
import struct
from math import exp
from dataclasses import dataclass
from typing import Iterable

from .crypto import Hash
from .errors import MalformedFilter

MIN_BITS = 8
# Decoded filters come from untrusted peers; bound the work a query can cost.
MAX_K = 1024

_HEADER = struct.Struct(">II")


def _indices(h: Hash, k: int, m: int) -> list[int]:
    # Enhanced double hashing. Plain a + i*b puts every index set on an
    # arithmetic progression, and on filters of a few dozen bits those
    # progressions nest inside each other often enough to raise the false
    # positive rate five-fold. The cubic term breaks that up.
    a = int.from_bytes(h[0:8], "big")
    b = int.from_bytes(h[8:16], "big")
    return [(a + i * b + c) % m for i, c in enumerate(_cubic(k))]


@functools.lru_cache(maxsize=16)
def _cubic(k: int) -> tuple[int, ...]:
    return tuple((i * i * i - i) // 6 for i in range(k))


@dataclass(frozen=True)
class BloomFilter:
    bits: bytes
    k: int
    m: int

    def __post_init__(self):
        if self.m < MIN_BITS:
            raise MalformedFilter(f"filter must have at least {MIN_BITS} bits, got {self.m}")
        if not 1 <= self.k <= MAX_K:
            raise MalformedFilter(f"index function count {self.k} out of range")
        if len(self.bits) != (self.m + 7) // 8:
            raise MalformedFilter(f"{len(self.bits)} bytes cannot hold {self.m} bits")

    def __contains__(self, h: Hash) -> bool:
        # Bit i lives in byte i // 8 at position i % 8.
        bits, m = self.bits, self.m
        a = int.from_bytes(h[0:8], "big")
        b = int.from_bytes(h[8:16], "big")
        for i, c in enumerate(_cubic(self.k)):
            j = (a + i * b + c) % m
            if not bits[j >> 3] >> (j & 7) & 1:
                return False
        return True

    @property
    def nbytes(self) -> int:
        return len(self.bits)

    def encode(self) -> bytes:
        return _HEADER.pack(self.k, self.m) + self.bits

    @classmethod
    def decode(cls, data: bytes) -> "BloomFilter":
        if len(data) < _HEADER.size:
            raise MalformedFilter("truncated filter header")
        k, m = _HEADER.unpack_from(data)
        return cls(bytes(data[_HEADER.size :]), k, m)


def filter_size(n: int, bits_per_entry: int = 10) -> int:
    m = max(MIN_BITS, bits_per_entry * n)
    return (m + 7) // 8 * 8


def make_bloom_ids(ids: Iterable[Hash], bits_per_entry: int = 10, k: int = 7) -> BloomFilter:
    ids = set(ids)
    m = filter_size(len(ids), bits_per_entry)
    bits = bytearray((m + 7) // 8)
    for h in ids:
        for i in _indices(h, k, m):
            bits[i >> 3] |= 1 << (i & 7)
    return BloomFilter(bytes(bits), k, m)


def make_bloom(items: Iterable, bits_per_entry: int = 10, k: int = 7) -> BloomFilter:
    """Build a filter over messages (anything with an ``id``)."""
    return make_bloom_ids((m.id for m in items), bits_per_entry, k)


def bloom_member(bloom: BloomFilter, m) -> bool:
    return m.id in bloom


def encode_bloom(bloom: BloomFilter) -> bytes:
    return bloom.encode()


def decode_bloom(data: bytes) -> BloomFilter:
    return BloomFilter.decode(data)


def false_positive_rate(n: int, m: int, k: int) -> float:
    """Textbook approximation (1 - e^(-kn/m))^k."""
    return (1.0 - exp(-k * n / m)) ** k
