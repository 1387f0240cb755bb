from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from bec.bloom import (
    MAX_K,
    BloomFilter,
    bloom_member,
    decode_bloom,
    encode_bloom,
    false_positive_rate,
    filter_size,
    make_bloom,
    make_bloom_ids,
)
from bec.errors import MalformedFilter

from conftest import FIG5_P, store_of

ids32 = st.binary(min_size=32, max_size=32)


def rand_ids(rng, n):
    return [rng.randbytes(32) for _ in range(n)]


def test_empty_filter():
    f = make_bloom([])
    assert f.m == 8 and f.bits == b"\x00"
    assert not any(h in f for h in rand_ids(random.Random(0), 200))
    assert len(encode_bloom(f)) == 9


def test_filter_size_is_byte_aligned():
    assert filter_size(0) == 8
    assert filter_size(1) == 16
    assert filter_size(7) == 72
    assert filter_size(100) == 1000
    assert filter_size(3, bits_per_entry=3) == 16


@settings(max_examples=50)
@given(st.sets(ids32, max_size=60), st.integers(1, 16), st.integers(1, 12))
def test_no_false_negatives(items, bits, k):
    f = make_bloom_ids(items, bits, k)
    assert all(h in f for h in items)
    assert f.m == filter_size(len(items), bits)
    assert len(f.bits) * 8 == f.m


@given(st.sets(ids32, max_size=20))
def test_deterministic(items):
    assert make_bloom_ids(items) == make_bloom_ids(list(items)[::-1])


def test_false_positive_rate_matches_theory():
    rng = random.Random(1)
    rates = []
    for _ in range(20):
        f = make_bloom_ids(rand_ids(rng, 100))
        rates.append(sum(h in f for h in rand_ids(rng, 1000)) / 1000)
    expected = false_positive_rate(100, 1000, 7)
    assert 0.007 < expected < 0.009
    assert all(0.002 <= r <= 0.03 for r in rates), rates
    assert abs(sum(rates) / len(rates) - expected) < 0.004


def test_small_filters_keep_their_rate():
    # Small filters are the common case in practice; their rate must not
    # drift far above the analytic value.
    rng = random.Random(2)
    hits = trials = 0
    for n in range(1, 12):
        for _ in range(200):
            f = make_bloom_ids(rand_ids(rng, n))
            hits += sum(h in f for h in rand_ids(rng, 20))
            trials += 20
    assert hits / trials < 0.02


@given(st.sets(ids32, max_size=30), st.integers(1, 10))
def test_encode_round_trip(items, k):
    f = make_bloom_ids(items, 10, k)
    enc = encode_bloom(f)
    assert len(enc) == 8 + (f.m + 7) // 8
    assert decode_bloom(enc) == f


def test_garbage_decodes_to_error_or_usable_filter():
    rng = random.Random(3)
    probes = rand_ids(rng, 5)
    decoded = 0
    for i in range(1000):
        if i % 2:
            data = rng.randbytes(rng.randint(0, 40))
        else:
            m = rng.randint(0, 80)
            data = rng.randint(0, MAX_K + 5).to_bytes(4, "big") + m.to_bytes(4, "big") + rng.randbytes((m + 7) // 8)
        try:
            f = decode_bloom(data)
        except MalformedFilter:
            continue
        decoded += 1
        for h in probes:
            assert (h in f) in (True, False)
    assert decoded > 100


def test_constructor_validates():
    with pytest.raises(MalformedFilter):
        BloomFilter(b"", 7, 0)
    with pytest.raises(MalformedFilter):
        BloomFilter(b"\x00", 0, 8)
    with pytest.raises(MalformedFilter):
        BloomFilter(b"\x00", MAX_K + 1, 8)
    with pytest.raises(MalformedFilter):
        BloomFilter(b"\x00\x00", 7, 8)


def test_fig5_filter_at_p(fig5):
    since = store_of(fig5, FIG5_P).messages_since({fig5["B"].id})
    f = make_bloom(since)
    assert f.m == 72
    for name in "CDEJKLM":
        assert bloom_member(f, fig5[name])
    # F must be negative; G is only allowed to be a false positive.
    assert not bloom_member(f, fig5["F"])
