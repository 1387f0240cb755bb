from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from bec.dag import Message, MessageStore, heads, messages_since, read_messages, topo_sort
from bec.errors import CycleDetected, DanglingPredecessor

from conftest import FIG5_EDGES, FIG5_P, FIG5_Q, store_of


def ids(msgs, names):
    return {msgs[n].id for n in names}


def chain(key, n):
    out = []
    for i in range(n):
        out.append(Message.create(key, f"c{i}".encode(), [out[-1].id] if out else []))
    return out


def random_dag(key, rng, n):
    msgs = []
    for i in range(n):
        preds = rng.sample(msgs, min(len(msgs), rng.randint(0, 3)))
        msgs.append(Message.create(key, f"r{i}".encode(), [p.id for p in preds]))
    return msgs


def naive_pred_star(msgs_by_id, h):
    out, todo = set(), list(msgs_by_id[h].hs)
    while todo:
        x = todo.pop()
        if x in msgs_by_id and x not in out:
            out.add(x)
            todo += msgs_by_id[x].hs
    return out


def naive_since(msgs, old_heads):
    by_id = {m.id: m for m in msgs}
    known = {h for h in old_heads if h in by_id}
    covered = set(known)
    for h in known:
        covered |= naive_pred_star(by_id, h)
    return {m.id for m in msgs} - covered


def test_message_encoding_round_trip(fig5):
    m = fig5["C"]
    assert Message.decode(m.encode()) == m
    assert Message.decode(m.encode()).hs == m.hs
    with pytest.raises(ValueError):
        Message.decode(m.encode()[:-1])


def test_fig5_heads(fig5):
    assert heads(store_of(fig5, FIG5_P)) == ids(fig5, "EM")
    assert heads(store_of(fig5, FIG5_Q)) == ids(fig5, "GK")


def test_empty_and_single_heads(keys):
    assert heads(MessageStore()) == set()
    (a,) = chain(keys[0][0], 1)
    store = MessageStore()
    store.insert_batch([a])
    assert heads(store) == {a.id}


def test_closures_on_chain(keys):
    a, b, c = chain(keys[0][0], 3)
    store = MessageStore()
    store.insert_batch([a, b, c])
    assert store.pred_star(c) == {a, b}
    assert store.succ_star(a) == {b, c}
    assert store.succ_star(c) == set()
    assert store.pred_star(a) == set()
    assert store.is_ancestor(a.id, c.id) and not store.is_ancestor(c.id, a.id)


def test_insert_batch_returns_only_new(fig5):
    store = store_of(fig5, FIG5_P)
    assert store.insert_batch([]) == []
    assert store.insert_batch([fig5["A"]]) == []
    new = store.insert_batch([fig5[n] for n in FIG5_Q])
    assert {m.id for m in new} == ids(fig5, "FG")
    assert store.ids() == ids(fig5, set(FIG5_P) | set(FIG5_Q))
    assert heads(store) == ids(fig5, "EMG")


def test_insert_batch_rejects_dangling(fig5):
    store = MessageStore()
    with pytest.raises(DanglingPredecessor):
        store.insert_batch([fig5["B"]])
    assert len(store) == 0


def test_topo_sort_chain_and_singleton(keys):
    a, b, c = chain(keys[0][0], 3)
    assert topo_sort([c, a, b]) == [a, b, c]
    assert topo_sort([b]) == [b]


def test_topo_sort_breaks_ties_by_id(keys):
    x = Message.create(keys[0][0], b"x", ())
    y = Message.create(keys[0][1], b"y", ())
    lo, hi = sorted([x, y], key=lambda m: m.id)
    for order in ([x, y], [y, x]):
        assert topo_sort(order) == [lo, hi]


def test_topo_sort_detects_cycles(keys):
    # Forge a two-cycle by building messages with mutually referencing ids.
    a = Message.create(keys[0][0], b"a", ())
    b = Message.create(keys[0][0], b"b", [a.id])
    fake_a = Message(a.value, frozenset([b.id]), a.sig, a.payload, a.id)
    with pytest.raises(CycleDetected):
        topo_sort([fake_a, b])


def test_messages_since_examples(fig5):
    p = store_of(fig5, FIG5_P).snapshot()
    assert messages_since(p, set()) == set(p)
    assert messages_since(p, p.heads()) == set()
    assert {m.id for m in messages_since(p, {fig5["B"].id})} == ids(fig5, "CDEJKLM")
    assert {m.id for m in messages_since(p, {bytes(32)})} == p.ids()


def test_snapshot_is_immutable(fig5):
    store = store_of(fig5, FIG5_P)
    snap = store.snapshot()
    store.insert_batch([fig5["F"], fig5["G"]])
    assert fig5["F"].id not in snap
    assert snap.heads() == ids(fig5, "EM")
    assert len(snap) == len(FIG5_P)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32), st.integers(0, 4))
def test_messages_since_matches_naive_oracle(keys, n, seed, n_old):
    rng = random.Random(seed)
    msgs = random_dag(keys[0][0], rng, n)
    store = MessageStore()
    store.insert_batch(msgs)
    old = {m.id for m in rng.sample(msgs, min(n_old, n))}
    assert {m.id for m in messages_since(store, old)} == naive_since(msgs, old)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32))
def test_store_properties(keys, n, seed):
    rng = random.Random(seed)
    msgs = random_dag(keys[0][0], rng, n)
    order = topo_sort(rng.sample(msgs, len(msgs)))
    assert sorted(order) == sorted(msgs)
    pos = {m.id: i for i, m in enumerate(order)}
    assert all(pos[p] < pos[m.id] for m in msgs for p in m.hs)
    assert order == topo_sort(msgs)

    store = MessageStore()
    store.insert_batch(msgs)
    before = store.ids()
    assert store.insert_batch(msgs) == []
    assert store.ids() == before
    for h in store.heads():
        assert not store.successors(h)
    assert store.heads() == {m.id for m in msgs} - {p for m in msgs for p in m.hs}


def test_truncate_needs_every_replica(keys):
    signers, _ = keys
    a, b, c = chain(signers[0], 3)
    store = MessageStore()
    store.insert_batch([a, b, c])
    assert store.truncate_stable({}) == 0
    assert store.truncate_stable({signers[0].replica: [c.id], signers[1].replica: []}) == 0
    assert len(store) == 3


def test_truncate_chain(keys):
    signers, _ = keys
    a, b, c = chain(signers[0], 3)
    store = MessageStore()
    store.insert_batch([a, b, c])
    assert store.truncate_stable({k.replica: [c.id] for k in signers}) == 2
    assert store.ids() == {c.id}
    assert store.knows(a.id) and a.id not in store
    d = Message.create(signers[1], b"d", [b.id])
    assert [m.id for m in store.insert_batch([d])] == [d.id]
    assert store.heads() == {c.id, d.id}


def test_truncate_keeps_unstable_branch(fig5, keys):
    signers, _ = keys
    store = store_of(fig5, FIG5_P)
    removed = store.truncate_stable({signers[0].replica: ids(fig5, "EM"), signers[1].replica: ids(fig5, "K")})
    assert removed == 3
    assert store.ids() == ids(fig5, "CDEKLM")


def test_truncate_keeps_old_snapshots(keys):
    signers, _ = keys
    a, b, c = chain(signers[0], 3)
    store = MessageStore()
    store.insert_batch([a, b, c])
    snap = store.snapshot()
    store.truncate_stable({k.replica: [c.id] for k in signers})
    assert snap.ids() == {a.id, b.id, c.id}


def test_persistence_round_trip(tmp_path, fig5, keys):
    signers, _ = keys
    path = tmp_path / "store.bin"
    store = MessageStore(path)
    store.insert_batch([fig5[n] for n in FIG5_P])
    assert [m.id for m in read_messages(path)] == [m.id for m in sorted(store, key=lambda m: store.seq(m.id))]
    loaded = MessageStore(path)
    assert loaded.ids() == store.ids() and loaded.heads() == store.heads()

    store.truncate_stable({k.replica: ids(fig5, "C") for k in signers})
    loaded = MessageStore(path)
    assert loaded.ids() == store.ids()
    assert loaded.tombstones == store.tombstones == ids(fig5, "AB")


def test_persistence_rejects_truncated_file(tmp_path, fig5):
    path = tmp_path / "store.bin"
    MessageStore(path).insert_batch([fig5["A"]])
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        list(read_messages(path))


def test_fig5_edges_cover_both_stores():
    assert set(FIG5_P) | set(FIG5_Q) == set(FIG5_EDGES)
