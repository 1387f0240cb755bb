"""Signed messages and the predecessor-closed DAG of delivered messages."""

from __future__ import annotations

import heapq
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .crypto import (
    HASH_LEN,
    SIG_LEN,
    Hash,
    KeyDirectory,
    ReplicaId,
    Signature,
    SigningKey,
    decode_payload,
    encode_payload,
    hash_bytes,
)
from .errors import CycleDetected, DanglingPredecessor


@dataclass(frozen=True, eq=False)
class Message:
    """A broadcast triple (value, hs, sig).

    ``id`` is the SHA-256 of the payload encoding followed by the signature,
    so two replicas signing the same (value, hs) still produce distinct
    vertices.
    """

    value: bytes
    hs: frozenset
    sig: Signature
    payload: bytes = field(repr=False)
    id: Hash = field(repr=False)

    @classmethod
    def build(cls, value: bytes, hs: Iterable[Hash], sig: Signature) -> "Message":
        hs = frozenset(hs)
        payload = encode_payload(value, hs)
        return cls(value, hs, sig, payload, hash_bytes(payload + sig))

    @classmethod
    def create(cls, key: SigningKey, value: bytes, hs: Iterable[Hash]) -> "Message":
        hs = frozenset(hs)
        payload = encode_payload(value, hs)
        sig = key.sign(payload)
        return cls(value, hs, sig, payload, hash_bytes(payload + sig))

    def encode(self) -> bytes:
        return self.payload + self.sig

    @classmethod
    def decode(cls, data: bytes) -> "Message":
        value, hs, end = decode_payload(data)
        if len(data) - end != SIG_LEN:
            raise ValueError("message must end with a 64-byte signature")
        return cls(value, hs, bytes(data[end:]), bytes(data[:end]), hash_bytes(bytes(data)))

    def sender(self, directory: KeyDirectory) -> ReplicaId | None:
        return directory.check(self.payload, self.sig)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Message) and other.id == self.id

    def __hash__(self) -> int:
        return hash(self.id)

    def __lt__(self, other: "Message") -> bool:
        return self.id < other.id

    def short(self) -> str:
        return self.id.hex()[:8]


def topo_sort(new_msgs: Iterable[Message], snapshot: "DagView | None" = None) -> list[Message]:
    """Order messages so predecessors come first; concurrent ones by ascending id.

    Only edges between members of ``new_msgs`` constrain the order; the
    snapshot argument is accepted for symmetry with the protocol text but
    messages already in it impose no constraint on the new ones.
    """
    by_id = {m.id: m for m in new_msgs}
    indegree = {h: 0 for h in by_id}
    children: dict[Hash, list[Hash]] = {h: [] for h in by_id}
    for m in by_id.values():
        for p in m.hs:
            if p in by_id:
                indegree[m.id] += 1
                children[p].append(m.id)
    ready = [h for h, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        h = heapq.heappop(ready)
        out.append(by_id[h])
        for c in children[h]:
            indegree[c] -= 1
            if indegree[c] == 0:
                heapq.heappush(ready, c)
    if len(out) != len(by_id):
        raise CycleDetected(f"{len(by_id) - len(out)} messages lie on a predecessor cycle")
    return out


class DagView:
    """Read operations shared by the live store and its snapshots.

    Subclasses provide ``_msgs``, ``_seq``, ``_succ``, ``_tomb`` and
    ``_limit``; a message is visible when its sequence number is below the
    limit.
    """

    _msgs: dict[Hash, Message]
    _seq: dict[Hash, int]
    _succ: dict[Hash, set[Hash]]
    _tomb: set[Hash] | frozenset[Hash]

    def _limit_value(self) -> float:
        raise NotImplementedError

    def __contains__(self, h: object) -> bool:
        s = self._seq.get(h)  # type: ignore[arg-type]
        return s is not None and s < self._limit_value()

    def get(self, h: Hash) -> Message | None:
        return self._msgs.get(h) if h in self else None

    def __getitem__(self, h: Hash) -> Message:
        if h not in self:
            raise KeyError(h.hex())
        return self._msgs[h]

    def knows(self, h: Hash) -> bool:
        """True for visible messages and for hashes removed by truncation."""
        return h in self or h in self._tomb

    def seq(self, h: Hash) -> int:
        return self._seq[h]

    def __iter__(self) -> Iterator[Message]:
        lim = self._limit_value()
        return (self._msgs[h] for h, s in list(self._seq.items()) if s < lim)

    def __len__(self) -> int:
        lim = self._limit_value()
        return sum(1 for s in list(self._seq.values()) if s < lim)

    def ids(self) -> set[Hash]:
        lim = self._limit_value()
        return {h for h, s in list(self._seq.items()) if s < lim}

    @property
    def tombstones(self) -> frozenset[Hash]:
        return frozenset(self._tomb)

    def heads(self) -> set[Hash]:
        raise NotImplementedError

    def successors(self, h: Hash) -> set[Hash]:
        lim = self._limit_value()
        return {s for s in self._succ.get(h, ()) if self._seq[s] < lim}

    def predecessors(self, h: Hash) -> set[Hash]:
        return {p for p in self._msgs[h].hs if p in self}

    def succ_star(self, m: Message | Hash) -> set[Message]:
        return {self._msgs[h] for h in self._closure([_hid(m)], self.successors)}

    def pred_star(self, m: Message | Hash) -> set[Message]:
        return {self._msgs[h] for h in self._closure([_hid(m)], self.predecessors)}

    def succ_star_many(self, starts: Iterable[Hash]) -> set[Hash]:
        """Union of succ_star over ``starts`` (starts themselves excluded unless reachable)."""
        return self._closure(list(starts), self.successors)

    def pred_star_many(self, starts: Iterable[Hash]) -> set[Hash]:
        return self._closure([h for h in starts if h in self], self.predecessors)

    @staticmethod
    def _closure(starts: list[Hash], step) -> set[Hash]:
        seen: set[Hash] = set()
        todo = deque()
        for h in starts:
            todo.extend(step(h))
        while todo:
            h = todo.popleft()
            if h in seen:
                continue
            seen.add(h)
            todo.extend(step(h))
        return seen

    def is_ancestor(self, a: Hash, b: Hash) -> bool:
        """True iff ``a`` is in pred_star of ``b``."""
        if a not in self or b not in self:
            return False
        floor = self._seq[a]
        seen = set()
        todo = [b]
        while todo:
            h = todo.pop()
            for p in self._msgs[h].hs:
                if p == a:
                    return True
                if p in seen or p not in self or self._seq[p] < floor:
                    continue
                seen.add(p)
                todo.append(p)
        return False

    def messages_since(self, old_heads: Iterable[Hash]) -> set[Message]:
        """Messages that are neither among ``old_heads`` nor their predecessors.

        Walks down from the current heads in descending insertion order,
        painting vertices reachable from the old heads, and stops once every
        pending vertex is known to be covered by them.
        """
        known = [h for h in set(old_heads) if h in self]
        if not known:
            return set(self)
        NEW, OLD = 1, 2
        paint: dict[Hash, int] = {}
        heap: list[tuple[int, Hash]] = []
        new_only = 0

        def mark(h: Hash, flag: int) -> None:
            nonlocal new_only
            prev = paint.get(h, 0)
            cur = prev | flag
            if cur == prev:
                return
            paint[h] = cur
            if prev == 0:
                heapq.heappush(heap, (-self._seq[h], h))
                if cur == NEW:
                    new_only += 1
            elif prev == NEW:
                new_only -= 1

        for h in self.heads():
            mark(h, NEW)
        for h in known:
            mark(h, OLD)
        out = set()
        while heap and new_only > 0:
            _, h = heapq.heappop(heap)
            flag = paint[h]
            if flag == NEW:
                new_only -= 1
                out.add(self._msgs[h])
            for p in self._msgs[h].hs:
                if p in self:
                    mark(p, flag & OLD or NEW)
        return out


def _hid(m: Message | Hash) -> Hash:
    return m.id if isinstance(m, Message) else m


class StoreSnapshot(DagView):
    """Immutable view of a store at the moment it was taken."""

    def __init__(self, store: "MessageStore"):
        self._msgs = store._msgs
        self._seq = store._seq
        self._succ = store._succ
        self._tomb = frozenset(store._tomb)
        self._limit = store._next_seq
        self._heads = frozenset(store._heads)

    def _limit_value(self) -> float:
        return self._limit

    def heads(self) -> set[Hash]:
        return set(self._heads)


_RECORD = struct.Struct(">I")


class MessageStore(DagView):
    """The growing set of delivered messages held by one replica.

    Insertion assigns increasing sequence numbers in topological order, so a
    snapshot is just the prefix below a sequence limit. Truncation swaps in
    fresh containers rather than mutating, which keeps older snapshots
    intact.
    """

    def __init__(self, path: str | Path | None = None):
        self._msgs: dict[Hash, Message] = {}
        self._seq: dict[Hash, int] = {}
        self._succ: dict[Hash, set[Hash]] = {}
        self._tomb: set[Hash] = set()
        self._heads: set[Hash] = set()
        self._next_seq = 0
        self.lock = threading.RLock()
        self.path = Path(path) if path is not None else None
        if self.path is not None and self.path.exists():
            self._load()

    def _limit_value(self) -> float:
        return float("inf")

    def heads(self) -> set[Hash]:
        return set(self._heads)

    def snapshot(self) -> StoreSnapshot:
        with self.lock:
            return StoreSnapshot(self)

    def insert_batch(self, msgs: Iterable[Message]) -> list[Message]:
        """Add ``msgs``; return the newly added ones in delivery order."""
        with self.lock:
            fresh = {m.id: m for m in msgs if m.id not in self._seq}
            for m in fresh.values():
                for p in m.hs:
                    if p not in fresh and not self.knows(p):
                        raise DanglingPredecessor(m.id, p)
            ordered = topo_sort(fresh.values())
            for m in ordered:
                self._seq[m.id] = self._next_seq
                self._next_seq += 1
                self._msgs[m.id] = m
                for p in m.hs:
                    self._succ.setdefault(p, set()).add(m.id)
                    self._heads.discard(p)
                if not self._succ.get(m.id):
                    self._heads.add(m.id)
            if ordered and self.path is not None:
                with open(self.path, "ab") as f:
                    for m in ordered:
                        data = m.encode()
                        f.write(_RECORD.pack(len(data)) + data)
            return ordered

    def truncate_stable(self, latest_heads: Mapping[ReplicaId, Iterable[Hash]]) -> int:
        """Drop messages that every replica has provably delivered a successor of.

        ``latest_heads`` must contain an entry for every replica. Head hashes
        this store does not hold are ignored, which can only make the result
        more conservative.
        """
        with self.lock:
            if not latest_heads:
                return 0
            stable: set[Hash] | None = None
            for heads in latest_heads.values():
                known = [h for h in heads if h in self]
                if not known:
                    return 0
                below = self.pred_star_many(known)
                stable = below if stable is None else stable & below
            if not stable:
                return 0
            self._msgs = {h: m for h, m in self._msgs.items() if h not in stable}
            self._seq = {h: s for h, s in self._seq.items() if h not in stable}
            self._succ = {
                h: {s for s in ss if s not in stable}
                for h, ss in self._succ.items()
                if h not in stable
            }
            self._tomb = set(self._tomb) | stable
            if self.path is not None:
                self._rewrite()
            return len(stable)

    def _rewrite(self) -> None:
        assert self.path is not None
        order = sorted(self._seq, key=self._seq.__getitem__)
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            for h in order:
                data = self._msgs[h].encode()
                f.write(_RECORD.pack(len(data)) + data)
        tmp.replace(self.path)
        self._tomb_path().write_bytes(b"".join(sorted(self._tomb)))

    def _tomb_path(self) -> Path:
        assert self.path is not None
        return self.path.with_suffix(self.path.suffix + ".tomb")

    def _load(self) -> None:
        assert self.path is not None
        tp = self._tomb_path()
        if tp.exists():
            raw = tp.read_bytes()
            self._tomb = {raw[i : i + HASH_LEN] for i in range(0, len(raw), HASH_LEN)}
        msgs = list(read_messages(self.path))
        path, self.path = self.path, None
        try:
            self.insert_batch(msgs)
        finally:
            self.path = path


def read_messages(path: str | Path) -> Iterator[Message]:
    data = Path(path).read_bytes()
    pos = 0
    while pos < len(data):
        if len(data) - pos < 4:
            raise ValueError(f"{path}: truncated record header at {pos}")
        (n,) = _RECORD.unpack_from(data, pos)
        pos += 4
        if len(data) - pos < n:
            raise ValueError(f"{path}: truncated record at {pos}")
        yield Message.decode(data[pos : pos + n])
        pos += n


def heads(view: DagView) -> set[Hash]:
    return view.heads()


def messages_since(view: DagView, old_heads: Iterable[Hash]) -> set[Message]:
    return view.messages_since(old_heads)
