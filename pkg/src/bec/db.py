"""Relational state replicated over causal broadcast.

The state is a set of ``(h, rel, tuple)`` triples: ``h`` is the id of the
message that inserted the tuple. A transaction's inserts and deletes travel
as one broadcast message. Every replica applies a message only when its
updates are safe for all declared invariants and every delete names a tuple
inserted by a causal predecessor, so all correct replicas make the same
decision for the same message.
"""

from __future__ import annotations

import operator
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Union

from .crypto import HASH_LEN, Hash
from .dag import DagView, Message
from .errors import MalformedValue, StaleDelete, UnknownRelation, UnsafeUpdate


class HashRef:
    """Placeholder for "the id of the message carrying this insert".

    Resolved to the hex id at delivery time, which is how an attribute value
    can be derived from a hash that does not exist until the message is
    signed.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "THIS_HASH"

    def __reduce__(self):
        return (HashRef, ())


THIS_HASH = HashRef()

Value = Union[int, str, bytes, HashRef]
ATTR_TYPES = {"int": int, "str": str, "bytes": bytes}


@dataclass(frozen=True, order=True)
class TupleTriple:
    h: Hash
    rel: str
    tuple: tuple


@dataclass(frozen=True)
class UpdateSet:
    ins: frozenset = frozenset()
    dels: frozenset = frozenset()

    @classmethod
    def of(cls, ins: Iterable[tuple[str, tuple]] = (), dels: Iterable[TupleTriple] = ()) -> "UpdateSet":
        return cls(frozenset((r, tuple(t)) for r, t in ins), frozenset(dels))

    def is_empty(self) -> bool:
        return not self.ins and not self.dels

    def relations(self) -> set[str]:
        return {r for r, _ in self.ins} | {d.rel for d in self.dels}

    def encode(self) -> bytes:
        ins = sorted(_enc_str(r) + _enc_tuple(t) for r, t in self.ins)
        dels = sorted(d.h + _enc_str(d.rel) + _enc_tuple(d.tuple) for d in self.dels)
        return b"".join([_U32.pack(len(ins)), *ins, _U32.pack(len(dels)), *dels])

    @classmethod
    def decode(cls, data: bytes) -> "UpdateSet":
        r = _Reader(data)
        try:
            ins = [(r.str(), r.tuple()) for _ in range(r.u32())]
            dels = []
            for _ in range(r.u32()):
                h = r.take(HASH_LEN)
                dels.append(TupleTriple(h, r.str(), r.tuple()))
        except (struct.error, UnicodeDecodeError, IndexError) as exc:
            raise MalformedValue(str(exc)) from exc
        if r.pos != len(data):
            raise MalformedValue("trailing bytes after update set")
        return cls.of(ins, dels)


_U32 = struct.Struct(">I")
_I64 = struct.Struct(">q")
_T_INT, _T_STR, _T_BYTES, _T_REF = range(4)


def _enc_str(s: str) -> bytes:
    raw = s.encode()
    return _U32.pack(len(raw)) + raw


def _enc_value(v: Value) -> bytes:
    if isinstance(v, bool):
        raise TypeError("booleans are not a supported attribute type")
    if isinstance(v, int):
        return bytes([_T_INT]) + _I64.pack(v)
    if isinstance(v, str):
        return bytes([_T_STR]) + _enc_str(v)
    if isinstance(v, (bytes, bytearray)):
        return bytes([_T_BYTES]) + _U32.pack(len(v)) + bytes(v)
    if v is THIS_HASH:
        return bytes([_T_REF])
    raise TypeError(f"unsupported attribute value {v!r}")


def _enc_tuple(t: tuple) -> bytes:
    return _U32.pack(len(t)) + b"".join(_enc_value(v) for v in t)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if len(self.data) - self.pos < n:
            raise MalformedValue("truncated update set")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return bytes(out)

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode()

    def tuple(self) -> tuple:
        n = self.u32()
        if n > len(self.data):
            raise MalformedValue("tuple arity exceeds message size")
        out = []
        for _ in range(n):
            tag = self.take(1)[0]
            if tag == _T_INT:
                out.append(_I64.unpack(self.take(8))[0])
            elif tag == _T_STR:
                out.append(self.str())
            elif tag == _T_BYTES:
                out.append(self.take(self.u32()))
            elif tag == _T_REF:
                out.append(THIS_HASH)
            else:
                raise MalformedValue(f"unknown value tag {tag}")
        return tuple(out)


# -- schema ---------------------------------------------------------------


@dataclass(frozen=True)
class Relation:
    name: str
    attrs: tuple  # of (attr name, type name)

    def index(self, attr: str) -> int:
        for i, (a, _) in enumerate(self.attrs):
            if a == attr:
                return i
        raise KeyError(f"{self.name} has no attribute {attr!r}")

    def well_typed(self, t: tuple, allow_ref: bool = False) -> bool:
        if len(t) != len(self.attrs):
            return False
        for v, (_, ty) in zip(t, self.attrs):
            if v is THIS_HASH:
                if not allow_ref or ty != "str":
                    return False
            elif isinstance(v, bool) or not isinstance(v, ATTR_TYPES[ty]):
                return False
        return True


_OPS = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "==": operator.eq,
    "!=": operator.ne,
}


@dataclass(frozen=True)
class Comparison:
    """Row predicate ``attr <op> literal``, usable from config files."""

    attr: str
    op: str
    literal: Any

    def __call__(self, row: Mapping[str, Any]) -> bool:
        return _OPS[self.op](row[self.attr], self.literal)

    def __str__(self) -> str:
        return f"{self.attr} {self.op} {self.literal!r}"


@dataclass(frozen=True)
class RowCheck:
    rel: str
    predicate: Callable[[Mapping[str, Any]], bool]
    label: str = ""

    def unsafe(self, u: UpdateSet, schema: "Schema") -> str | None:
        rel = schema.relation(self.rel)
        for r, t in u.ins:
            if r != self.rel:
                continue
            try:
                ok = bool(self.predicate(dict(zip((a for a, _ in rel.attrs), t))))
            except Exception:
                ok = False
            if not ok:
                return f"insert into {r} violates check {self.label or self.predicate}"
        return None

    def holds(self, state: "ReplicatedState") -> bool:
        rel = state.schema.relation(self.rel)
        names = [a for a, _ in rel.attrs]
        for t in state.tuples(self.rel):
            try:
                if not self.predicate(dict(zip(names, t))):
                    return False
            except Exception:
                return False
        return True


@dataclass(frozen=True)
class NonNegative:
    rel: str
    attr: str

    def unsafe(self, u: UpdateSet, schema: "Schema") -> str | None:
        rel = schema.relation(self.rel)
        i = rel.index(self.attr)

        def rest(t):
            return t[:i] + t[i + 1 :]

        groups: dict[tuple, tuple[list, list]] = {}
        for r, t in u.ins:
            if r != self.rel:
                continue
            if not isinstance(t[i], int) or t[i] < 0:
                return f"insert into {r} with negative {self.attr}"
            groups.setdefault(rest(t), ([], []))[0].append(t[i])
        for d in u.dels:
            if d.rel != self.rel:
                continue
            if len(d.tuple) != len(rel.attrs) or not isinstance(d.tuple[i], int):
                return f"malformed delete from {d.rel}"
            groups.setdefault(rest(d.tuple), ([], []))[1].append(d.tuple[i])
        for new, old in groups.values():
            if len(old) > len(new):
                return f"delete from {self.rel} without matching re-insert"
            new = sorted(new, reverse=True)
            for n, o in zip(new, sorted(old, reverse=True)):
                if n < o:
                    return f"subtracts {o - n} from {self.rel}.{self.attr}"
        return None

    def holds(self, state: "ReplicatedState") -> bool:
        i = state.schema.relation(self.rel).index(self.attr)
        return all(t[i] >= 0 for t in state.tuples(self.rel))


@dataclass(frozen=True)
class ForeignKey:
    src_rel: str
    src_attr: str
    dst_rel: str
    dst_attr: str

    def unsafe(self, u: UpdateSet, schema: "Schema") -> str | None:
        if any(d.rel == self.dst_rel for d in u.dels):
            return f"deletes from foreign-key target {self.dst_rel}"
        return None

    def holds(self, state: "ReplicatedState") -> bool:
        si = state.schema.relation(self.src_rel).index(self.src_attr)
        di = state.schema.relation(self.dst_rel).index(self.dst_attr)
        targets = {t[di] for t in state.tuples(self.dst_rel)}
        return all(t[si] in targets for t in state.tuples(self.src_rel))


@dataclass(frozen=True)
class Unique:
    rel: str
    attr: str
    hash_derived: bool = False

    def unsafe(self, u: UpdateSet, schema: "Schema") -> str | None:
        i = schema.relation(self.rel).index(self.attr)
        derived = 0
        for r, t in u.ins:
            if r != self.rel:
                continue
            if not self.hash_derived or t[i] is not THIS_HASH:
                return f"inserts user-chosen {self.rel}.{self.attr}"
            derived += 1
        if derived > 1:
            return f"two inserts into {self.rel} derive {self.attr} from the same hash"
        return None

    def holds(self, state: "ReplicatedState") -> bool:
        i = state.schema.relation(self.rel).index(self.attr)
        vals = [t[i] for t in state.tuples(self.rel)]
        return len(vals) == len(set(vals))


@dataclass(frozen=True)
class CountView:
    source: str

    def __call__(self, state: "ReplicatedState") -> frozenset:
        return frozenset({(len(state.tuples(self.source)),)})


@dataclass(frozen=True)
class SumView:
    source: str
    attr: str

    def __call__(self, state: "ReplicatedState") -> frozenset:
        i = state.schema.relation(self.source).index(self.attr)
        return frozenset({(sum(t[i] for t in state.tuples(self.source)),)})


@dataclass(frozen=True)
class MaterializedView:
    rel: str
    query: Callable[["ReplicatedState"], frozenset]

    def unsafe(self, u: UpdateSet, schema: "Schema") -> str | None:
        # The view is derived; writing it directly would desynchronise it.
        if self.rel in u.relations():
            return f"writes materialized view {self.rel} directly"
        return None

    def holds(self, state: "ReplicatedState") -> bool:
        return state.views.get(self.rel, frozenset()) == self.query(state)


InvariantSpec = Union[RowCheck, NonNegative, ForeignKey, Unique, MaterializedView]


@dataclass
class Schema:
    relations: dict = field(default_factory=dict)
    invariants: list = field(default_factory=list)
    # value bytes -> (UpdateSet | None, reason); safety never reads state, so
    # every replica sharing this schema can share the verdicts.
    _verdicts: dict = field(default_factory=dict, repr=False, compare=False)
    _fks: list | None = field(default=None, repr=False, compare=False)

    def _invalidate(self) -> None:
        self._verdicts.clear()
        self._fks = None

    def verdict(self, value: bytes) -> tuple[UpdateSet | None, str | None]:
        """Decode ``value`` and decide safety, caching the answer."""
        hit = self._verdicts.get(value)
        if hit is None:
            try:
                u = UpdateSet.decode(value)
                why = unsafe_reason(u, self.invariants, self)
            except (MalformedValue, UnknownRelation) as exc:
                hit = (None, f"{type(exc).__name__}: {exc}")
            else:
                hit = (None, why) if why else (u, None)
            self._verdicts[value] = hit
        return hit

    def relation(self, name: str) -> Relation:
        try:
            return self.relations[name]
        except KeyError:
            raise UnknownRelation(name) from None

    def add_relation(self, name: str, *attrs: tuple[str, str]) -> Relation:
        for _, ty in attrs:
            if ty not in ATTR_TYPES:
                raise ValueError(f"unknown attribute type {ty!r}")
        rel = Relation(name, tuple(attrs))
        self.relations[name] = rel
        self._invalidate()
        return rel

    def foreign_keys(self) -> list[tuple[ForeignKey, int, int]]:
        """Foreign keys with their source and target column positions."""
        if self._fks is None:
            self._fks = [
                (i, self.relation(i.src_rel).index(i.src_attr), self.relation(i.dst_rel).index(i.dst_attr))
                for i in self.invariants
                if isinstance(i, ForeignKey)
            ]
        return self._fks

    def views(self) -> list[MaterializedView]:
        return [i for i in self.invariants if isinstance(i, MaterializedView)]

    @classmethod
    def parse(cls, text: str) -> "Schema":
        """Read relation and invariant declarations, one per line.

        ::

            relation accounts owner:str balance:int
            check orders qty > 0
            nonnegative accounts balance
            foreign_key orders item -> items id
            unique items id hash_derived
            view n_items count items
            view total sum accounts balance
        """
        schema = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            words = line.split("#", 1)[0].split()
            if not words:
                continue
            kind, args = words[0], words[1:]
            try:
                schema._declare(kind, args)
            except (ValueError, KeyError, IndexError, UnknownRelation) as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
        return schema

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        return cls.parse(Path(path).read_text())

    def _declare(self, kind: str, args: list[str]) -> None:
        self._invalidate()
        if kind == "relation":
            self.add_relation(args[0], *(tuple(a.split(":", 1)) for a in args[1:]))
        elif kind == "check":
            rel, attr, op, lit = args
            if op not in _OPS:
                raise ValueError(f"unknown operator {op}")
            ty = self.relation(rel).attrs[self.relation(rel).index(attr)][1]
            value = int(lit) if ty == "int" else lit
            self.invariants.append(RowCheck(rel, Comparison(attr, op, value), " ".join(args[1:])))
        elif kind == "nonnegative":
            self.relation(args[0]).index(args[1])
            self.invariants.append(NonNegative(args[0], args[1]))
        elif kind == "foreign_key":
            src, sattr, arrow, dst, dattr = args
            if arrow != "->":
                raise ValueError("expected 'foreign_key src attr -> dst attr'")
            self.relation(src).index(sattr)
            self.relation(dst).index(dattr)
            self.invariants.append(ForeignKey(src, sattr, dst, dattr))
        elif kind == "unique":
            self.relation(args[0]).index(args[1])
            derived = args[2:] == ["hash_derived"]
            if args[2:] and not derived:
                raise ValueError(f"unexpected {' '.join(args[2:])}")
            self.invariants.append(Unique(args[0], args[1], derived))
        elif kind == "view":
            name, fn, *rest = args
            if fn == "count":
                self.relation(rest[0])
                q: Callable = CountView(rest[0])
            elif fn == "sum":
                self.relation(rest[0]).index(rest[1])
                q = SumView(rest[0], rest[1])
            else:
                raise ValueError(f"unknown view function {fn}")
            self.invariants.append(MaterializedView(name, q))
        else:
            raise ValueError(f"unknown declaration {kind!r}")


def unsafe_reason(u: UpdateSet, invariants: Iterable[InvariantSpec], schema: Schema) -> str | None:
    views = {v.rel for v in schema.views()}
    for r in u.relations():
        if r not in schema.relations and r not in views:
            raise UnknownRelation(r)
    for r, t in u.ins:
        if r in schema.relations and not schema.relations[r].well_typed(t, allow_ref=True):
            return f"ill-typed insert into {r}"
    for d in u.dels:
        if d.rel in schema.relations and not schema.relations[d.rel].well_typed(d.tuple):
            return f"ill-typed delete from {d.rel}"
        if len(d.h) != HASH_LEN:
            return "delete names a malformed hash"
    for inv in invariants:
        why = inv.unsafe(u, schema)
        if why:
            return why
    return None


def is_safe(u: UpdateSet, invariants: Iterable[InvariantSpec], schema: Schema) -> bool:
    """Decide safety from the updates and invariants alone; never reads state."""
    return unsafe_reason(u, invariants, schema) is None


def resolve(t: tuple, h: Hash) -> tuple:
    return tuple(h.hex() if v is THIS_HASH else v for v in t)


class ReplicatedState:
    """The local copy of the replicated relations."""

    def __init__(self, schema: Schema, check_causality: bool = True):
        self.schema = schema
        self.S: set[TupleTriple] = set()
        self.views: dict[str, frozenset] = {}
        self.lock = threading.RLock()
        self.applied: list[Hash] = []
        self.ignored: dict[Hash, str] = {}
        # Only cleared by mutation tests of the convergence checker.
        self.check_causality = check_causality
        self._by_rel: dict[str, set[TupleTriple]] = {}
        self.refresh_materialized_views()

    def tuples(self, rel: str) -> list[tuple]:
        return [x.tuple for x in self._by_rel.get(rel, ())]

    def decide(self, m: Message, dag: DagView) -> tuple[UpdateSet | None, str | None]:
        """Return (resolved updates, None) if ``m`` applies, else (None, reason)."""
        u, why = self.schema.verdict(m.value)
        if u is None:
            return None, why
        if self.check_causality:
            for d in u.dels:
                if not dag.is_ancestor(d.h, m.id):
                    return None, f"deletes tuple from {d.h.hex()[:8]} which does not causally precede"
        ins = frozenset((r, resolve(t, m.id)) for r, t in u.ins)
        why = self._dangling_reference(ins, m, dag)
        if why:
            return None, why
        return UpdateSet(ins, u.dels), None

    def _dangling_reference(self, ins: frozenset, m: Message, dag: DagView) -> str | None:
        # Targets are never deleted, so a target inserted by a causal
        # predecessor is present at every replica when m is delivered.
        for fk, si, di in self.schema.foreign_keys():
            for r, t in ins:
                if r != fk.src_rel:
                    continue
                v = t[si]
                if any(r2 == fk.dst_rel and t2[di] == v for r2, t2 in ins):
                    continue
                if not any(
                    x.tuple[di] == v and dag.is_ancestor(x.h, m.id)
                    for x in self._by_rel.get(fk.dst_rel, ())
                ):
                    return f"{fk.src_rel}.{fk.src_attr}={v!r} has no causally preceding target"
        return None

    def on_deliver(self, m: Message, dag: DagView) -> bool:
        with self.lock:
            u, why = self.decide(m, dag)
            if u is None:
                self.ignored[m.id] = why or ""
                return False
            for d in u.dels:
                if d in self.S:
                    self.S.discard(d)
                    self._by_rel[d.rel].discard(d)
            for r, t in u.ins:
                x = TupleTriple(m.id, r, t)
                self.S.add(x)
                self._by_rel.setdefault(r, set()).add(x)
            self.applied.append(m.id)
            self.refresh_materialized_views()
            return True

    def refresh_materialized_views(self) -> None:
        with self.lock:
            for v in self.schema.views():
                self.views[v.rel] = v.query(self)

    def query(self, rel: str) -> set[tuple[Hash, tuple]]:
        with self.lock:
            if rel in self.views:
                return {(bytes(HASH_LEN), t) for t in self.views[rel]}
            self.schema.relation(rel)
            return {(x.h, x.tuple) for x in self._by_rel.get(rel, ())}

    def violated(self) -> list[InvariantSpec]:
        with self.lock:
            return [inv for inv in self.schema.invariants if not inv.holds(self)]

    def canonical(self) -> bytes:
        """Byte-exact serialisation used to compare replicas."""
        with self.lock:
            rows = sorted(x.h + _enc_str(x.rel) + _enc_tuple(x.tuple) for x in self.S)
            views = sorted(_enc_str(k) + b"".join(sorted(_enc_tuple(t) for t in v)) for k, v in self.views.items())
            return b"".join([_U32.pack(len(rows)), *rows, _U32.pack(len(views)), *views])


@dataclass
class Transaction:
    """Updates accumulated by a local transaction before commit.

    Reads go straight to the replica's current state; the isolation level
    is read committed.
    """

    state: ReplicatedState
    ins: set = field(default_factory=set)
    dels: set = field(default_factory=set)

    def read(self, rel: str) -> set[tuple[Hash, tuple]]:
        return self.state.query(rel)

    def insert(self, rel: str, *values: Value) -> "Transaction":
        self.ins.add((rel, tuple(values)))
        return self

    def delete(self, h: Hash, rel: str, t: tuple) -> "Transaction":
        self.dels.add(TupleTriple(h, rel, tuple(t)))
        return self

    def update(self, h: Hash, rel: str, t: tuple, **changes: Value) -> "Transaction":
        r = self.state.schema.relation(rel)
        new = list(t)
        for k, v in changes.items():
            new[r.index(k)] = v
        return self.delete(h, rel, t).insert(rel, *new)

    @property
    def updates(self) -> UpdateSet:
        return UpdateSet.of(self.ins, self.dels)


class BECReplica:
    """A broadcast replica with a replicated relational state on top."""

    def __init__(self, replica, schema: Schema, check_causality: bool = True):
        self.replica = replica
        self.state = ReplicatedState(schema, check_causality)
        replica.add_listener(self._on_deliver)

    def _on_deliver(self, m: Message, replica) -> None:
        self.state.on_deliver(m, replica.store)

    def transaction(self) -> Transaction:
        return Transaction(self.state)

    def commit(self, tx: Transaction):
        """Broadcast the transaction's updates; returns (message, outgoing)."""
        u = tx.updates
        value = u.encode()
        decoded, why = self.state.schema.verdict(value)
        if decoded is None:
            raise UnsafeUpdate(why or "undecodable update set")
        with self.state.lock:
            missing = [d for d in u.dels if d not in self.state.S]
        if missing:
            raise StaleDelete(f"{len(missing)} deleted tuples are not in the local state")
        return self.replica.broadcast(value)


def commit_transaction(replica: BECReplica, tx: Transaction):
    return replica.commit(tx)
