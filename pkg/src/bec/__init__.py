"""Byzantine causal broadcast over a signed hash DAG, with eventually
consistent relational replication on top."""

from .bloom import BloomFilter, bloom_member, decode_bloom, encode_bloom, make_bloom
from .crypto import Hash, KeyDirectory, ReplicaId, SigningKey, check, encode_payload, hash_bytes, make_keys, sign
from .dag import Message, MessageStore, StoreSnapshot, messages_since, topo_sort
from .db import (
    THIS_HASH,
    BECReplica,
    ReplicatedState,
    Schema,
    Transaction,
    TupleTriple,
    UpdateSet,
    commit_transaction,
    is_safe,
)
from .sync import BroadcastConfig, Connection, Outgoing, PeerHeadsStore, Phase, Protocol, Replica
from .wire import Heads, HeadsV2, Msgs, Needs, decode_wire, encode_wire

__version__ = "0.1.0"

__all__ = [
    "BECReplica",
    "BloomFilter",
    "BroadcastConfig",
    "Connection",
    "Hash",
    "Heads",
    "HeadsV2",
    "KeyDirectory",
    "Message",
    "MessageStore",
    "Msgs",
    "Needs",
    "Outgoing",
    "PeerHeadsStore",
    "Phase",
    "Protocol",
    "Replica",
    "ReplicaId",
    "ReplicatedState",
    "Schema",
    "SigningKey",
    "StoreSnapshot",
    "THIS_HASH",
    "Transaction",
    "TupleTriple",
    "UpdateSet",
    "bloom_member",
    "check",
    "commit_transaction",
    "decode_bloom",
    "decode_wire",
    "encode_bloom",
    "encode_payload",
    "encode_wire",
    "hash_bytes",
    "is_safe",
    "make_bloom",
    "make_keys",
    "messages_since",
    "sign",
    "topo_sort",
]
