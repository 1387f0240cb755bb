"""Canonical encoding, hashing and Ed25519 signatures over a static key directory."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

Hash = bytes
Signature = bytes

HASH_LEN = 32
SIG_LEN = 64
PAYLOAD_VERSION = 1


def hash_bytes(data: bytes) -> Hash:
    return hashlib.sha256(data).digest()


def encode_payload(value: bytes, hs: Iterable[Hash]) -> bytes:
    """Encode a (value, predecessor hashes) pair canonically.

    Layout: version byte, u32 value length, value, u32 hash count, then the
    hashes in ascending byte order. The empty pair encodes to 9 bytes.
    """
    hashes = sorted(set(hs))
    for h in hashes:
        if len(h) != HASH_LEN:
            raise ValueError(f"hash must be {HASH_LEN} bytes, got {len(h)}")
    return b"".join(
        [
            struct.pack(">BI", PAYLOAD_VERSION, len(value)),
            value,
            struct.pack(">I", len(hashes)),
            *hashes,
        ]
    )


def decode_payload(data: bytes, offset: int = 0) -> tuple[bytes, frozenset[Hash], int]:
    """Inverse of encode_payload; returns (value, hs, end offset)."""
    if len(data) - offset < 5:
        raise ValueError("truncated payload header")
    version, vlen = struct.unpack_from(">BI", data, offset)
    if version != PAYLOAD_VERSION:
        raise ValueError(f"unknown payload version {version}")
    pos = offset + 5
    if len(data) - pos < vlen + 4:
        raise ValueError("truncated payload value")
    value = bytes(data[pos : pos + vlen])
    pos += vlen
    (count,) = struct.unpack_from(">I", data, pos)
    pos += 4
    if len(data) - pos < count * HASH_LEN:
        raise ValueError("truncated predecessor hashes")
    hashes = [bytes(data[pos + i * HASH_LEN : pos + (i + 1) * HASH_LEN]) for i in range(count)]
    pos += count * HASH_LEN
    if any(a >= b for a, b in zip(hashes, hashes[1:])):
        raise ValueError("predecessor hashes not strictly ascending")
    return value, frozenset(hashes), pos


@dataclass(frozen=True, order=True)
class ReplicaId:
    public_key: bytes
    display_name: str = field(default="", compare=False)

    def __str__(self) -> str:
        return self.display_name or self.public_key.hex()[:8]

    def __repr__(self) -> str:
        return f"ReplicaId({self})"


class SigningKey:
    """An Ed25519 private key paired with the replica identity it signs for."""

    def __init__(self, private: Ed25519PrivateKey, name: str = ""):
        self._private = private
        raw = private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        self.replica = ReplicaId(raw, name)

    @classmethod
    def from_seed(cls, seed: bytes, name: str = "") -> "SigningKey":
        return cls(Ed25519PrivateKey.from_private_bytes(hash_bytes(seed)), name)

    @classmethod
    def from_hex(cls, hex_key: str, name: str = "") -> "SigningKey":
        return cls(Ed25519PrivateKey.from_private_bytes(bytes.fromhex(hex_key)), name)

    def private_hex(self) -> str:
        return self._private.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption()).hex()

    def sign(self, payload: bytes) -> Signature:
        return self._private.sign(payload)


def sign(key: SigningKey, payload: bytes) -> Signature:
    return key.sign(payload)


class KeyDirectory:
    """The static map of replicas whose signatures are accepted.

    Verification results are memoised; the directory never changes after
    construction so the memo is a pure cache.
    """

    def __init__(self, replicas: Iterable[ReplicaId]):
        self._by_key: dict[bytes, ReplicaId] = {}
        for r in replicas:
            if r.public_key in self._by_key:
                raise ValueError(f"duplicate key for {r}")
            if any(o.display_name == r.display_name and r.display_name for o in self._by_key.values()):
                raise ValueError(f"duplicate replica name {r.display_name!r}")
            self._by_key[r.public_key] = r
        self._verifiers = {k: Ed25519PublicKey.from_public_bytes(k) for k in self._by_key}
        self._memo: dict[tuple[bytes, bytes], ReplicaId | None] = {}

    def __iter__(self) -> Iterator[ReplicaId]:
        return iter(sorted(self._by_key.values()))

    def __len__(self) -> int:
        return len(self._by_key)

    def __contains__(self, replica: object) -> bool:
        return isinstance(replica, ReplicaId) and replica.public_key in self._by_key

    def by_name(self, name: str) -> ReplicaId:
        for r in self._by_key.values():
            if r.display_name == name:
                return r
        raise KeyError(name)

    def check(self, payload: bytes, sig: Signature) -> ReplicaId | None:
        if len(sig) != SIG_LEN:
            return None
        memo_key = (payload, sig)
        if memo_key in self._memo:
            return self._memo[memo_key]
        signer = None
        for key, verifier in self._verifiers.items():
            try:
                verifier.verify(sig, payload)
            except InvalidSignature:
                continue
            signer = self._by_key[key]
            break
        self._memo[memo_key] = signer
        return signer

    def record_signature(self, payload: bytes, sig: Signature, signer: ReplicaId) -> None:
        """Remember a signature this process just made with ``signer``'s key.

        Verification is a pure function of the bytes, so this only saves
        work; a tampered copy has different bytes and is checked normally.
        """
        if signer in self:
            self._memo[(payload, sig)] = signer

    @classmethod
    def load(cls, path: str | Path) -> "KeyDirectory":
        replicas = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'name hex_public_key'")
            name, hex_key = parts
            key = bytes.fromhex(hex_key)
            if len(key) != 32:
                raise ValueError(f"{path}:{lineno}: public key must be 32 bytes")
            replicas.append(ReplicaId(key, name))
        return cls(replicas)

    def dump(self, path: str | Path) -> None:
        lines = [f"{r.display_name} {r.public_key.hex()}" for r in self]
        Path(path).write_text("\n".join(lines) + "\n")


def check(payload: bytes, sig: Signature, directory: KeyDirectory) -> ReplicaId | None:
    """Return the directory replica whose key produced ``sig``, or None."""
    return directory.check(payload, sig)


def make_keys(names: Iterable[str], seed: int | str = 0) -> tuple[list[SigningKey], KeyDirectory]:
    """Deterministically derive one signing key per name and the matching directory."""
    keys = [SigningKey.from_seed(f"bec:{seed}:{n}".encode(), n) for n in names]
    return keys, KeyDirectory(k.replica for k in keys)
