"""OrbitCache message format and wire encoding.

Frame layout (all multi-byte integers big-endian)::

    envelope  12 B   src.node u32, src.port u16, dst.node u32, dst.port u16
    header    22 B   op u8, seq u32, hkey 16 B, flag u8
    diag       6 B   cached u8, latency u32, srv_id u8
    framing    4 B   key length u16, value length u16
    key, value

The envelope stands in for the L3/L4 addressing of a real packet; only the
22-byte header is interpreted by switch logic.

Op codes: R-REQ=1, W-REQ=2, R-REP=3, W-REP=4, F-REQ=5, F-REP=6, CRN-REQ=7.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple


class OpCode(IntEnum):
    R_REQ = 1
    W_REQ = 2
    R_REP = 3
    W_REP = 4
    F_REQ = 5
    F_REP = 6
    CRN_REQ = 7


REQUEST_OPS = frozenset({OpCode.R_REQ, OpCode.W_REQ, OpCode.F_REQ, OpCode.CRN_REQ})
REPLY_OPS = frozenset({OpCode.R_REP, OpCode.W_REP, OpCode.F_REP})

HEADER_SIZE = 22
DIAG_SIZE = 6
FRAMING_SIZE = 4
ENVELOPE_SIZE = 12
# Ethernet + IPv4 + UDP, counted only for serialization delay.
L2_L4_OVERHEAD = 42
MAX_ITEM_BYTES = 1438

# FLAG value a server uses when a read misses its store.
FLAG_NOT_FOUND = 0xFF

HASH_WIDTH = 128
_HASH_MASK = (1 << HASH_WIDTH) - 1

_HEADER = struct.Struct(">BI16sB")
_DIAG = struct.Struct(">BIB")
_FRAMING = struct.Struct(">HH")
_ENVELOPE = struct.Struct(">IHIH")
assert _HEADER.size == HEADER_SIZE


class DecodeError(ValueError):
    """Raised for truncated or inconsistent frames."""


class Address(NamedTuple):
    node: int
    port: int = 0


class Header(NamedTuple):
    op: int
    seq: int
    hkey: int
    flag: int = 0


class Meta(NamedTuple):
    """Diagnostic fields; never read by protocol logic."""

    cached: int = 0
    latency: int = 0
    srv_id: int = 0


NO_META = Meta()


@dataclass(frozen=True, slots=True)
class Message:
    header: Header
    key: bytes
    value: bytes
    src: Address
    dst: Address
    meta: Meta = NO_META

    @property
    def op(self) -> int:
        return self.header.op

    @property
    def seq(self) -> int:
        return self.header.seq

    @property
    def hkey(self) -> int:
        return self.header.hkey

    @property
    def flag(self) -> int:
        return self.header.flag

    def evolve(self, **changes) -> "Message":
        """Copy with any of header/key/value/src/dst/meta replaced."""
        return Message(
            changes.get("header", self.header),
            changes.get("key", self.key),
            changes.get("value", self.value),
            changes.get("src", self.src),
            changes.get("dst", self.dst),
            changes.get("meta", self.meta),
        )

    def wire_size(self) -> int:
        return (L2_L4_OVERHEAD + HEADER_SIZE + DIAG_SIZE + FRAMING_SIZE
                + len(self.key) + len(self.value))


def hash_key(key: bytes, bits: int = HASH_WIDTH) -> int:
    """128-bit BLAKE2b digest of ``key`` as an integer.

    ``bits < 128`` keeps only the top ``bits`` bits and zeroes the rest; this
    exists to force lookup collisions in tests.
    """
    if not key:
        raise ValueError("key must be non-empty")
    digest = int.from_bytes(hashlib.blake2b(key, digest_size=16).digest(), "big")
    if bits >= HASH_WIDTH:
        return digest
    if bits <= 0:
        raise ValueError("hash width must be positive")
    drop = HASH_WIDTH - bits
    return (digest >> drop) << drop


def validate(msg: Message, hash_bits: int = HASH_WIDTH) -> None:
    """Check the Message invariants; raise ``ValueError`` on violation."""
    try:
        op = OpCode(msg.op)
    except ValueError:
        raise ValueError(f"unknown op code {msg.op}") from None
    if len(msg.key) + len(msg.value) > MAX_ITEM_BYTES:
        raise ValueError("key+value exceeds the single-packet budget")
    if op in (OpCode.R_REQ, OpCode.W_REQ, OpCode.CRN_REQ):
        if not msg.key:
            raise ValueError(f"{op.name} requires a key")
        if msg.hkey != hash_key(msg.key, hash_bits):
            raise ValueError("hkey does not match the key")
    if not 0 <= msg.seq < 2**32:
        raise ValueError("seq out of range")
    if not 0 <= msg.flag < 256:
        raise ValueError("flag out of range")


def encode_header(header: Header) -> bytes:
    return _HEADER.pack(header.op, header.seq, (header.hkey & _HASH_MASK).to_bytes(16, "big"),
                        header.flag)


def decode_header(buf: bytes) -> Header:
    if len(buf) < HEADER_SIZE:
        raise DecodeError(f"header needs {HEADER_SIZE} bytes, got {len(buf)}")
    op, seq, hkey, flag = _HEADER.unpack_from(buf, 0)
    return Header(op, seq, int.from_bytes(hkey, "big"), flag)


def encode_payload(msg: Message) -> bytes:
    if len(msg.key) + len(msg.value) > MAX_ITEM_BYTES:
        raise ValueError("key+value exceeds the single-packet budget")
    return b"".join((
        encode_header(msg.header),
        _DIAG.pack(*msg.meta),
        _FRAMING.pack(len(msg.key), len(msg.value)),
        msg.key,
        msg.value,
    ))


def decode_payload(buf: bytes, src: Address = Address(0), dst: Address = Address(0)) -> Message:
    fixed = HEADER_SIZE + DIAG_SIZE + FRAMING_SIZE
    if len(buf) < fixed:
        raise DecodeError(f"payload needs at least {fixed} bytes, got {len(buf)}")
    header = decode_header(buf)
    meta = Meta(*_DIAG.unpack_from(buf, HEADER_SIZE))
    klen, vlen = _FRAMING.unpack_from(buf, HEADER_SIZE + DIAG_SIZE)
    if fixed + klen + vlen != len(buf):
        raise DecodeError(f"length fields ({klen}+{vlen}) disagree with buffer size {len(buf)}")
    key = bytes(buf[fixed:fixed + klen])
    value = bytes(buf[fixed + klen:])
    return Message(header, key, value, src, dst, meta)


def encode(msg: Message) -> bytes:
    return _ENVELOPE.pack(msg.src.node, msg.src.port, msg.dst.node, msg.dst.port) + encode_payload(msg)


def decode(buf: bytes) -> Message:
    if len(buf) < ENVELOPE_SIZE:
        raise DecodeError(f"frame shorter than the {ENVELOPE_SIZE}-byte envelope")
    sn, sp, dn, dp = _ENVELOPE.unpack_from(buf, 0)
    return decode_payload(memoryview(buf)[ENVELOPE_SIZE:].tobytes(), Address(sn, sp), Address(dn, dp))


def partition(key: bytes, n_servers: int) -> int:
    """Home server of ``key``: top 16 bits of the full-width hash mod server count."""
    return (hash_key(key) >> (HASH_WIDTH - 16)) % n_servers
