"""Synchronization envelopes and their binary encoding.

Frame layout (all integers little-endian, floats IEEE-754 binary32)::

    u32 payload_length            -- added by the transport
    payload:
      u32 from | u32 to | u64 round | u8 kind | u32 value_len | u16 section_count
      section*:
        u8 tag | u32 item_count | columns...

Every column of a section is stored contiguously for all items, in the order
listed in ``SECTIONS``. Column types:

    u8 / u32 / u64   fixed-width integers, one per item
    vec              value_len float32s per item
    nodes            u32 count per item, then all node ids concatenated
    vecs             u32 count per item, then count*value_len float32s concatenated

Empty sections are omitted. See docs/wire-format.md for the tag table.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, fields
from typing import List

import numpy as np

HEADER = struct.Struct("<IIQBIH")
SECTION_HEAD = struct.Struct("<BI")


class Kind(enum.IntEnum):
    REQUEST = 0
    RESPONSE = 1
    READ = 2
    READ_REPLY = 3
    CONTROL = 4


# tag, field name, column types
SECTIONS = [
    (1, "intent_starts", ("u64", "u32", "u8")),                     # key, origin, hops
    (2, "intent_ends", ("u64", "u32", "u8")),                       # key, origin, hops
    (3, "replica_updates", ("u64", "u64", "u32", "u8", "vec")),     # key, version, origin, hops, delta
    (4, "remote_pushes", ("u64", "u32", "u8", "vec")),              # key, origin, hops, delta
    (5, "relocation_grants", ("u64", "u64", "vec", "nodes")),       # key, version, value, active
    (6, "replica_payloads", ("u64", "u64", "vec")),                 # key, version, value
    (7, "replica_destroys", ("u64",)),                              # key
    (8, "start_acks", ("u64",)),                                    # key
    (9, "location_notices", ("u64", "u32")),                        # key, proposed owner (to home)
    (10, "location_updates", ("u64", "u32")),                       # key, owner (go / expect / hint)
    (11, "refresh_deltas", ("u64", "u64", "u8", "vecs")),           # key, version, is_full, vectors
    (12, "read_requests", ("u64", "u64", "u32", "u8")),             # key, request id, origin, hops
    (13, "read_replies", ("u64", "u64", "vec")),                    # key, request id, value
    (14, "control", ("u32",)),                                      # control code
    (15, "end_acks", ("u64",)),                                     # key
]

_INT = {"u8": np.dtype("<u1"), "u32": np.dtype("<u4"), "u64": np.dtype("<u8")}
_F32 = np.dtype("<f4")

CONTROL_FIN = 1
CONTROL_BYE = 2


@dataclass
class SyncEnvelope:
    src: int
    dst: int
    round: int = 0
    kind: Kind = Kind.REQUEST
    intent_starts: list = field(default_factory=list)
    intent_ends: list = field(default_factory=list)
    replica_updates: list = field(default_factory=list)
    remote_pushes: list = field(default_factory=list)
    relocation_grants: list = field(default_factory=list)
    replica_payloads: list = field(default_factory=list)
    replica_destroys: list = field(default_factory=list)
    start_acks: list = field(default_factory=list)
    location_notices: list = field(default_factory=list)
    location_updates: list = field(default_factory=list)
    refresh_deltas: list = field(default_factory=list)
    read_requests: list = field(default_factory=list)
    read_replies: list = field(default_factory=list)
    control: list = field(default_factory=list)
    end_acks: list = field(default_factory=list)

    def is_empty(self) -> bool:
        return not any(getattr(self, name) for _, name, _ in SECTIONS)

    def section_counts(self) -> dict:
        return {name: len(getattr(self, name)) for _, name, _ in SECTIONS
                if getattr(self, name)}


def _encode_section(items: list, cols, value_len: int, out: List[bytes]) -> None:
    n = len(items)
    for ci, ctype in enumerate(cols):
        column = [it[ci] for it in items]
        if ctype in _INT:
            out.append(np.asarray(column, dtype=_INT[ctype]).tobytes())
        elif ctype == "vec":
            arr = np.asarray(column, dtype=_F32).reshape(n, value_len)
            out.append(arr.tobytes())
        elif ctype == "nodes":
            counts = np.fromiter((len(c) for c in column), dtype=_INT["u32"], count=n)
            out.append(counts.tobytes())
            flat = [x for c in column for x in sorted(c)]
            out.append(np.asarray(flat, dtype=_INT["u32"]).tobytes())
        elif ctype == "vecs":
            counts = np.fromiter((len(c) for c in column), dtype=_INT["u32"], count=n)
            out.append(counts.tobytes())
            flat = [v for c in column for v in c]
            if flat:
                out.append(np.asarray(flat, dtype=_F32).reshape(-1, value_len).tobytes())
        else:  # pragma: no cover
            raise ValueError(ctype)


def encode(env: SyncEnvelope, value_len: int) -> bytes:
    parts: List[bytes] = []
    nsec = 0
    for tag, name, cols in SECTIONS:
        items = getattr(env, name)
        if not items:
            continue
        nsec += 1
        parts.append(SECTION_HEAD.pack(tag, len(items)))
        _encode_section(items, cols, value_len, parts)
    head = HEADER.pack(env.src, env.dst, env.round, int(env.kind), value_len, nsec)
    return head + b"".join(parts)


_BY_TAG = {tag: (name, cols) for tag, name, cols in SECTIONS}


def decode(buf: bytes) -> SyncEnvelope:
    """Inverse of :func:`encode`; raises ValueError on a malformed frame."""
    try:
        return _decode(buf)
    except struct.error as exc:
        raise ValueError(f"truncated frame: {exc}") from None


def _decode(buf: bytes) -> SyncEnvelope:
    mv = memoryview(buf)
    src, dst, rnd, kind, value_len, nsec = HEADER.unpack_from(mv, 0)
    off = HEADER.size
    env = SyncEnvelope(src, dst, rnd, Kind(kind))  # ValueError on unknown kind
    for _ in range(nsec):
        tag, n = SECTION_HEAD.unpack_from(mv, off)
        off += SECTION_HEAD.size
        if tag not in _BY_TAG:
            raise ValueError(f"unknown section tag {tag}")
        name, cols = _BY_TAG[tag]
        columns = []
        for ctype in cols:
            if ctype in _INT:
                dt = _INT[ctype]
                arr = np.frombuffer(mv, dtype=dt, count=n, offset=off)
                off += n * dt.itemsize
                columns.append(arr.tolist())
            elif ctype == "vec":
                arr = np.frombuffer(mv, dtype=_F32, count=n * value_len, offset=off)
                off += n * value_len * 4
                arr = arr.reshape(n, value_len).astype(np.float32)
                columns.append(list(arr))
            else:
                counts = np.frombuffer(mv, dtype=_INT["u32"], count=n, offset=off).tolist()
                off += n * 4
                total = sum(counts)
                if ctype == "nodes":
                    flat = np.frombuffer(mv, dtype=_INT["u32"], count=total, offset=off).tolist()
                    off += total * 4
                    col, i = [], 0
                    for c in counts:
                        col.append(frozenset(flat[i:i + c]))
                        i += c
                else:
                    flat = np.frombuffer(mv, dtype=_F32, count=total * value_len, offset=off)
                    off += total * value_len * 4
                    flat = flat.reshape(total, value_len).astype(np.float32)
                    col, i = [], 0
                    for c in counts:
                        col.append(list(flat[i:i + c]))
                        i += c
                columns.append(col)
        setattr(env, name, [tuple(row) for row in zip(*columns)] if n else [])
    if off != len(buf):
        raise ValueError(f"trailing bytes in frame ({len(buf) - off})")
    return env


def frame_size(payload: bytes) -> int:
    """Bytes on the wire including the 4-byte length prefix."""
    return len(payload) + 4


ENVELOPE_FIELDS = [f.name for f in fields(SyncEnvelope)]
