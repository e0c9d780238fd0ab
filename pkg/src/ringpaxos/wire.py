"""Bit-exact wire format.

Frame layout:

    magic   2 bytes  0x52 0x50
    version 1 byte   0x01
    tag     1 byte   message kind
    length  4 bytes  big-endian body size
    body    fixed field order, big-endian fixed-width ints,
            byte strings length-prefixed
    crc32   4 bytes  over tag + length + body

Frames with a bad magic, version, length, tag, or CRC are rejected; the
transports count and drop them.  ``decode(encode(m)) == m`` holds for every
message kind, fuzz-checked in the test suite.
"""

from __future__ import annotations

import struct
import zlib
from typing import Optional

from .core import (
    Decision,
    Heartbeat,
    P1A,
    P1B,
    P2A,
    P2AB,
    P2B,
    Proposal,
    Recover,
    RingChange,
    Round,
    Slowdown,
    ValueEntry,
    ValueId,
    VersionReport,
)

MAGIC = b"\x52\x50"
VERSION = 1

TAG_P1A = 1
TAG_P1B = 2
TAG_P2A = 3
TAG_P2B = 4
TAG_P2AB = 5
TAG_DECISION = 6
TAG_PROPOSAL = 7
TAG_SLOWDOWN = 8
TAG_VERSION = 9
TAG_RINGCHANGE = 10
TAG_RECOVER = 11
TAG_HEARTBEAT = 12

_HEADER = struct.Struct(">2sBBI")
_CRC = struct.Struct(">I")
_ROUND = struct.Struct(">Ii")
_VID = struct.Struct(">iQ")
_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_I32 = struct.Struct(">i")
_I64 = struct.Struct(">q")

HEADER_SIZE = _HEADER.size
FRAME_OVERHEAD = HEADER_SIZE + _CRC.size


class WireError(ValueError):
    """Frame or body that cannot be decoded."""


class _Reader:
    __slots__ = ("buf", "off")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, st: struct.Struct):
        try:
            vals = st.unpack_from(self.buf, self.off)
        except struct.error as e:
            raise WireError(str(e)) from None
        self.off += st.size
        return vals

    def take_bytes(self) -> bytes:
        (ln,) = self.take(_U32)
        if self.off + ln > len(self.buf):
            raise WireError("truncated byte field")
        out = self.buf[self.off : self.off + ln]
        self.off += ln
        return out

    def done(self):
        if self.off != len(self.buf):
            raise WireError("trailing bytes in body")


def _round_bytes(r: Round) -> bytes:
    return _ROUND.pack(r.counter, r.owner)


def _vid_bytes(v: ValueId) -> bytes:
    return _VID.pack(v.proposer, v.seq)


def _read_round(r: _Reader) -> Round:
    counter, owner = r.take(_ROUND)
    return Round(counter, owner)


def _read_vid(r: _Reader) -> ValueId:
    proposer, seq = r.take(_VID)
    return ValueId(proposer, seq)


def _entry_bytes(e: ValueEntry) -> bytes:
    return _vid_bytes(e.vid) + _U32.pack(len(e.payload)) + e.payload


def _read_entry(r: _Reader) -> ValueEntry:
    vid = _read_vid(r)
    return ValueEntry(vid, r.take_bytes())


def _opt_bytes(b: Optional[bytes]) -> bytes:
    if b is None:
        return _U8.pack(0)
    return _U8.pack(1) + _U32.pack(len(b)) + b


def _read_opt_bytes(r: _Reader) -> Optional[bytes]:
    (flag,) = r.take(_U8)
    if flag == 0:
        return None
    if flag != 1:
        raise WireError("bad optional flag")
    return r.take_bytes()


def _pids_bytes(pids) -> bytes:
    return _U16.pack(len(pids)) + b"".join(_I32.pack(p) for p in pids)


def _read_pids(r: _Reader) -> tuple[int, ...]:
    (n,) = r.take(_U16)
    return tuple(r.take(_I32)[0] for _ in range(n))


def _encode_body(msg) -> tuple[int, bytes]:
    t = type(msg)
    if t is P2A:
        parts = [_U16.pack(len(msg.decisions))]
        for inst, vid in msg.decisions:
            parts.append(_U64.pack(inst))
            parts.append(_vid_bytes(vid))
        parts.append(_U16.pack(len(msg.proposals)))
        for inst, rnd, entry in msg.proposals:
            parts.append(_U64.pack(inst))
            parts.append(_round_bytes(rnd))
            parts.append(_entry_bytes(entry))
        return TAG_P2A, b"".join(parts)
    if t is P2B:
        return TAG_P2B, (
            _U64.pack(msg.instance)
            + _round_bytes(msg.round)
            + _vid_bytes(msg.vid)
            + _U16.pack(msg.votes)
        )
    if t is P2AB:
        return TAG_P2AB, (
            _U64.pack(msg.instance)
            + _round_bytes(msg.round)
            + _vid_bytes(msg.vid)
            + _opt_bytes(msg.payload)
            + _U16.pack(msg.votes)
        )
    if t is Decision:
        parts = [_U16.pack(len(msg.entries))]
        for inst, vid, payload in msg.entries:
            parts.append(_U64.pack(inst))
            parts.append(_vid_bytes(vid))
            parts.append(_opt_bytes(payload))
        return TAG_DECISION, b"".join(parts)
    if t is Proposal:
        return TAG_PROPOSAL, _entry_bytes(msg.entry)
    if t is P1A:
        return TAG_P1A, (
            _round_bytes(msg.round)
            + _U32.pack(msg.epoch)
            + _pids_bytes(msg.ring)
            + _U64.pack(msg.low)
        )
    if t is P1B:
        parts = [
            _round_bytes(msg.round),
            _U32.pack(msg.epoch),
            _U16.pack(len(msg.votes)),
        ]
        for inst, vr, entry in msg.votes:
            parts.append(_U64.pack(inst))
            parts.append(_round_bytes(vr))
            parts.append(_entry_bytes(entry))
        return TAG_P1B, b"".join(parts)
    if t is Slowdown:
        return TAG_SLOWDOWN, _I32.pack(msg.origin) + _U32.pack(msg.backlog)
    if t is VersionReport:
        return TAG_VERSION, (
            _I32.pack(msg.origin) + _I64.pack(msg.version) + _U16.pack(msg.ttl)
        )
    if t is RingChange:
        return TAG_RINGCHANGE, (
            _U32.pack(msg.epoch)
            + _pids_bytes(msg.ring)
            + _I32.pack(msg.coordinator)
            + _pids_bytes(msg.spares)
        )
    if t is Recover:
        parts = [_U16.pack(len(msg.instances))]
        parts.extend(_U64.pack(i) for i in msg.instances)
        parts.append(_I32.pack(msg.redirect))
        return TAG_RECOVER, b"".join(parts)
    if t is Heartbeat:
        return TAG_HEARTBEAT, b""
    raise WireError(f"cannot encode {t.__name__}")


def _decode_body(tag: int, body: bytes):
    r = _Reader(body)
    if tag == TAG_P2A:
        (nd,) = r.take(_U16)
        decisions = []
        for _ in range(nd):
            (inst,) = r.take(_U64)
            decisions.append((inst, _read_vid(r)))
        (np,) = r.take(_U16)
        proposals = []
        for _ in range(np):
            (inst,) = r.take(_U64)
            rnd = _read_round(r)
            proposals.append((inst, rnd, _read_entry(r)))
        msg = P2A(tuple(decisions), tuple(proposals))
    elif tag == TAG_P2B:
        (inst,) = r.take(_U64)
        rnd = _read_round(r)
        vid = _read_vid(r)
        (votes,) = r.take(_U16)
        msg = P2B(inst, rnd, vid, votes)
    elif tag == TAG_P2AB:
        (inst,) = r.take(_U64)
        rnd = _read_round(r)
        vid = _read_vid(r)
        payload = _read_opt_bytes(r)
        (votes,) = r.take(_U16)
        msg = P2AB(inst, rnd, vid, payload, votes)
    elif tag == TAG_DECISION:
        (n,) = r.take(_U16)
        entries = []
        for _ in range(n):
            (inst,) = r.take(_U64)
            vid = _read_vid(r)
            entries.append((inst, vid, _read_opt_bytes(r)))
        msg = Decision(tuple(entries))
    elif tag == TAG_PROPOSAL:
        msg = Proposal(_read_entry(r))
    elif tag == TAG_P1A:
        rnd = _read_round(r)
        (epoch,) = r.take(_U32)
        ring = _read_pids(r)
        (low,) = r.take(_U64)
        msg = P1A(rnd, epoch, ring, low)
    elif tag == TAG_P1B:
        rnd = _read_round(r)
        (epoch,) = r.take(_U32)
        (n,) = r.take(_U16)
        votes = []
        for _ in range(n):
            (inst,) = r.take(_U64)
            vr = _read_round(r)
            votes.append((inst, vr, _read_entry(r)))
        msg = P1B(rnd, epoch, tuple(votes))
    elif tag == TAG_SLOWDOWN:
        (origin,) = r.take(_I32)
        (backlog,) = r.take(_U32)
        msg = Slowdown(origin, backlog)
    elif tag == TAG_VERSION:
        (origin,) = r.take(_I32)
        (version,) = r.take(_I64)
        (ttl,) = r.take(_U16)
        msg = VersionReport(origin, version, ttl)
    elif tag == TAG_RINGCHANGE:
        (epoch,) = r.take(_U32)
        ring = _read_pids(r)
        (coord,) = r.take(_I32)
        spares = _read_pids(r)
        msg = RingChange(epoch, ring, coord, spares)
    elif tag == TAG_RECOVER:
        (n,) = r.take(_U16)
        instances = tuple(r.take(_U64)[0] for _ in range(n))
        (redirect,) = r.take(_I32)
        msg = Recover(instances, redirect)
    elif tag == TAG_HEARTBEAT:
        msg = Heartbeat()
    else:
        raise WireError(f"unknown tag {tag}")
    r.done()
    return msg


def encode(msg) -> bytes:
    """Message to a complete frame."""
    tag, body = _encode_body(msg)
    head = _HEADER.pack(MAGIC, VERSION, tag, len(body))
    # crc over tag + length + body, computed incrementally to avoid a copy
    crc = zlib.crc32(body, zlib.crc32(head[3:8]))
    return head + body + _CRC.pack(crc & 0xFFFFFFFF)


def decode(frame: bytes):
    """Frame to a message; raises WireError on any corruption."""
    if len(frame) < FRAME_OVERHEAD:
        raise WireError("short frame")
    magic, version, tag, length = _HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise WireError("bad magic")
    if version != VERSION:
        raise WireError(f"unknown version {version}")
    if len(frame) != FRAME_OVERHEAD + length:
        raise WireError("length mismatch")
    body = frame[HEADER_SIZE : HEADER_SIZE + length]
    (crc,) = _CRC.unpack_from(frame, HEADER_SIZE + length)
    if zlib.crc32(body, zlib.crc32(frame[3:8])) & 0xFFFFFFFF != crc:
        raise WireError("bad crc")
    return _decode_body(tag, body)
