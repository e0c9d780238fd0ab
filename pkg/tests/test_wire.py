"""Wire format: bit-exact round trips and corruption rejection."""

import random

import pytest
from hypothesis import given, strategies as st

from ringpaxos import wire
from ringpaxos.core import (
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


def rnd(r):
    return Round(r.randrange(0, 1 << 20), r.randrange(-1, 64))


def vid(r):
    return ValueId(r.randrange(0, 64), r.randrange(0, 1 << 40))


def entry(r):
    return ValueEntry(vid(r), r.randbytes(r.randrange(0, 200)))


def opt_payload(r):
    return None if r.random() < 0.3 else r.randbytes(r.randrange(0, 120))


def random_message(kind, r):
    if kind == "P1A":
        return P1A(rnd(r), r.randrange(1 << 16),
                   tuple(r.randrange(64) for _ in range(r.randrange(5))),
                   r.randrange(1 << 30))
    if kind == "P1B":
        return P1B(rnd(r), r.randrange(1 << 16),
                   tuple((r.randrange(1 << 20), rnd(r), entry(r))
                         for _ in range(r.randrange(4))))
    if kind == "P2A":
        return P2A(
            tuple((r.randrange(1 << 20), vid(r)) for _ in range(r.randrange(4))),
            tuple((r.randrange(1 << 20), rnd(r), entry(r))
                  for _ in range(r.randrange(3))),
        )
    if kind == "P2B":
        return P2B(r.randrange(1 << 30), rnd(r), vid(r), r.randrange(1, 30))
    if kind == "P2AB":
        return P2AB(r.randrange(1 << 30), rnd(r), vid(r), opt_payload(r),
                    r.randrange(1, 30))
    if kind == "Decision":
        return Decision(tuple(
            (r.randrange(1 << 20), vid(r), opt_payload(r))
            for _ in range(r.randrange(5))
        ))
    if kind == "Proposal":
        return Proposal(entry(r))
    if kind == "Slowdown":
        return Slowdown(r.randrange(64), r.randrange(1 << 30))
    if kind == "VersionReport":
        return VersionReport(r.randrange(64), r.randrange(-1, 1 << 40),
                             r.randrange(1 << 10))
    if kind == "RingChange":
        return RingChange(
            r.randrange(1 << 16),
            tuple(r.randrange(64) for _ in range(r.randrange(1, 6))),
            r.randrange(64),
            tuple(r.randrange(64) for _ in range(r.randrange(4))),
        )
    if kind == "Recover":
        return Recover(
            tuple(r.randrange(1 << 30) for _ in range(r.randrange(6))),
            r.choice([-1, r.randrange(64)]),
        )
    if kind == "Heartbeat":
        return Heartbeat()
    raise AssertionError(kind)


KINDS = ["P1A", "P1B", "P2A", "P2B", "P2AB", "Decision", "Proposal",
         "Slowdown", "VersionReport", "RingChange", "Recover", "Heartbeat"]


@pytest.mark.parametrize("kind", KINDS)
def test_roundtrip_random_sample(kind):
    r = random.Random(hash(kind) & 0xFFFF)
    for _ in range(500):
        msg = random_message(kind, r)
        frame = wire.encode(msg)
        assert wire.decode(frame) == msg
        # encoding is a pure function of the message
        assert wire.encode(msg) == frame


def test_bad_magic_rejected():
    frame = bytearray(wire.encode(Heartbeat()))
    frame[0] ^= 0xFF
    with pytest.raises(wire.WireError):
        wire.decode(bytes(frame))


def test_unknown_version_rejected():
    frame = bytearray(wire.encode(Heartbeat()))
    frame[2] = 99
    with pytest.raises(wire.WireError):
        wire.decode(bytes(frame))


def test_unknown_tag_rejected():
    frame = bytearray(wire.encode(Heartbeat()))
    frame[3] = 200
    with pytest.raises(wire.WireError):
        wire.decode(bytes(frame))


def test_length_mismatch_rejected():
    frame = wire.encode(Slowdown(1, 2))
    with pytest.raises(wire.WireError):
        wire.decode(frame + b"\x00")
    with pytest.raises(wire.WireError):
        wire.decode(frame[:-1])


def test_single_bit_flips_always_rejected():
    r = random.Random(77)
    msg = random_message("P2A", r)
    frame = wire.encode(msg)
    for _ in range(300):
        pos = r.randrange(len(frame))
        bit = 1 << r.randrange(8)
        corrupted = bytearray(frame)
        corrupted[pos] ^= bit
        try:
            decoded = wire.decode(bytes(corrupted))
        except wire.WireError:
            continue
        # a flip that still decodes must not silently alter the message
        assert decoded != msg, "corruption accepted"


@given(st.binary(max_size=64))
def test_random_garbage_never_decodes_silently(data):
    try:
        wire.decode(data)
    except wire.WireError:
        pass
