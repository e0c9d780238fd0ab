"""Cross-protocol control plane: failure suspicion and coordinator election,
window-based flow control, version-based garbage collection, and the
optional stable-storage log."""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

from .core import InstanceId, ProcessId, Round, ValueEntry, ValueId


class NoQuorum(Exception):
    """Not enough unsuspected processes to make progress."""


def elect_coordinator(view) -> ProcessId:
    """Deterministic election: lowest unsuspected process id."""
    view = list(view)
    if not view:
        raise NoQuorum("empty view")
    return min(view)


# ---------------------------------------------------------------------------
# Flow control: multiplicative decrease on slow-down notices, slow additive
# recovery while no notices arrive.
# ---------------------------------------------------------------------------


@dataclass
class FlowState:
    window: int = 16
    min_window: int = 1
    max_window: int = 256
    recovery_interval: int = 1000  # ticks of quiet before window grows

    def __post_init__(self):
        if not self.min_window <= self.window <= self.max_window:
            raise ValueError("window out of bounds")

    def on_slowdown(self):
        self.window = max(self.min_window, self.window // 2)

    def on_quiet(self, quiet_for: int):
        if quiet_for >= self.recovery_interval:
            self.window = min(self.max_window, self.window + 1)


def window_recover(flow: FlowState, quiet_for: int) -> FlowState:
    flow.on_quiet(quiet_for)
    return flow


def learner_backpressure(used_slots: int, capacity: int, threshold: float):
    """Backlog to report, or None while the buffer is comfortable."""
    if capacity <= 0:
        return None
    if used_slots / capacity >= threshold:
        return used_slots
    return None


# ---------------------------------------------------------------------------
# Garbage collection by learner versions.
# ---------------------------------------------------------------------------


def gc_advance(
    versions: dict[ProcessId, InstanceId],
    learner: ProcessId,
    version: InstanceId,
    need: int,
) -> tuple[dict[ProcessId, InstanceId], InstanceId]:
    """Fold one version report in; returns (versions, discard-up-to).

    The floor moves only once ``need`` (= f+1) learners have reported and is
    the minimum over every reporter: a decision may be discarded only when
    it is reflected in the state of f+1 learners.  Stale (lower) reports are
    ignored, so the floor never moves backwards.
    """
    if version > versions.get(learner, -1):
        versions[learner] = version
    if len(versions) < need:
        return versions, -1
    return versions, min(versions.values())


# ---------------------------------------------------------------------------
# Failure suspicion: revocable timeout-based detector.
# ---------------------------------------------------------------------------


class SuspicionState:
    """Last-heard bookkeeping; suspicions are revoked on any later message."""

    def __init__(self, peers, timeout: int):
        self.timeout = timeout
        self.last_heard: dict[ProcessId, int] = {p: 0 for p in peers}
        self.suspected: set[ProcessId] = set()

    def heard(self, pid: ProcessId, now: int) -> bool:
        """Record traffic from pid; True if that revokes a suspicion."""
        if pid not in self.last_heard:
            return False
        self.last_heard[pid] = now
        if pid in self.suspected:
            self.suspected.discard(pid)
            return True
        return False

    def sweep(self, now: int) -> bool:
        """Re-evaluate all peers; True if the suspected set changed."""
        changed = False
        for p, t in self.last_heard.items():
            silent = now - t > self.timeout
            if silent and p not in self.suspected:
                self.suspected.add(p)
                changed = True
            elif not silent and p in self.suspected:
                self.suspected.discard(p)
                changed = True
        return changed


# ---------------------------------------------------------------------------
# Acceptor state deltas: what must hit stable storage before a reply leaves.
# ---------------------------------------------------------------------------

_DELTA_PROMISE = struct.Struct(">BIi")
_DELTA_VOTE_HEAD = struct.Struct(">BQIiiQI")


def promise_delta(rnd: Round) -> bytes:
    return _DELTA_PROMISE.pack(1, rnd.counter, rnd.owner)


def vote_delta(instance: InstanceId, rnd: Round, entry: ValueEntry) -> bytes:
    return _DELTA_VOTE_HEAD.pack(
        2, instance, rnd.counter, rnd.owner,
        entry.vid.proposer, entry.vid.seq, len(entry.payload),
    ) + entry.payload


def decode_delta(delta: bytes):
    kind = delta[0]
    if kind == 1:
        _, counter, owner = _DELTA_PROMISE.unpack(delta)
        return ("promise", Round(counter, owner))
    if kind == 2:
        (_, instance, counter, owner, vp, vs, ln) = _DELTA_VOTE_HEAD.unpack_from(
            delta
        )
        payload = delta[_DELTA_VOTE_HEAD.size :]
        if len(payload) != ln:
            raise ValueError("truncated vote delta")
        return (
            "vote",
            instance,
            Round(counter, owner),
            ValueEntry(ValueId(vp, vs), payload),
        )
    raise ValueError(f"unknown delta kind {kind}")


def restore_acceptor(engine, deltas) -> None:
    """Re-apply durable promises and votes to a freshly built engine."""
    for delta in deltas:
        decoded = decode_delta(delta)
        if decoded[0] == "promise":
            rnd = decoded[1]
            if rnd > engine.promised_round:
                engine.promised_round = rnd
        else:
            _, instance, rnd, entry = decoded
            if rnd >= engine.promised_round:
                engine.promised_round = rnd
            engine.votes[instance] = (rnd, entry)
        if rnd.counter > engine.max_round_counter:
            engine.max_round_counter = rnd.counter


# ---------------------------------------------------------------------------
# Stable storage: append-only log written in 32 KiB blocks.  Each block is
#    u32 body length | u32 crc32(body) | body | zero padding
# where the body is a run of length-prefixed state deltas.  Replay stops at
# the first torn or corrupt block.
# ---------------------------------------------------------------------------

BLOCK_SIZE = 32 * 1024
_BLOCK_HEADER = struct.Struct(">II")
_DELTA_LEN = struct.Struct(">I")
_BLOCK_BODY_CAP = BLOCK_SIZE - _BLOCK_HEADER.size


class WriteAheadLog:
    def __init__(self, path, sync: bool = True):
        self.path = path
        self.sync = sync
        self._buf: list[bytes] = []
        self._buf_bytes = 0
        self._fh = open(path, "ab")

    def append(self, delta: bytes):
        rec = _DELTA_LEN.pack(len(delta)) + delta
        if len(rec) > _BLOCK_BODY_CAP:
            raise ValueError("state delta larger than one log block")
        if self._buf_bytes + len(rec) > _BLOCK_BODY_CAP:
            self.flush()
        self._buf.append(rec)
        self._buf_bytes += len(rec)

    def flush(self):
        if not self._buf:
            return
        body = b"".join(self._buf)
        self._buf = []
        self._buf_bytes = 0
        block = _BLOCK_HEADER.pack(len(body), zlib.crc32(body) & 0xFFFFFFFF)
        block += body + b"\x00" * (_BLOCK_BODY_CAP - len(body))
        self._fh.write(block)
        self._fh.flush()
        if self.sync:
            os.fsync(self._fh.fileno())

    def close(self):
        self.flush()
        self._fh.close()


def replay(path) -> list[bytes]:
    """All durably recorded deltas, in write order."""
    deltas: list[bytes] = []
    try:
        fh = open(path, "rb")
    except FileNotFoundError:
        return deltas
    with fh:
        while True:
            block = fh.read(BLOCK_SIZE)
            if len(block) < BLOCK_SIZE:
                break  # torn trailing block: discard
            body_len, crc = _BLOCK_HEADER.unpack_from(block)
            if body_len > _BLOCK_BODY_CAP:
                break
            body = block[_BLOCK_HEADER.size : _BLOCK_HEADER.size + body_len]
            if zlib.crc32(body) & 0xFFFFFFFF != crc:
                break
            off = 0
            while off < body_len:
                (ln,) = _DELTA_LEN.unpack_from(body, off)
                off += _DELTA_LEN.size
                deltas.append(body[off : off + ln])
                off += ln
    return deltas
