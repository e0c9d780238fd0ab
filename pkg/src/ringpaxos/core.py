"""Domain types shared by every protocol, plus the classic multi-instance
Paxos engine.

All engines in this package are deterministic event-driven state machines:
``step(now, event)`` consumes one event and returns a list of actions
(sends, timers, deliveries, decisions).  Engines never touch sockets,
clocks, or random numbers; the simulator and the real transports feed them
the same event vocabulary.
"""

from __future__ import annotations

import struct
import zlib
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional


class InvariantViolation(Exception):
    """A protocol invariant that must never break did break."""


class ConfigError(Exception):
    """Bad or inconsistent deployment configuration."""


ProcessId = int
InstanceId = int

#: Owner of the distinguished initial round.
NIL = -1

#: Simulated/real time conversion: engines count time in ticks.
TICKS_PER_MS = 10


@dataclass(frozen=True, order=True)
class Round:
    """Totally ordered ballot, unique per coordinator.

    Ordering is lexicographic on (counter, owner), which makes rounds from
    distinct coordinators incomparable-proof: two non-zero rounds are equal
    only if both fields match, and a coordinator only ever mints rounds that
    carry its own id.
    """

    counter: int
    owner: ProcessId = NIL


ROUND_ZERO = Round(0, NIL)


def round_compare(a: Round, b: Round) -> int:
    """-1/0/+1 comparison; same total order as the dataclass ordering."""
    if a == b:
        return 0
    return -1 if a < b else 1


def quorum_size(num_acceptors: int) -> int:
    """Majority quorum size, ceil((n+1)/2)."""
    if num_acceptors < 1:
        raise ConfigError("need at least one acceptor")
    return num_acceptors // 2 + 1


@dataclass(frozen=True, order=True)
class ValueId:
    """Unique identifier for a proposed value: (proposer, per-proposer seq)."""

    proposer: ProcessId
    seq: int


@dataclass(frozen=True)
class ValueEntry:
    """A proposed batch of client messages plus its identity.

    The payload is a batch: concatenated length-prefixed client messages
    (see :func:`encode_batch`).  The id never changes once assigned, no
    matter how many rounds re-propose the value.
    """

    vid: ValueId
    payload: bytes


def encode_batch(messages: Iterable[bytes]) -> bytes:
    parts = []
    for m in messages:
        parts.append(struct.pack(">I", len(m)))
        parts.append(m)
    return b"".join(parts)


def decode_batch(payload: bytes) -> list[bytes]:
    out = []
    off = 0
    n = len(payload)
    while off < n:
        if off + 4 > n:
            raise ValueError("truncated batch")
        (ln,) = struct.unpack_from(">I", payload, off)
        off += 4
        if off + ln > n:
            raise ValueError("truncated batch")
        out.append(payload[off : off + ln])
        off += ln
    if not out:
        raise ValueError("empty batch")
    return out


def payload_crc(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF


# ---------------------------------------------------------------------------
# Protocol messages.  One tagged union across all three protocols; the wire
# codec in ``wire.py`` gives each a bit-exact encoding.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class P1A:
    round: Round
    epoch: int
    ring: tuple[ProcessId, ...]  # proposed ring; empty for classic Paxos
    low: InstanceId  # report votes for instances >= low


@dataclass(frozen=True)
class P1B:
    round: Round
    epoch: int
    # (instance, voted_round, voted_value) for every instance >= low the
    # acceptor has voted in.
    votes: tuple[tuple[InstanceId, Round, ValueEntry], ...]


@dataclass(frozen=True)
class P2A:
    """Two-part coordinator packet: decided ids plus new proposals.

    Classic Paxos uses it with a single proposal and no decisions; the
    multicast ring protocol coalesces pending decisions onto the next
    proposal packet.
    """

    decisions: tuple[tuple[InstanceId, ValueId], ...]
    proposals: tuple[tuple[InstanceId, Round, ValueEntry], ...]


@dataclass(frozen=True)
class P2B:
    instance: InstanceId
    round: Round
    vid: ValueId
    votes: int  # acceptors that have voted along the ring path


@dataclass(frozen=True)
class P2AB:
    """Combined proposal+vote circulating the unicast ring."""

    instance: InstanceId
    round: Round
    vid: ValueId
    payload: Optional[bytes]  # None when stripped (receiver has it cached)
    votes: int


@dataclass(frozen=True)
class Decision:
    # (instance, vid, payload-or-None); payload is stripped where the
    # receiver is known to hold the value already.
    entries: tuple[tuple[InstanceId, ValueId, Optional[bytes]], ...]


@dataclass(frozen=True)
class Proposal:
    entry: ValueEntry


@dataclass(frozen=True)
class Slowdown:
    origin: ProcessId
    backlog: int


@dataclass(frozen=True)
class VersionReport:
    origin: ProcessId
    version: InstanceId  # largest instance applied by the learner
    ttl: int  # remaining ring hops


@dataclass(frozen=True)
class RingChange:
    epoch: int
    ring: tuple[ProcessId, ...]
    coordinator: ProcessId
    spares: tuple[ProcessId, ...]


@dataclass(frozen=True)
class Recover:
    instances: tuple[InstanceId, ...]
    redirect: ProcessId = NIL  # set when answering "ask that process instead"


@dataclass(frozen=True)
class Heartbeat:
    pass


MESSAGE_TYPES = (
    P1A,
    P1B,
    P2A,
    P2B,
    P2AB,
    Decision,
    Proposal,
    Slowdown,
    VersionReport,
    RingChange,
    Recover,
    Heartbeat,
)


# ---------------------------------------------------------------------------
# Engine events and actions.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Recv:
    src: ProcessId
    msg: object


@dataclass(frozen=True)
class Timer:
    key: tuple


@dataclass(frozen=True)
class Submit:
    """One client message handed to a proposer."""

    payload: bytes


@dataclass(frozen=True)
class SetApplyRate:
    """Harness control: ticks per applied decision at a learner (0 = free)."""

    ticks: int


@dataclass(frozen=True)
class Send:
    dst: ProcessId
    msg: object
    stream: bool = False  # True: reliable FIFO lane; False: lossy datagram


@dataclass(frozen=True)
class Mcast:
    """Datagram to the deployment's multicast group (ring + learners)."""

    msg: object


@dataclass(frozen=True)
class StartTimer:
    key: tuple
    delay: int  # ticks; re-arming a key replaces the pending timer


@dataclass(frozen=True)
class Deliver:
    """A decided batch applied by a learner, in instance order."""

    instance: InstanceId
    vid: ValueId
    payload: bytes


@dataclass(frozen=True)
class Decided:
    """Decision point reached (coordinator or deciding acceptor)."""

    instance: InstanceId
    vid: ValueId


@dataclass(frozen=True)
class NewBatch:
    """A proposer sealed a batch; bookkeeping for tracing and latency.

    ``filler`` marks internal no-op batches a coordinator mints to close
    instance gaps; they count as proposed (validity) but carry no client
    messages anyone waits for.
    """

    vid: ValueId
    size: int
    crc: int
    first_submit: int
    filler: bool = False


@dataclass(frozen=True)
class Persist:
    """Durability barrier: later sends must not leave before this is stable."""

    delta: bytes


# ---------------------------------------------------------------------------
# Deployment configuration.
# ---------------------------------------------------------------------------


@dataclass
class Params:
    """Tunables; defaults follow the protocol kit's reference settings.

    Times are in ticks (10 ticks = 1 ms).
    """

    packet_bytes: int = 8192  # datagram cap (multicast protocol)
    stream_packet_bytes: int = 32768  # framing cap on ring streams
    learner_slots: int = 20480  # learner cache slots (160 MiB of 8 KiB slots)
    batch_bytes: int = 0  # 0: derive from packet size
    window: int = 16
    min_window: int = 1
    max_window: int = 256
    slow_threshold: float = 0.8
    recovery_interval: int = 1000  # window additive-increase period (100 ms)
    hb_interval: int = 100  # heartbeat every 10 ms
    fd_timeout: int = 500  # suspect after 50 ms of silence
    retx_interval: int = 300  # coordinator retransmit sweep
    proposer_retx: int = 600  # proposer re-offers unlearned batches
    parked_interval: int = 100  # parked ring votes re-checked every 10 ms
    flush_ticks: int = 10  # standalone decision flush (1 ms); 0 = immediate
    batch_ticks: int = 10  # proposer batch timer (1 ms); 0 = immediate
    version_interval: int = 100  # learner version report period (10 ms)
    version_every: int = 1000  # ... or after this many deliveries
    recover_interval: int = 200  # learner gap-recovery sweep
    pending_cap: int = 4096  # coordinator proposal queue bound
    phase1_window: int = 64  # instances pre-opened by Phase 1
    persist: bool = False

    def payload_cap(self) -> int:
        if self.batch_bytes:
            return self.batch_bytes
        return max(256, self.packet_bytes - 512)


@dataclass
class Deployment:
    """Static description of one deployment all processes agree on."""

    protocol: str  # 'paxos' | 'mring' | 'uring'
    f: int
    acceptors: tuple[ProcessId, ...]
    learners: tuple[ProcessId, ...]
    proposers: tuple[ProcessId, ...]
    ring: tuple[ProcessId, ...] = ()  # unicast ring order (uring only)
    params: Params = field(default_factory=Params)

    def __post_init__(self):
        self.validate()

    def all_pids(self) -> tuple[ProcessId, ...]:
        seen = []
        for p in (*self.acceptors, *self.learners, *self.proposers, *self.ring):
            if p not in seen:
                seen.append(p)
        return tuple(sorted(seen))

    def validate(self):
        if self.protocol not in ("paxos", "mring", "uring"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        for group_name, group in (
            ("acceptors", self.acceptors),
            ("learners", self.learners),
            ("proposers", self.proposers),
            ("ring", self.ring),
        ):
            if len(set(group)) != len(group):
                raise ConfigError(f"duplicate process id in {group_name}")
            if any(p < 0 for p in group):
                raise ConfigError("process ids must be non-negative")
        if len(self.acceptors) != 2 * self.f + 1:
            raise ConfigError(
                f"{self.protocol}: need 2f+1={2 * self.f + 1} acceptors, "
                f"got {len(self.acceptors)}"
            )
        if self.protocol in ("mring", "uring") and self.f < 1:
            raise ConfigError(f"{self.protocol}: needs f >= 1")
        if not self.learners:
            raise ConfigError("need at least one learner")
        if self.protocol == "uring":
            if not self.ring:
                raise ConfigError("uring: ring order required")
            missing = set(self.acceptors) - set(self.ring)
            if missing:
                raise ConfigError(f"uring: acceptors {missing} not in ring")
            extra = (set(self.learners) | set(self.proposers)) - set(self.ring)
            if extra:
                raise ConfigError(f"uring: processes {extra} not in ring")
        else:
            # Proposers learn their own decisions; that is how retransmission
            # of unlearned batches terminates.
            loose = set(self.proposers) - set(self.learners)
            if loose:
                raise ConfigError(
                    f"{self.protocol}: proposers {sorted(loose)} must also be learners"
                )


def pick_value(
    acks: Iterable[tuple[Round, Optional[ValueEntry]]],
    proposer_value: ValueEntry,
) -> ValueEntry:
    """Choose the value a coordinator may propose given Phase-1B evidence.

    ``acks`` holds one (voted_round, voted_value) pair per quorum member;
    the zero round with a None value means "never voted".  If nobody voted,
    the proposer's value is free to go; otherwise the value voted in the
    highest round must be re-proposed.
    """
    k = ROUND_ZERO
    chosen: Optional[ValueEntry] = None
    for voted_round, voted_value in acks:
        if voted_round == ROUND_ZERO:
            continue
        if voted_value is None:
            raise InvariantViolation(f"vote at {voted_round} without a value")
        if voted_round > k:
            k, chosen = voted_round, voted_value
        elif voted_round == k and voted_value.vid != chosen.vid:
            raise InvariantViolation(
                f"two different values voted in round {k}: "
                f"{chosen.vid} vs {voted_value.vid}"
            )
    if k == ROUND_ZERO:
        return proposer_value
    return chosen


# ---------------------------------------------------------------------------
# Engine base: plumbing every protocol shares (batching proposer, failure
# detection, learner version reports, garbage collection).
# ---------------------------------------------------------------------------


@dataclass
class _PendingBatch:
    entry: ValueEntry
    first_submit: int
    last_sent: int


class Engine:
    protocol = "?"

    def __init__(self, pid: ProcessId, deploy: Deployment):
        self.pid = pid
        self.deploy = deploy
        self.params = deploy.params
        self.now = 0
        self._acts: list = []
        self.all_peers = tuple(p for p in deploy.all_pids() if p != pid)

        # roles
        self.is_acceptor = pid in deploy.acceptors
        self.is_learner = pid in deploy.learners
        self.is_proposer = pid in deploy.proposers

        # failure detection
        from . import control

        self.fd = control.SuspicionState(self.all_peers, self.params.fd_timeout)

        # proposer state
        self._batch: list[bytes] = []
        self._batch_bytes = 0
        self._batch_first_submit = 0
        self._next_batch_seq = 0
        self.pending_batches: dict[ValueId, _PendingBatch] = {}

        # acceptor state (per-instance votes share one promised round)
        self.promised_round = ROUND_ZERO
        self.votes: dict[InstanceId, tuple[Round, ValueEntry]] = {}
        self.decided_store: dict[InstanceId, ValueId] = {}

        # learner state
        self.ordered: dict[InstanceId, ValueId] = {}  # decided ids seen
        self.next_deliver = 0
        self.apply_ticks = 0
        self._apply_queue: deque[tuple[InstanceId, ValueId, bytes]] = deque()
        self._apply_armed = False
        # bounded replay window for redirected recovery, capped in bytes so
        # large batches cannot pin unbounded memory
        self.applied_log: deque[tuple[InstanceId, ValueId, bytes]] = deque()
        self._applied_log_bytes = 0
        self._applied_log_cap = 32 << 20
        self.deliveries_since_report = 0

        # garbage collection
        self.learner_versions: dict[ProcessId, InstanceId] = {}
        self.gc_floor = -1
        self._catchup_seen: dict[ProcessId, InstanceId] = {}

        # counters surfaced to metrics
        self.counters = {
            "stale_dropped": 0,
            "dup_dropped": 0,
            "malformed": 0,
            "queue_overflow": 0,
            "cache_overflow": 0,
        }

    # -- emission helpers ---------------------------------------------------

    def _send(self, dst: ProcessId, msg, stream: bool = False):
        self._acts.append(Send(dst, msg, stream))

    def _mcast(self, msg):
        self._acts.append(Mcast(msg))

    def _timer(self, key: tuple, delay: int):
        self._acts.append(StartTimer(key, delay))

    def _persist(self, delta: bytes):
        if self.params.persist:
            self._acts.append(Persist(delta))

    def _persist_promise(self, rnd: Round):
        if self.params.persist:
            from . import control

            self._acts.append(Persist(control.promise_delta(rnd)))

    def _persist_vote(self, instance: InstanceId, rnd: Round, entry: ValueEntry):
        if self.params.persist:
            from . import control

            self._acts.append(Persist(control.vote_delta(instance, rnd, entry)))

    @property
    def suspected(self) -> set[ProcessId]:
        return self.fd.suspected

    # -- lifecycle ----------------------------------------------------------

    def start(self, now: int) -> list:
        self.now = now
        self._acts = []
        self._timer(("hb",), self.params.hb_interval)
        self._timer(("fd",), self.params.fd_timeout)
        if self.is_proposer:
            self._timer(("prop_rtx",), self.params.proposer_retx)
        if self.is_learner:
            self._timer(("version",), self.params.version_interval)
            self._timer(("recover",), self.params.recover_interval)
        self._on_start()
        return self._flush_acts()

    def step(self, now: int, event) -> list:
        self.now = now
        self._acts = []
        if type(event) is Recv:
            src = event.src
            if self.fd.heard(src, now):
                self._on_view_change()
            self._on_msg(src, event.msg)
        elif type(event) is Timer:
            self._on_base_timer(event.key)
        elif type(event) is Submit:
            self._on_submit(event.payload)
        elif type(event) is SetApplyRate:
            self.apply_ticks = event.ticks
            self._pump_apply()
        else:
            self.counters["malformed"] += 1
        return self._flush_acts()

    def _flush_acts(self) -> list:
        acts, self._acts = self._acts, []
        return acts

    # -- hooks protocol engines implement ------------------------------------

    def _on_start(self):
        pass

    def _on_msg(self, src: ProcessId, msg):
        raise NotImplementedError

    def _on_timer(self, key: tuple):
        pass

    def _on_view_change(self):
        pass

    def _coordinator_hint(self) -> ProcessId:
        """Where this process routes proposals."""
        raise NotImplementedError

    def _forward_batch(self, entry: ValueEntry):
        raise NotImplementedError

    # -- failure detection ----------------------------------------------------

    def _on_base_timer(self, key: tuple):
        kind = key[0]
        if kind == "hb":
            for p in self.all_peers:
                self._send(p, Heartbeat(), stream=self.protocol == "uring")
            self._timer(("hb",), self.params.hb_interval)
        elif kind == "fd":
            changed = self.fd.sweep(self.now)
            self._timer(("fd",), self.params.fd_timeout // 2 or 1)
            if changed:
                self._on_view_change()
        elif kind == "batch":
            self._flush_batch()
        elif kind == "prop_rtx":
            self._proposer_retx()
            self._timer(("prop_rtx",), self.params.proposer_retx)
        elif kind == "version":
            self._report_version()
            self._timer(("version",), self.params.version_interval)
        elif kind == "recover":
            self._recover_sweep()
            self._timer(("recover",), self.params.recover_interval)
        elif kind == "apply":
            self._apply_armed = False
            self._apply_one()
            self._pump_apply()
        else:
            self._on_timer(key)

    def _recover_sweep(self):
        pass

    # -- proposer: batching and retransmission --------------------------------

    def _on_submit(self, payload: bytes):
        if not self.is_proposer:
            self.counters["malformed"] += 1
            return
        cap = self.params.payload_cap()
        if 4 + len(payload) > cap:
            raise ValueError(
                f"client message of {len(payload)} bytes exceeds batch cap {cap}"
            )
        if self._batch and self._batch_bytes + 4 + len(payload) > cap:
            self._flush_batch()  # never let a batch outgrow one packet
        if not self._batch:
            self._batch_first_submit = self.now
        self._batch.append(payload)
        self._batch_bytes += 4 + len(payload)
        if self._batch_bytes >= cap or self.params.batch_ticks == 0:
            self._flush_batch()
        elif len(self._batch) == 1:
            self._timer(("batch",), self.params.batch_ticks)

    def _flush_batch(self):
        if not self._batch:
            return
        vid = ValueId(self.pid, self._next_batch_seq)
        self._next_batch_seq += 1
        entry = ValueEntry(vid, encode_batch(self._batch))
        self._batch = []
        self._batch_bytes = 0
        self.pending_batches[vid] = _PendingBatch(
            entry, self._batch_first_submit, self.now
        )
        self._acts.append(
            NewBatch(vid, len(entry.payload), payload_crc(entry.payload),
                     self._batch_first_submit)
        )
        self._forward_batch(entry)

    def _proposer_retx(self):
        # bounded re-offer: when the coordinator sheds load, flooding it with
        # the whole backlog at once would only feed the overflow
        stale = self.now - self.params.proposer_retx
        budget = 64
        for vid in sorted(self.pending_batches):
            pb = self.pending_batches[vid]
            if pb.last_sent <= stale:
                pb.last_sent = self.now
                self._forward_batch(pb.entry)
                budget -= 1
                if budget == 0:
                    break

    def _noop_entry(self) -> ValueEntry:
        """Filler batch for an instance the protocol must close."""
        vid = ValueId(self.pid, self._next_batch_seq)
        self._next_batch_seq += 1
        entry = ValueEntry(vid, encode_batch([b""]))
        self._acts.append(
            NewBatch(vid, len(entry.payload), payload_crc(entry.payload),
                     self.now, filler=True)
        )
        return entry

    def _batch_learned(self, vid: ValueId):
        self.pending_batches.pop(vid, None)

    # -- learner: ordered delivery with apply pacing --------------------------

    def _learn(self, instance: InstanceId, vid: ValueId, payload: bytes):
        """Queue one decided batch; delivery happens in instance order."""
        if instance < self.next_deliver:
            return
        self.ordered[instance] = vid
        self._stash_payload(instance, vid, payload)
        self._pump_learn()

    def _stash_payload(self, instance, vid, payload):
        raise NotImplementedError

    def _deliverable(self, instance) -> Optional[tuple[ValueId, bytes]]:
        raise NotImplementedError

    def _pump_learn(self):
        while True:
            nxt = self._deliverable(self.next_deliver)
            if nxt is None:
                break
            vid, payload = nxt
            self._apply_queue.append((self.next_deliver, vid, payload))
            self.next_deliver += 1
        self._pump_apply()

    def _pump_apply(self):
        if self.apply_ticks == 0:
            while self._apply_queue:
                self._apply_one()
        elif self._apply_queue and not self._apply_armed:
            self._apply_armed = True
            self._timer(("apply",), self.apply_ticks)

    def _apply_one(self):
        if not self._apply_queue:
            return
        instance, vid, payload = self._apply_queue.popleft()
        self.applied_log.append((instance, vid, payload))
        self._applied_log_bytes += len(payload)
        while (
            self._applied_log_bytes > self._applied_log_cap
            and len(self.applied_log) > 1
        ):
            self._applied_log_bytes -= len(self.applied_log.popleft()[2])
        self._acts.append(Deliver(instance, vid, payload))
        self._batch_learned(vid)
        self.deliveries_since_report += 1
        if self.deliveries_since_report >= self.params.version_every:
            self._report_version()
        self._after_apply(instance)

    def _after_apply(self, instance: InstanceId):
        pass

    def applied_version(self) -> InstanceId:
        return self.next_deliver - 1 - len(self._apply_queue)

    def backlog(self) -> int:
        return len(self._apply_queue)

    def _report_version(self):
        if not self.is_learner:
            return
        self.deliveries_since_report = 0
        # -1 means "nothing applied yet"; still reported, so a learner that
        # missed everything gets caught up by its acceptor
        self._send_version(self.applied_version())

    def _send_version(self, version: InstanceId):
        raise NotImplementedError

    # -- garbage collection ----------------------------------------------------

    def _note_version(self, origin: ProcessId, version: InstanceId):
        from . import control

        self.learner_versions, floor = control.gc_advance(
            self.learner_versions, origin, version, self.f_plus_1()
        )
        if floor > self.gc_floor:
            self.gc_floor = floor
            self._collect_below(floor)

    def f_plus_1(self) -> int:
        return self.deploy.f + 1

    def vote_vid(self, instance: InstanceId) -> Optional[ValueId]:
        """What this acceptor currently holds for an instance (checker hook)."""
        v = self.votes.get(instance)
        return v[1].vid if v else None

    def _catchup_due(self, learner: ProcessId, version: InstanceId) -> bool:
        """Push missed decisions only to a learner whose applied prefix has
        stalled: a merely busy learner advances between reports and must not
        be flooded with data it is about to receive anyway."""
        prev = self._catchup_seen.get(learner)
        self._catchup_seen[learner] = version
        return prev is not None and version <= prev

    def _collect_below(self, floor: InstanceId):
        for i in [i for i in self.votes if i <= floor]:
            del self.votes[i]
        for i in [i for i in self.decided_store if i <= floor]:
            del self.decided_store[i]

    # -- recovery serving --------------------------------------------------------

    def _serve_recover(self, src: ProcessId, req: Recover, stream: bool = False):
        """Answer a missing-instance query from stored votes and decisions.

        One message per instance: replies carry whole payloads, so bundling
        them would overflow any packet budget.
        """
        stale = []
        for i in req.instances:
            if i <= self.gc_floor and i not in self.decided_store:
                stale.append(i)
                continue
            vote = self.votes.get(i)
            decisions = ()
            if i in self.decided_store:
                decisions = ((i, self.decided_store[i]),)
            proposals = ()
            if vote is not None:
                proposals = ((i, vote[0], vote[1]),)
            if decisions or proposals:
                self._send(src, P2A(decisions, proposals), stream)
        if stale:
            helper = self._learner_with_version(max(stale))
            if helper != NIL:
                self._send(src, Recover(tuple(stale), redirect=helper), stream)

    def _learner_with_version(self, version: InstanceId) -> ProcessId:
        ok = sorted(p for p, v in self.learner_versions.items() if v >= version)
        return ok[0] if ok else NIL

    def _serve_recover_from_log(self, src: ProcessId, req: Recover,
                                stream: bool = False):
        """Learner-side recovery: replay applied decisions from the cache."""
        have = {i: (vid, payload) for i, vid, payload in self.applied_log}
        entries = [
            (i, have[i][0], have[i][1]) for i in req.instances if i in have
        ]
        for k in range(0, len(entries), 4):
            self._send(src, Decision(tuple(entries[k : k + 4])), stream)


# ---------------------------------------------------------------------------
# Classic Paxos engine (reference implementation and oracle).
# ---------------------------------------------------------------------------


@dataclass
class _CoordInstance:
    value: ValueEntry
    round: Round
    acks: set[ProcessId]
    decided: bool = False
    fresh: bool = True  # counts against the window
    last_sent: int = 0
    resends: int = 0


class PaxosEngine(Engine):
    """Single-coordinator multi-instance Paxos over unreliable unicast.

    The coordinator pre-executes Phase 1 for every instance above its known
    floor, then streams Phase 2 per proposal.  A decision needs a majority
    of matching Phase-2B votes for the coordinator's current round.
    """

    protocol = "paxos"

    def __init__(self, pid: ProcessId, deploy: Deployment):
        super().__init__(pid, deploy)
        from . import control

        self.quorum = quorum_size(len(deploy.acceptors))
        # coordinator state
        self.round = ROUND_ZERO
        self.max_round_counter = 0
        self.is_coord = False
        self.phase1_done = False
        self.promises: dict[ProcessId, P1B] = {}
        self.p1_evidence: dict[InstanceId, list[tuple[Round, ValueEntry]]] = {}
        self.p1_low = 0
        self.p1_resends = 0
        self.insts: dict[InstanceId, _CoordInstance] = {}
        self.next_inst = 0
        self.queue: deque[ValueEntry] = deque()
        self.known_vids: dict[ValueId, InstanceId] = {}
        self.flow = control.FlowState(
            window=self.params.window,
            min_window=self.params.min_window,
            max_window=self.params.max_window,
        )
        self.last_slowdown = -(10**9)
        self.decided_values: dict[InstanceId, tuple[ValueId, bytes]] = {}
        # learner payload store (classic learners get payloads with decisions)
        self.learned_payloads: dict[InstanceId, tuple[ValueId, bytes]] = {}

    # -- view ------------------------------------------------------------------

    def believed_coordinator(self) -> ProcessId:
        from . import control

        view = [
            p
            for p in self.deploy.acceptors
            if p == self.pid or p not in self.fd.suspected
        ]
        if not view:
            return min(self.deploy.acceptors)  # keep routing somewhere
        return control.elect_coordinator(view)

    def _coordinator_hint(self) -> ProcessId:
        return self.believed_coordinator()

    def _on_start(self):
        self._on_view_change()

    def _on_view_change(self):
        coord = self.believed_coordinator()
        if coord == self.pid and not self.is_coord:
            self._become_coordinator()
        elif coord != self.pid and self.is_coord:
            self.is_coord = False

    def _become_coordinator(self):
        self.is_coord = True
        self.max_round_counter += 1
        self.round = Round(self.max_round_counter, self.pid)
        self.phase1_done = False
        self.promises = {}
        self.p1_evidence = {}
        self.p1_resends = 0
        self.p1_low = self.gc_floor + 1
        # Values started under an older round are re-offered; Phase-1 evidence
        # decides whether they keep their old slot or ride a fresh one.
        leftovers = [
            st.value for _, st in sorted(self.insts.items()) if not st.decided
        ]
        self.insts = {}
        self.known_vids = {v: i for i, (v, _) in self.decided_values.items()}
        for entry in self.queue:
            self.known_vids[entry.vid] = -1
        for entry in reversed(leftovers):
            if entry.vid not in self.known_vids:
                self.known_vids[entry.vid] = -1
                self.queue.appendleft(entry)
        self._send_p1a()
        self._timer(("retx",), self.params.retx_interval)

    def _send_p1a(self):
        # Phase 1 runs over point-to-point streams: promise replies carry
        # whole voted values and must not be size-capped or lost wholesale
        msg = P1A(self.round, 0, (), self.p1_low)
        self._accept_p1a(self.pid, msg)  # promise to self
        for a in self.deploy.acceptors:
            if a != self.pid:
                self._send(a, msg, stream=True)

    # -- proposer routing --------------------------------------------------------

    def _forward_batch(self, entry: ValueEntry):
        coord = self.believed_coordinator()
        if coord == self.pid:
            self._admit(entry)
        else:
            self._send(coord, Proposal(entry))

    # -- message dispatch ----------------------------------------------------------

    def _on_msg(self, src: ProcessId, msg):
        t = type(msg)
        if t is P2A:
            self._acceptor_on_p2a(src, msg)
        elif t is P2B:
            self._coord_on_p2b(src, msg)
        elif t is Decision:
            self._learner_on_decision(src, msg)
        elif t is Proposal:
            if self.is_coord:
                self._admit(msg.entry)
            elif self.is_acceptor or self.is_learner or self.is_proposer:
                # not the coordinator (any more): let the proposer retransmit
                self.counters["dup_dropped"] += 1
        elif t is P1A:
            self._accept_p1a(src, msg)
        elif t is P1B:
            self._coord_on_p1b(src, msg)
        elif t is VersionReport:
            if self.is_acceptor or self.is_coord:
                self._note_version(msg.origin, msg.version)
                self._push_backlog(msg.origin, msg.version)
        elif t is Recover:
            if msg.redirect != NIL and self.is_learner:
                # we were told whom to ask
                self._send(msg.redirect, Recover(msg.instances))
            elif self.is_learner and not self.is_coord and not self.is_acceptor:
                self._serve_recover_from_log(src, msg)
            else:
                self._serve_recover(src, msg, stream=True)
                self._serve_recover_decided(src, msg)
                self._fill_requested_gaps(msg.instances)
        elif t is Heartbeat:
            pass
        else:
            self.counters["malformed"] += 1

    # -- acceptor ---------------------------------------------------------------

    def _accept_p1a(self, src: ProcessId, msg: P1A):
        if not self.is_acceptor:
            return
        if msg.round.counter > self.max_round_counter:
            self.max_round_counter = msg.round.counter
        if msg.round > self.promised_round:
            self.promised_round = msg.round
            self._persist_promise(msg.round)
            votes = tuple(
                (i, vr, vv)
                for i, (vr, vv) in sorted(self.votes.items())
                if i >= msg.low
            )
            reply = P1B(msg.round, msg.epoch, votes)
            if src == self.pid:
                self._coord_on_p1b(self.pid, reply)
            else:
                self._send(src, reply, stream=True)
        else:
            self.counters["stale_dropped"] += 1

    def _acceptor_on_p2a(self, src: ProcessId, msg: P2A):
        if self.is_learner:
            self._learner_on_packet_decisions(msg)
        if not self.is_acceptor:
            return
        for instance, rnd, entry in msg.proposals:
            if rnd >= self.promised_round:
                self.promised_round = rnd
                self.votes[instance] = (rnd, entry)
                self._persist_vote(instance, rnd, entry)
                reply = P2B(instance, rnd, entry.vid, 1)
                if rnd.owner == self.pid:
                    self._coord_on_p2b(self.pid, reply)
                else:
                    self._send(rnd.owner, reply)
            else:
                self.counters["stale_dropped"] += 1
        for instance, vid in msg.decisions:
            if instance > self.gc_floor:
                self.decided_store[instance] = vid

    # -- coordinator ----------------------------------------------------------------

    def _coord_on_p1b(self, src: ProcessId, msg: P1B):
        if not self.is_coord or msg.round != self.round or self.phase1_done:
            return
        self.promises[src] = msg
        if len(self.promises) < self.quorum:
            return
        self.phase1_done = True
        evidence: dict[InstanceId, list[tuple[Round, ValueEntry]]] = {}
        for pb in self.promises.values():
            for i, vr, vv in pb.votes:
                evidence.setdefault(i, []).append((vr, vv))
        self.p1_evidence = evidence
        # Re-propose everything the quorum has seen votes for; evidence-free
        # slots this process knows were opened get fillers, so the delivery
        # sequence never has a permanent hole.
        top = max(evidence) if evidence else -1
        fill_to = max(top + 1, self.next_inst, self.p1_low)
        for i in range(self.p1_low, fill_to):
            if i in self.decided_values:
                continue
            self._start_instance(i, fresh=False)
        self.next_inst = fill_to
        self._drain_queue()

    def _admit(self, entry: ValueEntry):
        if entry.vid in self.known_vids:
            self.counters["dup_dropped"] += 1
            return
        if len(self.queue) >= self.params.pending_cap:
            self.counters["queue_overflow"] += 1
            return
        self.known_vids[entry.vid] = -1
        self.queue.append(entry)
        self._drain_queue()

    def outstanding(self) -> int:
        return sum(1 for s in self.insts.values() if not s.decided and s.fresh)

    def _drain_queue(self):
        if not (self.is_coord and self.phase1_done):
            return
        while self.queue:
            # entries that got a slot through Phase-1 evidence are done
            if self.known_vids.get(self.queue[0].vid, -1) >= 0:
                self.queue.popleft()
                continue
            if self.outstanding() >= self.flow.window:
                break
            self._start_instance(self.next_inst, fresh=True)
            self.next_inst += 1

    def _start_instance(self, instance: InstanceId, fresh: bool):
        evidence = self.p1_evidence.get(instance, [])
        if fresh:
            entry = self.queue.popleft()
        else:
            prior = self.insts.get(instance)
            fallback = prior.value if prior else self._noop_entry()
            entry = fallback
        value = pick_value(evidence, entry) if evidence else entry
        if fresh and value.vid != entry.vid:
            # the slot was owned by an older value; requeue ours
            self.queue.appendleft(entry)
            fresh = False
        self.known_vids[value.vid] = instance
        self.insts[instance] = _CoordInstance(
            value, self.round, set(), fresh=fresh, last_sent=self.now
        )
        self._emit_p2a(instance)

    def _emit_p2a(self, instance: InstanceId):
        st = self.insts[instance]
        msg = P2A((), ((instance, st.round, st.value),))
        self._acceptor_on_p2a(self.pid, msg)  # vote locally
        for a in self.deploy.acceptors:
            if a != self.pid:
                self._send(a, msg)

    def _coord_on_p2b(self, src: ProcessId, msg: P2B):
        if not self.is_coord or msg.round != self.round:
            self.counters["stale_dropped"] += 1
            return
        st = self.insts.get(msg.instance)
        if st is None or st.decided or st.value.vid != msg.vid:
            return
        st.acks.add(src)
        if len(st.acks) >= self.quorum:
            st.decided = True
            self._decide(msg.instance, st.value)
            self._drain_queue()

    def _decide(self, instance: InstanceId, value: ValueEntry):
        self.decided_values[instance] = (value.vid, value.payload)
        self._acts.append(Decided(instance, value.vid))
        msg = Decision(((instance, value.vid, value.payload),))
        for l in self.deploy.learners:
            if l != self.pid:
                self._send(l, msg)
        if self.is_learner:
            self._learner_on_decision(self.pid, msg)

    # -- learner ---------------------------------------------------------------------

    def _learner_on_decision(self, src: ProcessId, msg: Decision):
        if not self.is_learner:
            return
        for instance, vid, payload in msg.entries:
            if payload is None:
                continue
            self._learn(instance, vid, payload)

    def _learner_on_packet_decisions(self, msg: P2A):
        pass  # classic learners are fed by Decision messages only

    def _stash_payload(self, instance, vid, payload):
        self.learned_payloads[instance] = (vid, payload)

    def _deliverable(self, instance):
        got = self.learned_payloads.get(instance)
        want = self.ordered.get(instance)
        if got is not None and want is not None and got[0] == want:
            return got
        return None

    def _after_apply(self, instance):
        self.learned_payloads.pop(instance, None)

    def _send_version(self, version: InstanceId):
        msg = VersionReport(self.pid, version, 0)
        for a in self.deploy.acceptors:
            if a == self.pid:
                self._note_version(self.pid, version)
            else:
                self._send(a, msg)

    # -- timers -------------------------------------------------------------------------

    def _on_timer(self, key: tuple):
        if key[0] == "retx":
            self._retx_sweep()
            if self.is_coord:
                self._timer(("retx",), self.params.retx_interval)

    def _retx_sweep(self):
        if not self.is_coord:
            return
        stale = self.now - self.params.retx_interval
        if not self.phase1_done:
            if self.p1_resends >= 1:
                self._become_coordinator()  # bigger round, fresh Phase 1
            else:
                self.p1_resends += 1
                self._send_p1a()
            return
        for i in sorted(self.insts):
            st = self.insts[i]
            if st.decided or st.last_sent > stale:
                continue
            if st.resends >= 1:
                self._become_coordinator()
                return
            st.resends += 1
            st.last_sent = self.now
            self._emit_p2a(i)

    def _recover_sweep(self):
        if not self.is_learner:
            return
        horizon = max(self.ordered, default=-1)
        missing = [
            i
            for i in range(self.next_deliver, horizon + 1)
            if self._deliverable(i) is None
        ][:64]
        if missing:
            self._send(self.believed_coordinator(), Recover(tuple(missing)))

    def _serve_recover_decided(self, src: ProcessId, msg: Recover):
        entries = []
        for i in msg.instances:
            dv = self.decided_values.get(i)
            if dv is not None:
                entries.append((i, dv[0], dv[1]))
        for k in range(0, len(entries), 4):
            self._send(src, Decision(tuple(entries[k : k + 4])), stream=True)

    def _push_backlog(self, learner: ProcessId, version: InstanceId):
        """Re-send decisions a stalled learner missed (loss healing)."""
        if not self.decided_values or not self._catchup_due(learner, version):
            return
        horizon = max(self.decided_values)
        if horizon <= version:
            return
        chunk = tuple(
            i
            for i in range(version + 1, min(version + 33, horizon + 1))
            if i in self.decided_values
        )
        if chunk:
            self._serve_recover_decided(learner, Recover(chunk))

    def _fill_requested_gaps(self, instances):
        """Close instance slots a learner reported missing that nobody is
        driving any more (their value was lost before gathering any vote)."""
        if not (self.is_coord and self.phase1_done):
            return
        for i in instances:
            if (
                i <= self.gc_floor
                or i in self.decided_values
                or i in self.insts
            ):
                continue
            if i >= self.next_inst:
                self.next_inst = i + 1
            self._start_instance(i, fresh=False)

    def _collect_below(self, floor: InstanceId):
        super()._collect_below(floor)
        for i in [i for i in self.decided_values if i <= floor]:
            del self.decided_values[i]
        for i in [i for i in self.insts if i <= floor]:
            del self.insts[i]
        for v in [v for v, i in self.known_vids.items() if 0 <= i <= floor]:
            del self.known_vids[v]
