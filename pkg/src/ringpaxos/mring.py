"""Multicast ring engine.

Consensus runs on value ids.  The coordinator disseminates proposals (and
piggybacked decisions) to acceptors and learners in one multicast packet;
votes travel as a single Phase-2B message around a ring made of exactly one
majority quorum of acceptors, with the coordinator last.  Acceptors outside
the ring are spares, kept cold until a re-layout promotes one.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from . import control
from .core import (
    Decided,
    Decision,
    Deployment,
    Engine,
    Heartbeat,
    InstanceId,
    InvariantViolation,
    NIL,
    P1A,
    P1B,
    P2A,
    P2B,
    Proposal,
    ProcessId,
    Recover,
    RingChange,
    Round,
    ROUND_ZERO,
    Slowdown,
    ValueEntry,
    ValueId,
    VersionReport,
    quorum_size,
)


@dataclass(frozen=True)
class RingConfig:
    """One majority quorum of acceptors in send order; coordinator last."""

    epoch: int
    ring: tuple[ProcessId, ...]
    coordinator: ProcessId
    spares: tuple[ProcessId, ...]

    def first(self) -> ProcessId:
        return self.ring[0]

    def successor(self, pid: ProcessId) -> ProcessId:
        i = self.ring.index(pid)
        return self.ring[(i + 1) % len(self.ring)]

    def preferential_acceptor(self, learner: ProcessId) -> ProcessId:
        return self.ring[learner % len(self.ring)]


def layout_ring(acceptors, suspected, coordinator: ProcessId):
    """Pick the quorum ring: unsuspected acceptors in ascending id order,
    coordinator moved to the end; everyone else eligible becomes a spare."""
    eligible = sorted(set(acceptors) - set(suspected))
    need = quorum_size(len(acceptors))
    if coordinator not in eligible:
        raise control.NoQuorum(f"coordinator {coordinator} not eligible")
    if len(eligible) < need:
        raise control.NoQuorum(
            f"only {len(eligible)} unsuspected acceptors, need {need}"
        )
    others = [p for p in eligible if p != coordinator][: need - 1]
    ring = tuple(others) + (coordinator,)
    spares = tuple(p for p in eligible if p not in ring)
    return ring, spares


@dataclass
class _CoordInstance:
    value: ValueEntry
    round: Round
    decided: bool = False
    fresh: bool = True
    last_sent: int = 0
    resends: int = 0


class MRingEngine(Engine):
    protocol = "mring"

    def __init__(self, pid: ProcessId, deploy: Deployment):
        super().__init__(pid, deploy)
        self.f = deploy.f
        ring, spares = layout_ring(deploy.acceptors, (), min(deploy.acceptors))
        self.view = RingConfig(0, ring, ring[-1], spares)
        self.max_epoch = 0

        # coordinator
        self.round = ROUND_ZERO
        self.max_round_counter = 0
        self.is_coord = False
        self.phase1_done = False
        self.promises: dict[ProcessId, P1B] = {}
        self.p1_evidence: dict[InstanceId, list] = {}
        self.p1_low = 0
        self.p1_resends = 0
        self.insts: dict[InstanceId, _CoordInstance] = {}
        self.next_inst = 0
        self.outstanding = 0
        self.queue: deque[ValueEntry] = deque()
        self.known_vids: dict[ValueId, InstanceId] = {}
        self.pending_decisions: deque[tuple[InstanceId, ValueId]] = deque()
        self._dflush_armed = False
        self.decided_values: dict[InstanceId, tuple[ValueId, bytes]] = {}
        self.flow = control.FlowState(
            window=self.params.window,
            min_window=self.params.min_window,
            max_window=self.params.max_window,
            recovery_interval=self.params.recovery_interval,
        )
        self.last_slowdown = -(10**9)

        # acceptor
        self.parked: dict[InstanceId, P2B] = {}
        self._forwarded: set[tuple[InstanceId, Round]] = set()

        # learner: instance -> (round-or-None, entry); round None means the
        # payload arrived through recovery and is final.
        self.cache: dict[InstanceId, tuple] = {}
        self.last_slowdown_sent = -(10**9)
        self._recover_flip = False

    # -- view handling -------------------------------------------------------

    def in_ring(self) -> bool:
        return self.pid in self.view.ring

    def believed_coordinator(self) -> ProcessId:
        view = [
            p
            for p in self.deploy.acceptors
            if p == self.pid or p not in self.suspected
        ]
        if not view:
            return min(self.deploy.acceptors)
        return control.elect_coordinator(view)

    def _coordinator_hint(self) -> ProcessId:
        return self.believed_coordinator()

    def _adopt_view(self, epoch, ring, coordinator, spares) -> bool:
        if (epoch, coordinator) <= (self.view.epoch, self.view.coordinator):
            return False
        self.view = RingConfig(epoch, tuple(ring), coordinator, tuple(spares))
        self.max_epoch = max(self.max_epoch, epoch)
        return True

    def _on_start(self):
        self._on_view_change()

    def _on_view_change(self):
        coord = self.believed_coordinator()
        if coord == self.pid and not self.is_coord:
            self._become_coordinator()
        elif coord != self.pid and self.is_coord:
            self.is_coord = False

    # -- coordinator ----------------------------------------------------------

    def _become_coordinator(self):
        try:
            ring, spares = layout_ring(
                self.deploy.acceptors, self.suspected, self.pid
            )
        except control.NoQuorum:
            return  # blocked until suspicions are revoked
        self.is_coord = True
        self.max_epoch += 1
        self.view = RingConfig(self.max_epoch, ring, self.pid, spares)
        self.max_round_counter += 1
        self.round = Round(self.max_round_counter, self.pid)
        self.phase1_done = False
        self.promises = {}
        self.p1_evidence = {}
        self.p1_resends = 0
        self.p1_low = self.gc_floor + 1
        leftovers = [
            st.value for _, st in sorted(self.insts.items()) if not st.decided
        ]
        self.insts = {}
        self.outstanding = 0
        self.known_vids = {v: i for i, (v, _) in self.decided_values.items()}
        for entry in self.queue:
            self.known_vids[entry.vid] = -1
        for entry in reversed(leftovers):
            if entry.vid not in self.known_vids:
                self.known_vids[entry.vid] = -1
                self.queue.appendleft(entry)
        self._send_p1a()
        self._timer(("retx",), self.params.retx_interval)
        self._timer(("wrec",), self.params.recovery_interval)

    def _send_p1a(self):
        # point-to-point streams: promise replies carry voted payloads
        msg = P1A(self.round, self.view.epoch, self.view.ring, self.p1_low)
        for a in self.view.ring:
            if a == self.pid:
                self._accept_p1a(self.pid, msg)
            else:
                self._send(a, msg, stream=True)

    def _coord_on_p1b(self, src: ProcessId, msg: P1B):
        if not self.is_coord or msg.round != self.round or self.phase1_done:
            return
        self.promises[src] = msg
        if not set(self.view.ring) <= set(self.promises):
            return
        self.phase1_done = True
        evidence: dict[InstanceId, list] = {}
        for pb in self.promises.values():
            for i, vr, vv in pb.votes:
                evidence.setdefault(i, []).append((vr, vv))
        self.p1_evidence = evidence
        self._mcast(
            RingChange(
                self.view.epoch, self.view.ring, self.pid, self.view.spares
            )
        )
        # Close every instance this process knows was ever opened: slots with
        # quorum evidence are re-proposed, evidence-free holes get a filler so
        # learners never stall on a permanent gap.
        top = max(evidence) if evidence else -1
        fill_to = max(top + 1, self.next_inst, self.p1_low)
        for i in range(self.p1_low, fill_to):
            if i not in self.decided_values:
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

    def _drain_queue(self):
        if not (self.is_coord and self.phase1_done):
            return
        while self.queue:
            if self.known_vids.get(self.queue[0].vid, -1) >= 0:
                self.queue.popleft()
                continue
            if self.outstanding >= self.flow.window:
                break
            self._start_instance(self.next_inst, fresh=True)
            self.next_inst += 1
        if self.pending_decisions and self.params.flush_ticks == 0:
            self._flush_decisions()

    def _start_instance(self, instance: InstanceId, fresh: bool):
        from .core import pick_value

        evidence = self.p1_evidence.get(instance, [])
        if fresh:
            entry = self.queue.popleft()
        else:
            entry = self._noop_entry()
        value = pick_value(evidence, entry) if evidence else entry
        if fresh and value.vid != entry.vid:
            self.queue.appendleft(entry)
            fresh = False
        self.known_vids[value.vid] = instance
        self.insts[instance] = _CoordInstance(
            value, self.round, fresh=fresh, last_sent=self.now
        )
        if fresh:
            self.outstanding += 1
        self._emit_packet(instance)

    def _take_pending_decisions(self, reserved: int = 0) -> tuple:
        room = self.params.packet_bytes - 1024 - reserved
        budget = max(0, room // 24)
        out = []
        while self.pending_decisions and len(out) < budget:
            out.append(self.pending_decisions.popleft())
        return tuple(out)

    def _emit_packet(self, instance: InstanceId):
        st = self.insts[instance]
        st.last_sent = self.now
        packet = P2A(
            self._take_pending_decisions(reserved=len(st.value.payload)),
            ((instance, st.round, st.value),),
        )
        self._mcast(packet)

    def _flush_decisions(self):
        while self.pending_decisions:
            self._mcast(P2A(self._take_pending_decisions(), ()))

    def _decide(self, instance: InstanceId, value: ValueEntry):
        self.decided_values[instance] = (value.vid, value.payload)
        self.decided_store[instance] = value.vid
        self._acts.append(Decided(instance, value.vid))
        self.pending_decisions.append((instance, value.vid))
        if self.params.flush_ticks == 0:
            self._flush_decisions()
        elif not self._dflush_armed:
            self._dflush_armed = True
            self._timer(("dflush",), self.params.flush_ticks)

    # -- acceptor ---------------------------------------------------------------

    def _accept_p1a(self, src: ProcessId, msg: P1A):
        if not self.is_acceptor:
            return
        self.max_epoch = max(self.max_epoch, msg.epoch)
        if msg.round.counter > self.max_round_counter:
            self.max_round_counter = msg.round.counter
        if msg.round > self.promised_round:
            self.promised_round = msg.round
            self._adopt_view(msg.epoch, msg.ring, msg.round.owner, ())
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

    def _acceptor_on_p2a(self, msg: P2A):
        if not self.in_ring():
            return  # spares stay cold
        for instance, vid in msg.decisions:
            if instance > self.gc_floor:
                self.decided_store[instance] = vid
        for instance, rnd, entry in msg.proposals:
            if rnd >= self.promised_round:
                self.promised_round = rnd
                if rnd.counter > self.max_round_counter:
                    self.max_round_counter = rnd.counter
                self.votes[instance] = (rnd, entry)
                self._persist_vote(instance, rnd, entry)
                if self.pid == self.view.first():
                    self._send(
                        self.view.successor(self.pid),
                        P2B(instance, rnd, entry.vid, 1),
                    )
                self._check_parked(instance)
            else:
                self.counters["stale_dropped"] += 1

    def _acceptor_on_p2b(self, src: ProcessId, msg: P2B):
        if msg.votes > self.f + 1:
            raise InvariantViolation(
                f"phase-2b vote count {msg.votes} exceeds ring size {self.f + 1}"
            )
        if not self.in_ring():
            self.counters["stale_dropped"] += 1
            return
        if msg.round < self.promised_round:
            self.counters["stale_dropped"] += 1
            return
        vote = self.votes.get(msg.instance)
        if vote is None or vote[0] != msg.round or vote[1].vid != msg.vid:
            # voted value not here yet: hold until the matching proposal lands
            self.parked[msg.instance] = msg
            self._timer(("parked",), self.params.parked_interval)
            return
        if self.pid == msg.round.owner:
            st = self.insts.get(msg.instance)
            if (
                self.is_coord
                and st is not None
                and not st.decided
                and st.round == msg.round
                and st.value.vid == msg.vid
                and msg.votes == self.f  # every other ring member voted
            ):
                st.decided = True
                if st.fresh:
                    self.outstanding -= 1
                self._decide(msg.instance, st.value)
                self._drain_queue()
        elif msg.votes + 1 <= self.f + 1:
            key = (msg.instance, msg.round)
            if key in self._forwarded:
                self.counters["dup_dropped"] += 1  # cycle guard
                return
            self._forwarded.add(key)
            self._send(
                self.view.successor(self.pid),
                P2B(msg.instance, msg.round, msg.vid, msg.votes + 1),
            )
        else:
            self.counters["stale_dropped"] += 1

    def _check_parked(self, instance: InstanceId):
        msg = self.parked.pop(instance, None)
        if msg is not None:
            self._acceptor_on_p2b(NIL, msg)

    def _parked_sweep(self):
        missing = []
        for i in sorted(self.parked):
            msg = self.parked[i]
            if msg.round < self.promised_round:
                del self.parked[i]
                continue
            vote = self.votes.get(i)
            if vote is not None and vote[0] == msg.round and vote[1].vid == msg.vid:
                self._check_parked(i)
            else:
                missing.append(i)
        if missing:
            owner = self.parked[missing[0]].round.owner
            self._send(owner, Recover(tuple(missing[:64])))
            self._timer(("parked",), self.params.parked_interval)

    # -- learner -------------------------------------------------------------------

    def pref_acceptor(self) -> ProcessId:
        return self.view.preferential_acceptor(self.pid)

    def _learner_on_p2a(self, msg: P2A):
        for instance, rnd, entry in msg.proposals:
            if instance < self.next_deliver:
                continue
            cur = self.cache.get(instance)
            if cur is not None and cur[0] is not None:
                if cur[0] == rnd and cur[1].vid != entry.vid:
                    raise InvariantViolation(
                        f"instance {instance}: two values for round {rnd}"
                    )
                if cur[0] > rnd:
                    continue
            if cur is None and len(self.cache) >= self.params.learner_slots:
                self.counters["cache_overflow"] += 1
                continue
            self.cache[instance] = (rnd, entry)
        for instance, vid in msg.decisions:
            if instance >= self.next_deliver:
                self.ordered[instance] = vid
        self._pump_learn()
        self._maybe_slowdown()

    def _stash_payload(self, instance, vid, payload):
        self.cache[instance] = (None, ValueEntry(vid, payload))

    def _deliverable(self, instance):
        want = self.ordered.get(instance)
        got = self.cache.get(instance)
        if want is None or got is None or got[1].vid != want:
            return None
        return want, got[1].payload

    def _after_apply(self, instance):
        self.cache.pop(instance, None)
        self.ordered.pop(instance, None)

    def _maybe_slowdown(self):
        backlog = control.learner_backpressure(
            self.backlog(), self.params.learner_slots, self.params.slow_threshold
        )
        if backlog is None:
            return
        if self.now - self.last_slowdown_sent < self.params.version_interval:
            return
        self.last_slowdown_sent = self.now
        self._send(self.pref_acceptor(), Slowdown(self.pid, backlog))

    def _send_version(self, version: InstanceId):
        self._send(
            self.pref_acceptor(),
            VersionReport(self.pid, version, self.f + 1),
        )

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
            # alternate between the fast path and the authoritative one: the
            # preferential acceptor may itself have missed a decision packet
            self._recover_flip = not self._recover_flip
            target = (
                self.pref_acceptor()
                if self._recover_flip
                else self.believed_coordinator()
            )
            self._send(target, Recover(tuple(missing)))

    # -- dispatch -----------------------------------------------------------------

    def _forward_batch(self, entry: ValueEntry):
        coord = self.believed_coordinator()
        if coord == self.pid:
            self._admit(entry)
        else:
            self._send(coord, Proposal(entry))

    def _on_msg(self, src: ProcessId, msg):
        t = type(msg)
        if t is P2A:
            if self.is_learner:
                self._learner_on_p2a(msg)
            if self.is_acceptor:
                self._acceptor_on_p2a(msg)
        elif t is P2B:
            if self.is_acceptor:
                self._acceptor_on_p2b(src, msg)
        elif t is Proposal:
            if self.is_coord:
                self._admit(msg.entry)
            else:
                self.counters["dup_dropped"] += 1
        elif t is Decision:
            # recovery replies from a redirected learner
            if self.is_learner:
                for instance, vid, payload in msg.entries:
                    if payload is not None:
                        self._learn(instance, vid, payload)
        elif t is P1A:
            self._accept_p1a(src, msg)
        elif t is P1B:
            self._coord_on_p1b(src, msg)
        elif t is Slowdown:
            self._on_slowdown(msg)
        elif t is VersionReport:
            self._on_version(msg)
        elif t is RingChange:
            self._adopt_view(msg.epoch, msg.ring, msg.coordinator, msg.spares)
        elif t is Recover:
            self._on_recover(src, msg)
        elif t is Heartbeat:
            pass
        else:
            self.counters["malformed"] += 1

    def _on_slowdown(self, msg: Slowdown):
        if self.is_coord:
            self.flow.on_slowdown()
            self.last_slowdown = self.now
        elif self.in_ring():
            self._send(self.view.successor(self.pid), msg)

    def _on_version(self, msg: VersionReport):
        if not self.is_acceptor:
            return
        self._note_version(msg.origin, msg.version)
        if self.in_ring() and msg.ttl > 1:
            self._send(
                self.view.successor(self.pid),
                VersionReport(msg.origin, msg.version, msg.ttl - 1),
            )
        if msg.ttl == self.f + 1 or self.is_coord:
            # first hop (the learner's own acceptor) or the coordinator,
            # whose decision record is authoritative
            self._push_backlog(msg.origin, msg.version)

    def _push_backlog(self, learner: ProcessId, version: InstanceId):
        """A learner stalled behind the decided horizon gets the next chunk;
        datagram loss of earlier packets is healed this way."""
        if not self._catchup_due(learner, version):
            return
        horizon = max(self.decided_store, default=-1)
        if horizon <= version:
            return
        chunk = [
            i
            for i in range(version + 1, min(version + 33, horizon + 1))
            if i in self.decided_store
        ]
        if chunk:
            self._serve_recover(learner, Recover(tuple(chunk)), stream=True)

    def _on_recover(self, src: ProcessId, msg: Recover):
        if msg.redirect != NIL:
            if self.is_learner:
                self._send(msg.redirect, Recover(msg.instances))
            return
        if self.is_acceptor and (self.in_ring() or self.is_coord):
            if self.is_coord:
                # serve from coordinator-side decided values too
                entries = []
                for i in msg.instances:
                    dv = self.decided_values.get(i)
                    if dv is not None:
                        entries.append((i, dv[0], dv[1]))
                for k in range(0, len(entries), 4):
                    self._send(src, Decision(tuple(entries[k : k + 4])),
                               stream=True)
                self._fill_requested_gaps(msg.instances)
            self._serve_recover(src, msg, stream=True)
        elif self.is_learner:
            self._serve_recover_from_log(src, msg, stream=True)

    def _fill_requested_gaps(self, instances):
        """A learner asked about an instance nobody is driving: some past
        coordinator opened it and every trace of it was lost.  Close the
        slot with a filler so delivery can get past it."""
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

    # -- timers ----------------------------------------------------------------------

    def _on_timer(self, key: tuple):
        kind = key[0]
        if kind == "retx":
            self._retx_sweep()
            if self.is_coord:
                self._timer(("retx",), self.params.retx_interval)
        elif kind == "parked":
            self._parked_sweep()
        elif kind == "dflush":
            self._dflush_armed = False
            if self.is_coord and self.pending_decisions:
                self._flush_decisions()
        elif kind == "wrec":
            if self.is_coord:
                quiet = self.now - self.last_slowdown
                if quiet >= self.params.recovery_interval:
                    control.window_recover(flow=self.flow, quiet_for=quiet)
                    self._drain_queue()
                self._timer(("wrec",), self.params.recovery_interval)

    def _retx_sweep(self):
        if not self.is_coord:
            return
        if not self.phase1_done:
            if self.p1_resends >= 1:
                self.is_coord = False
                self._become_coordinator()
            else:
                self.p1_resends += 1
                self._send_p1a()
            return
        stale = self.now - self.params.retx_interval
        budget = 8  # pace resends; a full-window barrage feeds the overload
        for i in sorted(self.insts):
            st = self.insts[i]
            if st.decided or st.last_sent > stale:
                continue
            if st.resends >= 1:
                self.is_coord = False
                self._become_coordinator()
                return
            st.resends += 1
            self._emit_packet(i)
            budget -= 1
            if budget == 0:
                break

    def _collect_below(self, floor: InstanceId):
        super()._collect_below(floor)
        for i in [i for i in self.decided_values if i <= floor]:
            del self.decided_values[i]
        for i in [i for i in self.insts if i <= floor]:
            del self.insts[i]
        for v in [v for v, i in self.known_vids.items() if 0 <= i <= floor]:
            del self.known_vids[v]
        for i in [i for i in self.parked if i <= floor]:
            del self.parked[i]
        self._forwarded = {k for k in self._forwarded if k[0] > floor}
