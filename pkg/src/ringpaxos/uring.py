"""Unicast ring engine.

Every process sits in one directed ring over reliable FIFO links.  A
combined Phase 2A/2B message circulates from the coordinator (the first
acceptor) through the voting acceptors; the f-th acceptor after the
coordinator decides and starts the decision on its way around the ring.
Payload bytes cross each link at most once per instance: senders strip the
value whenever the receiver is known to hold it already, and the decision
stops carrying the value at the predecessor of its proposer.
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
    P2AB,
    Proposal,
    ProcessId,
    Recover,
    Round,
    ROUND_ZERO,
    ValueEntry,
    ValueId,
    VersionReport,
    pick_value,
)


@dataclass(frozen=True)
class URingView:
    """Ring membership as one process currently sees it."""

    epoch: int
    ring: tuple[ProcessId, ...]  # alive processes, configured order
    voting: tuple[ProcessId, ...]  # f+1 acceptors; [0] coordinates

    @property
    def coordinator(self) -> ProcessId:
        return self.voting[0]

    @property
    def last_acceptor(self) -> ProcessId:
        return self.voting[-1]

    def successor(self, pid: ProcessId) -> ProcessId:
        i = self.ring.index(pid)
        return self.ring[(i + 1) % len(self.ring)]

    def predecessor(self, pid: ProcessId) -> ProcessId:
        i = self.ring.index(pid)
        return self.ring[i - 1]


@dataclass
class _CoordInstance:
    value: ValueEntry
    round: Round
    decided: bool = False
    fresh: bool = True
    last_sent: int = 0
    resends: int = 0


class URingEngine(Engine):
    protocol = "uring"

    def __init__(self, pid: ProcessId, deploy: Deployment):
        super().__init__(pid, deploy)
        self.f = deploy.f
        self._acceptor_set = set(deploy.acceptors)
        self.epoch = 0
        self.view = self._compute_view()

        # payload propagation bookkeeping
        self.payload_by_vid: dict[ValueId, bytes] = {}
        self.sent_with_payload: set[ValueId] = set()
        self._relayed: set[tuple[InstanceId, Round]] = set()

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
        self.flow = control.FlowState(
            window=self.params.window,
            min_window=self.params.min_window,
            max_window=self.params.max_window,
            recovery_interval=self.params.recovery_interval,
        )

        # deciding acceptor
        self.pending_decisions: deque[tuple[InstanceId, ValueId]] = deque()
        self._dflush_armed = False

        # apply-before-forward
        self._forward_after_apply: deque[tuple[InstanceId, Decision]] = deque()
        self._recover_flip = False

    # -- view ------------------------------------------------------------------

    def _compute_view(self) -> URingView:
        alive = tuple(
            p
            for p in self.deploy.ring
            if p == self.pid or p not in self.suspected
        )
        voting = tuple(p for p in alive if p in self._acceptor_set)[
            : self.f + 1
        ]
        return URingView(self.epoch, alive, voting)

    def _on_start(self):
        self._on_view_change()

    def _on_view_change(self):
        old = self.view
        self.view = self._compute_view()
        if old.ring and self.view.ring:
            if old.successor(self.pid) != self.view.successor(self.pid):
                # new neighbor: it may not hold payloads we deduplicated
                self.sent_with_payload = set()
        if len(self.view.voting) <= self.f:
            self.is_coord = False
            return  # blocked: fewer than f+1 usable acceptors
        coord = self.view.coordinator
        if coord == self.pid and not self.is_coord:
            self._become_coordinator()
        elif coord != self.pid and self.is_coord:
            self.is_coord = False

    def _successor(self) -> ProcessId:
        return self.view.successor(self.pid)

    def is_voting(self) -> bool:
        return self.pid in self.view.voting

    # -- payload dedup ------------------------------------------------------------

    def _attach(self, vid: ValueId):
        """Payload to put on the wire toward the successor, or None."""
        if vid in self.sent_with_payload:
            return None
        payload = self.payload_by_vid.get(vid)
        if payload is None:
            return None
        self.sent_with_payload.add(vid)
        return payload

    def _resolve(self, vid: ValueId, payload) -> bytes | None:
        if payload is not None:
            self.payload_by_vid[vid] = payload
            return payload
        return self.payload_by_vid.get(vid)

    # -- proposals ------------------------------------------------------------------

    def _forward_batch(self, entry: ValueEntry):
        self.payload_by_vid[entry.vid] = entry.payload
        if self.view.coordinator == self.pid:
            self._admit(entry)
        else:
            self.sent_with_payload.add(entry.vid)
            self._send(self._successor(), Proposal(entry), stream=True)

    def _on_proposal(self, msg: Proposal):
        entry = msg.entry
        self.payload_by_vid[entry.vid] = entry.payload
        if self.view.coordinator == self.pid:
            self._admit(entry)
        else:
            self.sent_with_payload.add(entry.vid)
            self._send(self._successor(), msg, stream=True)

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

    # -- coordinator -------------------------------------------------------------------

    def _become_coordinator(self):
        self.is_coord = True
        self.epoch = self.epoch + 1
        self.view = self._compute_view()
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
        self.known_vids = {
            v: i for i, v in self.decided_store.items()
        }
        for entry in self.queue:
            self.known_vids[entry.vid] = -1
        for entry in reversed(leftovers):
            if entry.vid not in self.known_vids:
                self.known_vids[entry.vid] = -1
                self.queue.appendleft(entry)
        self._send_p1a()
        self._timer(("retx",), self.params.retx_interval)

    def _send_p1a(self):
        msg = P1A(self.round, self.epoch, self.view.ring, self.p1_low)
        for a in self.view.voting:
            if a == self.pid:
                self._accept_p1a(self.pid, msg)
            else:
                self._send(a, msg, stream=True)

    def _accept_p1a(self, src: ProcessId, msg: P1A):
        if not self.is_acceptor:
            return
        self.epoch = max(self.epoch, msg.epoch)
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

    def _coord_on_p1b(self, src: ProcessId, msg: P1B):
        if not self.is_coord or msg.round != self.round or self.phase1_done:
            return
        self.promises[src] = msg
        if not set(self.view.voting) <= set(self.promises):
            return
        self.phase1_done = True
        evidence: dict[InstanceId, list] = {}
        for pb in self.promises.values():
            for i, vr, vv in pb.votes:
                evidence.setdefault(i, []).append((vr, vv))
                self.payload_by_vid[vv.vid] = vv.payload
        self.p1_evidence = evidence
        top = max(evidence) if evidence else -1
        fill_to = max(top + 1, self.next_inst, self.p1_low)
        for i in range(self.p1_low, fill_to):
            if i not in self.decided_store:
                self._start_instance(i, fresh=False)
        self.next_inst = fill_to
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

    def _start_instance(self, instance: InstanceId, fresh: bool):
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
        self.payload_by_vid[value.vid] = value.payload
        self.insts[instance] = _CoordInstance(
            value, self.round, fresh=fresh, last_sent=self.now
        )
        if fresh:
            self.outstanding += 1
        # the coordinator's own vote rides along: votes starts at 1
        self.promised_round = self.round
        self.votes[instance] = (self.round, value)
        self._persist_vote(instance, self.round, value)
        self._emit_p2ab(instance)

    def _noop_entry(self) -> ValueEntry:
        entry = super()._noop_entry()
        self.payload_by_vid[entry.vid] = entry.payload
        return entry

    def _emit_p2ab(self, instance: InstanceId):
        st = self.insts[instance]
        st.last_sent = self.now
        vid = st.value.vid
        self._send(
            self._successor(),
            P2AB(instance, st.round, vid, self._attach(vid), 1),
            stream=True,
        )

    # -- phase 2a/2b around the ring ---------------------------------------------------

    def _on_p2ab(self, src: ProcessId, msg: P2AB):
        if msg.votes > self.f + 1:
            raise InvariantViolation(
                f"combined-phase votes {msg.votes} exceed quorum {self.f + 1}"
            )
        payload = self._resolve(msg.vid, msg.payload)
        if payload is None:
            # value id without the value: cannot vote, ask upstream
            self._send(src, Recover((msg.instance,)), stream=True)
            return
        votes = msg.votes
        if self.is_voting():
            if msg.round >= self.promised_round:
                prior = self.votes.get(msg.instance)
                fresh_vote = not (
                    prior is not None
                    and prior[0] == msg.round
                    and prior[1].vid == msg.vid
                )
                self.promised_round = msg.round
                if msg.round.counter > self.max_round_counter:
                    self.max_round_counter = msg.round.counter
                voted = ValueEntry(msg.vid, payload)
                self.votes[msg.instance] = (msg.round, voted)
                if fresh_vote:
                    # the count tallies distinct voters: a revisited or
                    # retransmitted message must not count a vote twice
                    self._persist_vote(msg.instance, msg.round, voted)
                    votes += 1
            else:
                self.counters["stale_dropped"] += 1
                return
            if self.pid == self.view.last_acceptor:
                if votes == self.f + 1:
                    self._decide_here(msg.instance, msg.vid)
                else:
                    # view is stale: keep the message moving
                    self._forward_p2ab(msg, votes)
                return
        self._forward_p2ab(msg, votes)

    def _forward_p2ab(self, msg: P2AB, votes: int):
        key = (msg.instance, msg.round)
        if key in self._relayed:
            self.counters["dup_dropped"] += 1  # cycle guard under stale views
            return
        self._relayed.add(key)
        self._send(
            self._successor(),
            P2AB(msg.instance, msg.round, msg.vid, self._attach(msg.vid), votes),
            stream=True,
        )

    def _decide_here(self, instance: InstanceId, vid: ValueId):
        if instance in self.decided_store:
            # a re-proposal reached us, so the earlier announcement must have
            # died with a neighbor: circulate the decision again
            self.sent_with_payload.discard(vid)
            self.pending_decisions.append((instance, vid))
            self._flush_decisions()
            return
        self.decided_store[instance] = vid
        self._acts.append(Decided(instance, vid))
        self.pending_decisions.append((instance, vid))
        if self.is_learner:
            self._learn(instance, vid, self.payload_by_vid[vid])
        if self.params.flush_ticks == 0:
            self._flush_decisions()
        elif not self._dflush_armed:
            self._dflush_armed = True
            self._timer(("dflush",), self.params.flush_ticks)

    def _flush_decisions(self):
        if not self.pending_decisions:
            return
        entries = []
        succ = self._successor()
        while self.pending_decisions:
            instance, vid = self.pending_decisions.popleft()
            payload = None if succ == vid.proposer else self._attach(vid)
            entries.append((instance, vid, payload))
        self._send_decision_msg(succ, Decision(tuple(entries)))

    def _send_decision_msg(self, dst: ProcessId, msg: Decision):
        if dst == self.pid:
            return
        self._send(dst, msg, stream=True)

    # -- decision circulation ---------------------------------------------------------

    def _on_decision(self, src: ProcessId, msg: Decision):
        resolved: list[tuple[InstanceId, ValueId, bytes]] = []
        for instance, vid, payload in msg.entries:
            got = self._resolve(vid, payload)
            if got is None:
                self._send(src, Recover((instance,)), stream=True)
                continue
            resolved.append((instance, vid, got))
        max_inst = -1
        for instance, vid, payload in resolved:
            self.decided_store.setdefault(instance, vid)
            max_inst = max(max_inst, instance)
            if self.is_coord:
                st = self.insts.get(instance)
                if st is not None and not st.decided:
                    st.decided = True
                    if st.fresh:
                        self.outstanding -= 1
            if self.is_learner:
                self._learn(instance, vid, payload)
        if not resolved:
            return
        from_ring = src == self.view.predecessor(self.pid)
        if not from_ring:
            pass  # recovery reply or stale routing: learn, do not circulate
        elif self.view.successor(self.pid) == self.view.last_acceptor:
            pass  # the decision has gone all the way around
        elif (
            self.is_learner
            and self.apply_ticks
            and max_inst > self.applied_version()
        ):
            # apply before forwarding (flow control)
            self._forward_after_apply.append((max_inst, msg))
        else:
            self._forward_decision(msg)
        if self.is_coord:
            self._drain_queue()

    def _forward_decision(self, msg: Decision):
        succ = self._successor()
        entries = []
        for instance, vid, _ in msg.entries:
            out = None if succ == vid.proposer else self._attach(vid)
            entries.append((instance, vid, out))
        self._send_decision_msg(succ, Decision(tuple(entries)))

    def _after_apply(self, instance: InstanceId):
        self.ordered.pop(instance, None)
        while self._forward_after_apply:
            upto, msg = self._forward_after_apply[0]
            if self.applied_version() < upto:
                break
            self._forward_after_apply.popleft()
            if self.view.successor(self.pid) != self.view.last_acceptor:
                self._forward_decision(msg)

    # -- learner ------------------------------------------------------------------------

    def _stash_payload(self, instance, vid, payload):
        self.payload_by_vid[vid] = payload

    def _deliverable(self, instance):
        vid = self.ordered.get(instance)
        if vid is None:
            return None
        payload = self.payload_by_vid.get(vid)
        if payload is None:
            return None
        return vid, payload

    def _send_version(self, version: InstanceId):
        self._send(
            self._successor(),
            VersionReport(self.pid, version, len(self.view.ring) - 1),
            stream=True,
        )

    def _on_version(self, msg: VersionReport):
        self._note_version(msg.origin, msg.version)
        if msg.ttl > 1:
            self._send(
                self._successor(),
                VersionReport(msg.origin, msg.version, msg.ttl - 1),
                stream=True,
            )
        if self.is_coord and msg.origin != self.pid:
            self._push_backlog(msg.origin, msg.version)

    def _push_backlog(self, learner: ProcessId, version: InstanceId):
        if not self._catchup_due(learner, version):
            return
        horizon = max(self.decided_store, default=-1)
        if horizon <= version:
            return
        entries = []
        for i in range(version + 1, min(version + 33, horizon + 1)):
            vid = self.decided_store.get(i)
            payload = self.payload_by_vid.get(vid) if vid is not None else None
            if vid is not None and payload is not None:
                entries.append((i, vid, payload))
        for k in range(0, len(entries), 4):
            self._send(learner, Decision(tuple(entries[k : k + 4])),
                       stream=True)

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
            self._recover_flip = not self._recover_flip
            target = (
                self.view.predecessor(self.pid)
                if self._recover_flip
                else self.view.coordinator
            )
            if target != self.pid:
                self._send(target, Recover(tuple(missing)), stream=True)

    def _on_recover(self, src: ProcessId, msg: Recover):
        if msg.redirect != NIL:
            self._send(msg.redirect, Recover(msg.instances), stream=True)
            return
        entries = []
        stale = []
        for i in msg.instances:
            vid = self.decided_store.get(i)
            payload = self.payload_by_vid.get(vid) if vid is not None else None
            if vid is not None and payload is not None:
                entries.append((i, vid, payload))
            elif i <= self.gc_floor:
                stale.append(i)
        for k in range(0, len(entries), 4):
            self._send(src, Decision(tuple(entries[k : k + 4])), stream=True)
        if stale:
            helper = self._learner_with_version(max(stale))
            if helper != NIL:
                self._send(src, Recover(tuple(stale), redirect=helper),
                           stream=True)
        self._fill_requested_gaps(msg.instances)

    def _fill_requested_gaps(self, instances):
        if not (self.is_coord and self.phase1_done):
            return
        for i in instances:
            if (
                i <= self.gc_floor
                or i in self.decided_store
                or i in self.insts
            ):
                continue
            if i >= self.next_inst:
                self.next_inst = i + 1
            self._start_instance(i, fresh=False)

    # -- dispatch ------------------------------------------------------------------------

    def _on_msg(self, src: ProcessId, msg):
        t = type(msg)
        if t is P2AB:
            self._on_p2ab(src, msg)
        elif t is Decision:
            self._on_decision(src, msg)
        elif t is Proposal:
            self._on_proposal(msg)
        elif t is P1A:
            self._accept_p1a(src, msg)
        elif t is P1B:
            self._coord_on_p1b(src, msg)
        elif t is VersionReport:
            self._on_version(msg)
        elif t is Recover:
            self._on_recover(src, msg)
        elif t is Heartbeat:
            pass
        else:
            self.counters["malformed"] += 1

    # -- timers ---------------------------------------------------------------------------

    def _on_timer(self, key: tuple):
        kind = key[0]
        if kind == "retx":
            self._retx_sweep()
            if self.is_coord:
                self._timer(("retx",), self.params.retx_interval)
        elif kind == "dflush":
            self._dflush_armed = False
            self._flush_decisions()

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
        for i in sorted(self.insts):
            st = self.insts[i]
            if st.decided or st.last_sent > stale:
                continue
            if st.resends >= 1:
                self.is_coord = False
                self._become_coordinator()
                return
            st.resends += 1
            self.sent_with_payload.discard(st.value.vid)
            self._emit_p2ab(i)

    def _collect_below(self, floor: InstanceId):
        for i, vid in list(self.decided_store.items()):
            if i <= floor:
                self.payload_by_vid.pop(vid, None)
                self.sent_with_payload.discard(vid)
                self.known_vids.pop(vid, None)
        super()._collect_below(floor)
        for i in [i for i in self.insts if i <= floor]:
            del self.insts[i]
        self._relayed = {k for k in self._relayed if k[0] > floor}
