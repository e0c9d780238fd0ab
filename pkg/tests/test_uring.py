"""Unicast ring engine: proposal forwarding, the combined phase message,
decision truncation, and ordered delivery."""

import pytest

from ringpaxos import simnet
from ringpaxos.core import (
    Decided,
    Decision,
    Deliver,
    Deployment,
    P2AB,
    Params,
    Proposal,
    Recv,
    Round,
    Send,
    SetApplyRate,
    Submit,
    ValueEntry,
    ValueId,
    encode_batch,
)
from ringpaxos.uring import URingEngine


def make_ring(f=1, extras=1):
    n_acc = 2 * f + 1
    ring = tuple(range(n_acc + extras))
    deploy = Deployment(
        protocol="uring",
        f=f,
        acceptors=tuple(range(n_acc)),
        learners=ring,
        proposers=ring,
        ring=ring,
        params=Params(batch_ticks=0, flush_ticks=0),
    )
    return {pid: URingEngine(pid, deploy) for pid in ring}, deploy


def sends(acts, msg_type=None):
    out = [a for a in acts if isinstance(a, Send)]
    if msg_type is not None:
        out = [a for a in out if isinstance(a.msg, msg_type)]
    return out


def entry(payload=b"A", proposer=2, seq=0):
    return ValueEntry(ValueId(proposer, seq), encode_batch([payload]))


def test_non_coordinator_forwards_proposal_to_successor():
    engines, deploy = make_ring()
    eng = engines[3]  # ring (0,1,2,3): successor of 3 wraps to 0
    eng.start(0)
    acts = eng.step(1, Submit(b"hello"))
    fwd = sends(acts, Proposal)
    assert len(fwd) == 1 and fwd[0].dst == 0
    assert fwd[0].msg.entry.vid == ValueId(3, 0)


def test_relay_passes_proposal_toward_coordinator():
    engines, _ = make_ring()
    eng = engines[2]  # not the coordinator: relays
    eng.start(0)
    e = entry(b"v", 1, 0)
    acts = eng.step(1, Recv(1, Proposal(e)))
    fwd = sends(acts, Proposal)
    assert len(fwd) == 1 and fwd[0].dst == 3
    assert eng.payload_by_vid[e.vid] == e.payload


def test_coordinator_starts_phase2_with_own_vote():
    from ringpaxos.core import P1B

    engines, _ = make_ring()
    coord = engines[0]
    coord.start(0)
    coord.step(1, Recv(1, P1B(coord.round, coord.epoch, ())))
    assert coord.phase1_done
    acts = coord.step(2, Submit(b"go"))
    out = sends(acts, P2AB)
    assert len(out) == 1 and out[0].dst == 1
    msg = out[0].msg
    assert msg.votes == 1 and msg.payload is not None
    assert coord.votes[0][1].vid == msg.vid


def test_last_acceptor_decides_at_full_quorum():
    engines, _ = make_ring()  # f=1: voting (0, 1), last acceptor 1
    eng = engines[1]
    eng.start(0)
    e = entry()
    acts = eng.step(1, Recv(0, P2AB(0, Round(1, 0), e.vid, e.payload, 1)))
    assert any(isinstance(a, Decided) for a in acts)
    out = sends(acts, Decision)
    assert out and out[0].dst == 2


def test_middle_acceptor_forwards_with_incremented_votes():
    engines, _ = make_ring(f=2)  # voting (0, 1, 2); 1 is in the middle
    eng = engines[1]
    eng.start(0)
    e = entry()
    acts = eng.step(1, Recv(0, P2AB(0, Round(1, 0), e.vid, e.payload, 1)))
    out = sends(acts, P2AB)
    assert out and out[0].dst == 2 and out[0].msg.votes == 2


def test_stale_round_dropped_by_voter():
    engines, _ = make_ring()
    eng = engines[1]
    eng.start(0)
    eng.promised_round = Round(5, 0)
    e = entry()
    acts = eng.step(1, Recv(0, P2AB(0, Round(1, 0), e.vid, e.payload, 1)))
    assert not sends(acts)
    assert eng.counters["stale_dropped"] == 1


def test_non_voting_member_relays_unchanged():
    engines, _ = make_ring()  # ring (0,1,2,3); 2 and 3 do not vote
    eng = engines[2]
    eng.start(0)
    e = entry()
    acts = eng.step(1, Recv(1, P2AB(0, Round(1, 0), e.vid, e.payload, 2)))
    out = sends(acts, P2AB)
    assert out and out[0].dst == 3 and out[0].msg.votes == 2
    assert 0 not in eng.votes


def run_single_value(f, proposer_pos, extras=0, payload=b"xyz"):
    params = Params(batch_ticks=0, flush_ticks=0)
    deploy = simnet.build_deployment("uring", f, extra_learners=extras,
                                     params=params)
    cfg = simnet.SimConfig(deploy=deploy, seed=11, max_ticks=8000,
                           record_messages=True)
    proposer = deploy.ring[proposer_pos]
    sim = simnet.Sim(cfg, [(50, proposer, payload)])
    trace = sim.run()
    return sim, trace, deploy


def test_decision_truncation_full_trace():
    """Payload bytes cross each directed link at most once; the decision
    stops carrying the value from the chosen value's proposer onward, and
    everyone still delivers exactly once."""
    for f, pos in [(1, 1), (1, 2), (2, 1), (2, 3), (2, 0)]:
        sim, trace, deploy = run_single_value(f, pos)
        assert simnet.check_safety(trace).ok
        n = len(deploy.ring)
        # every process delivered exactly once
        per_pid = {}
        for r in trace.deliveries():
            per_pid.setdefault(r[2], []).append(r)
        assert set(per_pid) == set(deploy.ring)
        assert all(len(v) == 1 for v in per_pid.values())
        # reconstruct payload-carrying hops from the engines' dedup sets:
        # every link carried the payload at most once
        vid = ValueId(deploy.ring[pos], 0)
        carried = [
            pid for pid in deploy.ring
            if vid in sim.procs[pid].engine.sent_with_payload
        ]
        assert len(carried) == len(set(carried)) <= n


def test_decision_value_absent_from_proposer_predecessor_onward():
    engines, _ = make_ring(f=1, extras=2)  # ring (0,1,2,3,4)
    # decision for a value proposed by 3: node 2 (its predecessor) strips
    eng = engines[2]
    eng.start(0)
    e = entry(b"vv", 3, 0)
    eng.payload_by_vid[e.vid] = e.payload
    acts = eng.step(1, Recv(1, Decision(((0, e.vid, e.payload),))))
    out = sends(acts, Decision)
    assert out and out[0].dst == 3
    assert out[0].msg.entries[0][2] is None  # stripped for the proposer


def test_decision_stops_at_predecessor_of_last_acceptor():
    engines, _ = make_ring(f=1, extras=2)  # voting (0,1); last acceptor 1
    eng = engines[0]  # predecessor of the last acceptor
    eng.start(0)
    e = entry(b"vv", 3, 0)
    acts = eng.step(1, Recv(4, Decision(((0, e.vid, e.payload),))))
    assert not sends(acts, Decision)
    assert any(isinstance(a, Deliver) for a in acts)


def test_worst_position_latency_bounded_by_5f():
    for f in (1, 2, 3):
        sim, trace, deploy = run_single_value(f, 1)
        assert simnet.measure_steps(trace, 0) == 5 * f


def test_two_proposers_get_instances_in_arrival_order():
    params = Params(batch_ticks=0, flush_ticks=0)
    deploy = simnet.build_deployment("uring", 1, extra_learners=0,
                                     params=params)
    cfg = simnet.SimConfig(deploy=deploy, seed=5, max_ticks=8000)
    # proposer 1 is adjacent to the coordinator; proposer 2 is farther but
    # submits earlier, so its value arrives first
    wl = [(50, deploy.ring[2], b"first"), (60, deploy.ring[1], b"second")]
    sim = simnet.Sim(cfg, wl)
    trace = sim.run()
    assert simnet.check_safety(trace).ok
    order = [
        (r[4], r[5]) for r in trace.deliveries() if r[2] == deploy.ring[0]
    ]
    arrival_oracle = [(deploy.ring[2], 0), (deploy.ring[1], 0)]
    assert order == arrival_oracle


def test_learner_holds_out_of_order_decision():
    engines, _ = make_ring()
    eng = engines[3]
    eng.start(0)
    e0, e1 = entry(b"a", 2, 0), entry(b"b", 2, 1)
    acts = eng.step(1, Recv(2, Decision(((1, e1.vid, e1.payload),))))
    assert not [a for a in acts if isinstance(a, Deliver)]
    acts = eng.step(2, Recv(2, Decision(((0, e0.vid, e0.payload),))))
    dels = [a for a in acts if isinstance(a, Deliver)]
    assert [d.instance for d in dels] == [0, 1]


def test_flow_control_applies_before_forwarding():
    engines, _ = make_ring(f=1, extras=2)  # ring (0,1,2,3,4)
    eng = engines[2]
    eng.start(0)
    eng.step(0, SetApplyRate(50))  # active flow control: apply is paced
    e = entry(b"vv", 0, 0)
    acts = eng.step(1, Recv(1, Decision(((0, e.vid, e.payload),))))
    # neither applied nor forwarded yet
    assert not [a for a in acts if isinstance(a, Deliver)]
    assert not sends(acts, Decision)
    from ringpaxos.core import Timer

    acts = eng.step(60, Timer(("apply",)))
    assert [a for a in acts if isinstance(a, Deliver)]
    assert sends(acts, Decision)  # forwarded only after the apply
