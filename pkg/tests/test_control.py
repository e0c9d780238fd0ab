"""Flow control, election, garbage collection, suspicion, stable storage."""

import os
import random

import pytest

from ringpaxos import control, simnet
from ringpaxos.core import Params, PaxosEngine, Recv, Timer
from ringpaxos.mring import MRingEngine


# -- election -------------------------------------------------------------------


def test_elect_lowest_unsuspected():
    assert control.elect_coordinator({2, 4, 5}) == 2


def test_elect_empty_view_is_no_quorum():
    with pytest.raises(control.NoQuorum):
        control.elect_coordinator(set())


def test_disjoint_suspicions_elect_differently_but_safely():
    """Two observers with different suspicion sets may pick different
    coordinators; the simulated dual-coordinator interval stays safe."""
    deploy = simnet.build_deployment("mring", 1)
    cfg = simnet.SimConfig(
        deploy=deploy, seed=9, gst=2600,
        outages=((200, 2500, 0, 1), (200, 2500, 1, 0)),
        max_ticks=60000,
    )
    wl = [(100 + 150 * i, deploy.proposers[0], b"m%d" % i) for i in range(8)]
    sim = simnet.Sim(cfg, wl)
    trace = sim.run()
    assert simnet.check_safety(trace).ok
    deadline = simnet.liveness_deadline(cfg, wl[-1][0])
    assert simnet.check_liveness(sim, trace, deadline).ok


# -- flow window -------------------------------------------------------------------


def test_slowdown_halves_window():
    fs = control.FlowState(window=16)
    fs.on_slowdown()
    assert fs.window == 8
    for _ in range(10):
        fs.on_slowdown()
    assert fs.window == fs.min_window


def test_window_recover_additive():
    fs = control.FlowState(window=8, recovery_interval=100)
    control.window_recover(fs, 200)
    assert fs.window == 9
    control.window_recover(fs, 100)
    assert fs.window == 10
    control.window_recover(fs, 50)  # not quiet long enough
    assert fs.window == 10


def test_window_capped_at_max():
    fs = control.FlowState(window=256, max_window=256, recovery_interval=1)
    control.window_recover(fs, 10)
    assert fs.window == 256


def test_window_oscillation_stays_in_bounds():
    rng = random.Random(7)
    fs = control.FlowState(window=16, min_window=1, max_window=64,
                           recovery_interval=10)
    for _ in range(1000):
        if rng.random() < 0.5:
            fs.on_slowdown()
        else:
            control.window_recover(fs, rng.randrange(0, 40))
        assert fs.min_window <= fs.window <= fs.max_window


def test_backpressure_threshold():
    assert control.learner_backpressure(81, 100, 0.8) == 81
    assert control.learner_backpressure(50, 100, 0.8) is None


# -- garbage collection ---------------------------------------------------------------


def test_gc_floor_needs_f_plus_one_reports():
    versions = {}
    versions, floor = control.gc_advance(versions, 10, 10, need=2)
    assert floor == -1  # one report only
    versions, floor = control.gc_advance(versions, 11, 7, need=2)
    assert floor == 7  # min over reporters


def test_gc_ignores_stale_reports():
    versions = {10: 9}
    versions, floor = control.gc_advance(versions, 10, 5, need=1)
    assert versions[10] == 9
    assert floor == 9


def test_gc_floor_monotone():
    versions = {}
    floors = []
    for v in (3, 1, 8, 2, 9):
        versions, floor = control.gc_advance(versions, 1, v, need=1)
        floors.append(floor)
    assert floors == sorted(floors)


def test_gc_redirects_requests_below_floor_to_learner():
    from ringpaxos.core import Deployment, Recover, Send, Recover as R

    deploy = simnet.build_deployment("mring", 1)
    eng = MRingEngine(0, deploy)
    eng.start(0)
    eng.learner_versions = {3: 10, 4: 8}
    eng.gc_floor = 7
    acts = eng.step(1, Recv(4, Recover((5,))))
    redirects = [a for a in acts if isinstance(a, Send)
                 and isinstance(a.msg, Recover) and a.msg.redirect != -1]
    assert redirects and redirects[0].msg.redirect == 3


# -- suspicion ----------------------------------------------------------------------


def test_suspicion_is_revocable():
    fd = control.SuspicionState([1, 2], timeout=100)
    fd.heard(1, 50)
    assert fd.sweep(500)  # both silent beyond the timeout
    assert fd.suspected == {1, 2}
    assert fd.heard(1, 501)  # traffic revokes the suspicion
    assert fd.suspected == {2}


# -- retransmission ------------------------------------------------------------------


def test_unanswered_proposal_resent_then_round_bumped():
    deploy = simnet.build_deployment("paxos", 1)
    eng = PaxosEngine(0, deploy)
    eng.start(0)
    from ringpaxos.core import P1B, Proposal, Send, P2A, ValueEntry, ValueId

    eng.step(1, Recv(1, P1B(eng.round, 0, ())))
    assert eng.phase1_done
    round_before = eng.round
    eng.step(2, Recv(3, Proposal(ValueEntry(ValueId(3, 0), b"\x00\x00\x00\x01x"))))
    # first expiry: identical resend
    acts = eng.step(2 + eng.params.retx_interval + 1, Timer(("retx",)))
    resends = [a for a in acts if isinstance(a, Send) and isinstance(a.msg, P2A)]
    assert resends and eng.round == round_before
    # second expiry: bigger round, phase 1 re-run
    acts = eng.step(2 + 2 * eng.params.retx_interval + 2, Timer(("retx",)))
    assert eng.round > round_before
    assert not eng.phase1_done


def test_timely_response_cancels_nothing_but_avoids_resend():
    deploy = simnet.build_deployment("paxos", 1)
    eng = PaxosEngine(0, deploy)
    eng.start(0)
    from ringpaxos.core import P1B, P2B, Proposal, Send, P2A, ValueEntry, ValueId

    eng.step(1, Recv(1, P1B(eng.round, 0, ())))
    eng.step(2, Recv(3, Proposal(ValueEntry(ValueId(3, 0), b"\x00\x00\x00\x01x"))))
    eng.step(3, Recv(1, P2B(0, eng.round, ValueId(3, 0), 1)))  # decided
    acts = eng.step(2 + eng.params.retx_interval + 1, Timer(("retx",)))
    assert not [a for a in acts if isinstance(a, Send) and isinstance(a.msg, P2A)]


# -- stable storage -------------------------------------------------------------------


def test_wal_roundtrip(tmp_path):
    path = tmp_path / "acceptor.wal"
    wal = control.WriteAheadLog(path, sync=False)
    deltas = [b"alpha", b"beta" * 100, b"gamma"]
    for d in deltas:
        wal.append(d)
    wal.close()
    assert control.replay(path) == deltas


def test_wal_many_blocks(tmp_path):
    path = tmp_path / "big.wal"
    wal = control.WriteAheadLog(path, sync=False)
    deltas = [bytes([i % 256]) * 5000 for i in range(40)]
    for d in deltas:
        wal.append(d)
    wal.close()
    assert control.replay(path) == deltas
    assert os.path.getsize(path) % control.BLOCK_SIZE == 0


def test_wal_torn_tail_discarded(tmp_path):
    path = tmp_path / "torn.wal"
    wal = control.WriteAheadLog(path, sync=False)
    wal.append(b"first")
    wal.flush()
    wal.append(b"second")
    wal.flush()
    wal.close()
    with open(path, "r+b") as fh:
        fh.truncate(os.path.getsize(path) - 100)  # torn write
    assert control.replay(path) == [b"first"]


def test_wal_corrupt_block_stops_replay(tmp_path):
    path = tmp_path / "corrupt.wal"
    wal = control.WriteAheadLog(path, sync=False)
    wal.append(b"first")
    wal.flush()
    wal.append(b"second")
    wal.flush()
    wal.close()
    with open(path, "r+b") as fh:
        fh.seek(control.BLOCK_SIZE + 9)  # inside the second block's body
        fh.write(b"\xff\xff\xff")
    assert control.replay(path) == [b"first"]


def test_persistence_off_means_no_deltas():
    deploy = simnet.build_deployment("mring", 1)
    eng = MRingEngine(1, deploy)
    eng.start(0)
    from ringpaxos.core import P2A, Persist, Round, ValueEntry, ValueId

    e = ValueEntry(ValueId(3, 0), b"\x00\x00\x00\x01x")
    acts = eng.step(1, Recv(0, P2A((), ((0, Round(1, 0), e),))))
    assert not [a for a in acts if isinstance(a, Persist)]


def test_persistence_on_emits_delta_before_reply():
    params = Params(persist=True)
    deploy = simnet.build_deployment("mring", 1, params=params)
    eng = MRingEngine(1, deploy)
    eng.start(0)
    from ringpaxos.core import P2A, P2B, Persist, Round, Send, ValueEntry, ValueId

    e = ValueEntry(ValueId(3, 0), b"\x00\x00\x00\x01x")
    acts = eng.step(1, Recv(0, P2A((), ((0, Round(1, 0), e),))))
    kinds = [type(a).__name__ for a in acts]
    # the durability barrier precedes the vote emission
    assert kinds.index("Persist") < kinds.index("Send")


def test_delta_codec_roundtrip():
    from ringpaxos.core import Round, ValueEntry, ValueId

    rnd = Round(7, 3)
    assert control.decode_delta(control.promise_delta(rnd)) == ("promise", rnd)
    entry = ValueEntry(ValueId(4, 9), b"\x00\x00\x00\x02ab")
    assert control.decode_delta(control.vote_delta(11, rnd, entry)) == (
        "vote", 11, rnd, entry,
    )


def test_crash_between_write_and_reply_preserves_safety(tmp_path):
    """An acceptor crashes after persisting its promise and vote but before
    any reply leaves; after replay it still refuses older rounds and still
    reports its vote, so no decision can be contradicted."""
    from ringpaxos.core import (
        P1A, P1B, P2A, Persist, Round, Send, ValueEntry, ValueId,
    )

    params = Params(persist=True)
    deploy = simnet.build_deployment("paxos", 1, params=params)
    path = tmp_path / "a1.wal"
    wal = control.WriteAheadLog(path, sync=False)

    eng = PaxosEngine(1, deploy)
    eng.start(0)
    voted = ValueEntry(ValueId(3, 0), b"\x00\x00\x00\x01x")
    for ev in (
        Recv(0, P1A(Round(5, 0), 0, (), 0)),
        Recv(0, P2A((), ((0, Round(5, 0), voted),))),
    ):
        for a in eng.step(1, ev):
            if isinstance(a, Persist):
                wal.append(a.delta)
                wal.flush()  # durable before the reply would leave
    wal.close()

    # crash: the process state is gone; replay rebuilds the acceptor
    restarted = PaxosEngine(1, deploy)
    control.restore_acceptor(restarted, control.replay(path))
    restarted.start(0)
    assert restarted.promised_round == Round(5, 0)
    assert restarted.votes[0] == (Round(5, 0), voted)

    # an older round is refused after the restart
    acts = restarted.step(2, Recv(2, P1A(Round(3, 2), 0, (), 0)))
    assert not [a for a in acts if isinstance(a, Send)]

    # a newer coordinator learns the vote, so the decided value survives
    acts = restarted.step(3, Recv(2, P1A(Round(6, 2), 0, (), 0)))
    (reply,) = [a for a in acts if isinstance(a, Send)
                and isinstance(a.msg, P1B)]
    assert reply.msg.votes == ((0, Round(5, 0), voted),)
