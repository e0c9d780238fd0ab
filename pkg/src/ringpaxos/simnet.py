"""Deterministic discrete-event network simulator and checker.

Runs any protocol engine over seeded lossy datagrams and FIFO streams with
configurable delays, directional outages, crashes, and a global
stabilization time after which losses and crashes stop.  Produces an
append-only trace that an independent validator checks for agreement,
ordered gap-free delivery, validity, and quorum evidence.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field

from .core import (
    Decided,
    Deliver,
    Deployment,
    Engine,
    InstanceId,
    Mcast,
    NewBatch,
    Params,
    Persist,
    ProcessId,
    Recv,
    Send,
    SetApplyRate,
    StartTimer,
    Submit,
    Timer,
    ValueId,
    payload_crc,
)
from .mring import MRingEngine
from .uring import URingEngine
from .core import PaxosEngine

ENGINES = {"paxos": PaxosEngine, "mring": MRingEngine, "uring": URingEngine}


@dataclass
class SimConfig:
    deploy: Deployment
    seed: int = 0
    delay: tuple[int, int] = (1, 1)  # per-hop tick range, uniform
    loss: float = 0.0  # datagram loss probability before gst
    gst: int = 0  # after this tick: no loss, no crashes
    max_ticks: int = 200_000
    crashes: tuple[tuple[int, ProcessId], ...] = ()
    # directional link outages (t0, t1, src, dst): datagrams dropped,
    # stream traffic held back until t1
    outages: tuple[tuple[int, int, ProcessId, ProcessId], ...] = ()
    # (time, learner, ticks-per-apply); 0 restores free application
    apply_schedule: tuple[tuple[int, ProcessId, int], ...] = ()
    record_messages: bool = False
    trace_level: str = "full"  # 'full' | 'counters'
    stop_when_complete: bool = True

    def __post_init__(self):
        for t0, t1, _, _ in self.outages:
            if t1 > self.gst and self.gst:
                raise ValueError("outages must end by gst")
        for t, _ in self.crashes:
            if self.gst and t >= self.gst:
                raise ValueError("crashes must happen before gst")


class Trace:
    """Append-only event log with a stable, diffable TSV rendering."""

    FIELDS = {
        "SUBMIT": ("t", "pid", "seq", "size", "crc"),
        "BATCH": ("t", "pid", "vp", "vs", "size", "crc", "first_submit",
                  "filler"),
        "DECIDE": ("t", "pid", "instance", "vp", "vs", "evidence"),
        "DELIVER": ("t", "pid", "instance", "vp", "vs", "size", "crc"),
        "CRASH": ("t", "pid"),
        "MSG": ("t", "src", "dst", "kind", "info"),
        "DROP": ("t", "src", "dst", "kind"),
    }

    def __init__(self, protocol: str, f: int, learners, crashed=()):
        self.protocol = protocol
        self.f = f
        self.learners = tuple(learners)
        self.crashed = set(crashed)
        self.rows: list[tuple] = []

    def add(self, kind: str, *vals):
        self.rows.append((kind, *vals))

    def to_tsv(self) -> str:
        out = [f"# protocol={self.protocol} f={self.f} "
               f"learners={','.join(map(str, self.learners))} "
               f"crashed={','.join(map(str, sorted(self.crashed)))}"]
        for row in self.rows:
            out.append("\t".join(str(v) for v in row))
        return "\n".join(out) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "Trace":
        lines = [l for l in text.splitlines() if l.strip()]
        meta = {}
        for part in lines[0].lstrip("# ").split():
            k, _, v = part.partition("=")
            meta[k] = v
        learners = tuple(int(x) for x in meta["learners"].split(",") if x)
        crashed = tuple(int(x) for x in meta.get("crashed", "").split(",") if x)
        tr = cls(meta["protocol"], int(meta["f"]), learners, crashed)
        for line in lines[1:]:
            parts = line.split("\t")
            kind = parts[0]
            vals = [int(p) if p.lstrip("-").isdigit() else p for p in parts[1:]]
            tr.rows.append((kind, *vals))
        return tr

    # convenience selectors
    def deliveries(self):
        return [r for r in self.rows if r[0] == "DELIVER"]

    def decisions(self):
        return [r for r in self.rows if r[0] == "DECIDE"]

    def batches(self):
        return [r for r in self.rows if r[0] == "BATCH"]


@dataclass
class Verdict:
    ok: bool
    errors: list[str] = field(default_factory=list)

    def __bool__(self):
        return self.ok


def check_safety(trace: Trace) -> Verdict:
    """Independent validator: recomputes the agreement, order, validity and
    quorum-evidence properties from raw trace rows."""
    errors = []

    proposed: dict[tuple[int, int], tuple[int, int]] = {}
    for _, t, pid, vp, vs, size, crc, _fs, _filler in trace.batches():
        proposed[(vp, vs)] = (size, crc)

    # (ii) at most one value id decided or delivered per instance
    seen_vid: dict[int, tuple[int, int]] = {}
    for row in trace.rows:
        kind = row[0]
        if kind == "DECIDE":
            _, t, pid, instance, vp, vs, ev = row
        elif kind == "DELIVER":
            _, t, pid, instance, vp, vs, size, crc = row
        else:
            continue
        vid = (vp, vs)
        prev = seen_vid.get(instance)
        if prev is None:
            seen_vid[instance] = vid
        elif prev != vid:
            errors.append(
                f"instance {instance}: two different values {prev} and {vid}"
            )

    # quorum evidence at decision time
    need = trace.f + 1
    for _, t, pid, instance, vp, vs, ev in trace.decisions():
        if ev < need:
            errors.append(
                f"instance {instance}: decided at t={t} with only {ev} of "
                f"{need} supporting acceptors"
            )

    # per-learner gap-free ascending delivery, identical across learners
    per_learner: dict[int, list[tuple[int, tuple[int, int]]]] = {}
    for _, t, pid, instance, vp, vs, size, crc in trace.deliveries():
        per_learner.setdefault(pid, []).append((instance, (vp, vs)))
        if (vp, vs) not in proposed:
            errors.append(
                f"instance {instance}: learner {pid} delivered value "
                f"({vp},{vs}) that nobody proposed"
            )
        else:
            want_size, want_crc = proposed[(vp, vs)]
            if (size, crc) != (want_size, want_crc):
                errors.append(
                    f"instance {instance}: learner {pid} delivered corrupted "
                    f"payload for ({vp},{vs})"
                )
    for pid, seq in per_learner.items():
        insts = [i for i, _ in seq]
        if insts != list(range(len(insts))):
            errors.append(
                f"learner {pid}: delivery sequence has gaps or reordering "
                f"(first bad index near {next((k for k, i in enumerate(insts) if i != k), '?')})"
            )
    sequences = {}
    for pid, seq in per_learner.items():
        sequences[pid] = [v for _, v in seq]
    pids = sorted(sequences)
    for a, b in zip(pids, pids[1:]):
        sa, sb = sequences[a], sequences[b]
        n = min(len(sa), len(sb))
        if sa[:n] != sb[:n]:
            k = next(i for i in range(n) if sa[i] != sb[i])
            errors.append(
                f"instance {k}: learners {a} and {b} delivered different values"
            )

    return Verdict(not errors, errors)


def measure_steps(trace: Trace, instance: InstanceId) -> int:
    """Message delays from proposal submission to last correct delivery.

    Valid for unit-delay failure-free runs, where elapsed ticks equal hops.
    """
    deliveries = [
        r for r in trace.deliveries()
        if r[3] == instance and r[2] not in trace.crashed
    ]
    if not deliveries:
        raise ValueError(f"instance {instance} was never delivered")
    vid = (deliveries[0][4], deliveries[0][5])
    last_t = max(r[1] for r in deliveries)
    for _, t, pid, vp, vs, size, crc, first_submit, _filler in trace.batches():
        if (vp, vs) == vid:
            return last_t - first_submit
    raise ValueError(f"no batch record for instance {instance}")


# ---------------------------------------------------------------------------
# The simulator proper.
# ---------------------------------------------------------------------------

_RECV, _TIMER, _SUBMIT, _CRASH, _APPLYRATE = range(5)


class _Proc:
    __slots__ = ("engine", "alive", "timer_gen", "wal")

    def __init__(self, engine):
        self.engine = engine
        self.alive = True
        self.timer_gen: dict[tuple, int] = {}
        self.wal = None


class Sim:
    def __init__(self, config: SimConfig, workload=(), workload_gen=None):
        self.config = config
        self.deploy = config.deploy
        self.rng = random.Random(config.seed)
        self.now = 0
        self._seq = 0
        self.heap: list = []
        self.procs: dict[ProcessId, _Proc] = {}
        self.crash_times = dict()
        for t, pid in config.crashes:
            self.crash_times[pid] = t
        self.trace = Trace(
            self.deploy.protocol,
            self.deploy.f,
            self.deploy.learners,
            [pid for _, pid in config.crashes],
        )
        self.counters = {"datagrams_lost": 0, "sent": 0}
        self._stream_clock: dict[tuple[ProcessId, ProcessId], int] = {}
        # at the 'counters' trace level only counts are kept: million-instance
        # runs cannot afford per-value sets
        self._light = config.trace_level != "full"
        self.delivered_vids: dict[ProcessId, set] = {
            l: set() for l in self.deploy.learners
        }
        self.delivered_counts: dict[ProcessId, int] = {
            l: 0 for l in self.deploy.learners
        }
        self.proposed_vids: dict[ValueId, int] = {}
        self.client_vids: dict[ValueId, int] = {}
        self.client_count = 0
        self._probe = None
        self._probe_every = 0

        for pid in self.deploy.all_pids():
            eng = ENGINES[self.deploy.protocol](pid, self.deploy)
            self.procs[pid] = _Proc(eng)

        submit_seq = 0
        for t, proposer, payload in workload:
            self._push(t, proposer, _SUBMIT, (submit_seq, payload))
            submit_seq += 1
        self._workload_gen = workload_gen
        self._submit_seq = submit_seq
        for t, pid in config.crashes:
            self._push(t, pid, _CRASH, None)
        for t, pid, ticks in config.apply_schedule:
            self._push(t, pid, _APPLYRATE, ticks)

    # -- scheduling ------------------------------------------------------------

    def _push(self, t, pid, kind, payload):
        self._seq += 1
        heapq.heappush(self.heap, (t, self._seq, pid, kind, payload))

    def submit_later(self, t, proposer, payload):
        self._push(t, proposer, _SUBMIT, (self._submit_seq, payload))
        self._submit_seq += 1

    def probe(self, every_ticks: int, fn):
        self._probe_every = every_ticks
        self._probe = fn

    def _outage(self, src, dst):
        for t0, t1, s, d in self.config.outages:
            if s == src and d == dst and t0 <= self.now < t1:
                return t1
        return None

    def _schedule_msg(self, src, dst, msg, stream):
        self.counters["sent"] += 1
        lo, hi = self.config.delay
        delay = lo if lo == hi else self.rng.randint(lo, hi)
        release = self.now
        held_until = self._outage(src, dst)
        if held_until is not None:
            if not stream:
                if self.config.record_messages:
                    self.trace.add("DROP", self.now, src, dst,
                                   type(msg).__name__)
                return
            release = held_until
        elif not stream:
            lossy = self.config.loss > 0 and (
                not self.config.gst or self.now < self.config.gst
            )
            if lossy and self.rng.random() < self.config.loss:
                self.counters["datagrams_lost"] += 1
                if self.config.record_messages:
                    self.trace.add("DROP", self.now, src, dst,
                                   type(msg).__name__)
                return
        arrival = release + delay
        if stream:
            key = (src, dst)
            arrival = max(arrival, self._stream_clock.get(key, 0))
            self._stream_clock[key] = arrival
        if self.config.record_messages:
            self.trace.add("MSG", self.now, src, dst, type(msg).__name__, "")
        self._push(arrival, dst, _RECV, (src, msg, stream))

    def _mcast_targets(self, sender_engine):
        if self.deploy.protocol == "mring":
            ring = sender_engine.view.ring
            targets = list(ring)
            for l in self.deploy.learners:
                if l not in ring:
                    targets.append(l)
            return targets
        return list(dict.fromkeys(self.deploy.acceptors + self.deploy.learners))

    # -- action handling ----------------------------------------------------------

    def _handle_actions(self, pid, acts):
        proc = self.procs[pid]
        trace_full = self.config.trace_level == "full"
        for act in acts:
            ta = type(act)
            if ta is Send:
                self._schedule_msg(pid, act.dst, act.msg, act.stream)
            elif ta is Mcast:
                for dst in self._mcast_targets(proc.engine):
                    self._schedule_msg(pid, dst, act.msg, False)
            elif ta is StartTimer:
                gen = proc.timer_gen.get(act.key, 0) + 1
                proc.timer_gen[act.key] = gen
                self._push(self.now + act.delay, pid, _TIMER, (act.key, gen))
            elif ta is Deliver:
                self.delivered_counts[pid] += 1
                if trace_full:
                    self.delivered_vids[pid].add(act.vid)
                    self.trace.add(
                        "DELIVER", self.now, pid, act.instance,
                        act.vid.proposer, act.vid.seq, len(act.payload),
                        payload_crc(act.payload),
                    )
            elif ta is Decided:
                evidence = sum(
                    1
                    for a in self.deploy.acceptors
                    if self.procs[a].engine.vote_vid(act.instance) == act.vid
                )
                if trace_full:
                    self.trace.add(
                        "DECIDE", self.now, pid, act.instance,
                        act.vid.proposer, act.vid.seq, evidence,
                    )
                elif evidence < self.deploy.f + 1:
                    raise AssertionError(
                        f"decision for {act.instance} with {evidence} votes"
                    )
            elif ta is NewBatch:
                if not act.filler:
                    self.client_count += 1
                if trace_full:
                    if not act.filler:
                        self.client_vids[act.vid] = self.now
                    self.proposed_vids[act.vid] = self.now
                    self.trace.add(
                        "BATCH", self.now, pid, act.vid.proposer, act.vid.seq,
                        act.size, act.crc, act.first_submit, int(act.filler),
                    )
            elif ta is Persist:
                if proc.wal is not None:
                    proc.wal.append(act.delta)
                    proc.wal.flush()

    # -- completion tracking ---------------------------------------------------------

    def correct_learners(self):
        return [l for l in self.deploy.learners if l not in self.crash_times]

    def correct_proposer_vids(self):
        """Client batches everyone must deliver: from proposers that never
        crash (internal fillers are exempt, they may be superseded)."""
        return {
            vid
            for vid in self.client_vids
            if vid.proposer not in self.crash_times
        }

    def complete(self) -> bool:
        if self._light:
            # counter approximation: every correct learner applied at least
            # as many decisions as there were client batches
            return self.client_count > 0 and all(
                self.delivered_counts[l] >= self.client_count
                for l in self.correct_learners()
            )
        want = self.correct_proposer_vids()
        if not want:
            return False
        for l in self.correct_learners():
            if not want <= self.delivered_vids[l]:
                return False
        return True

    # -- main loop ----------------------------------------------------------------------

    def run(self) -> Trace:
        for pid, proc in self.procs.items():
            self._handle_actions(pid, proc.engine.start(0))
        steps = 0
        pending_submits = sum(
            1 for _, _, _, k, _ in self.heap if k == _SUBMIT
        )
        next_probe = self._probe_every
        while self.heap:
            t, _, pid, kind, payload = heapq.heappop(self.heap)
            if t > self.config.max_ticks:
                break
            self.now = t
            proc = self.procs[pid]
            if kind == _CRASH:
                proc.alive = False
                self.trace.add("CRASH", t, pid)
                continue
            if not proc.alive:
                continue
            if kind == _RECV:
                src, msg, stream = payload
                acts = proc.engine.step(t, Recv(src, msg))
            elif kind == _TIMER:
                key, gen = payload
                if proc.timer_gen.get(key) != gen:
                    continue
                acts = proc.engine.step(t, Timer(key))
            elif kind == _SUBMIT:
                seq, data = payload
                pending_submits -= 1
                if self.config.trace_level == "full":
                    self.trace.add(
                        "SUBMIT", t, pid, seq, len(data), payload_crc(data)
                    )
                acts = proc.engine.step(t, Submit(data))
                if self._workload_gen is not None:
                    if self._workload_gen(self, seq):
                        pending_submits += 1
                    else:
                        self._workload_gen = None  # exhausted
            elif kind == _APPLYRATE:
                acts = proc.engine.step(t, SetApplyRate(payload))
            else:
                continue
            self._handle_actions(pid, acts)
            steps += 1
            if self._probe and t >= next_probe:
                self._probe(self)
                next_probe = t + self._probe_every
            if (
                self.config.stop_when_complete
                and pending_submits == 0
                and self._workload_gen is None
                and steps % 512 == 0
                and self.complete()
            ):
                break
        return self.trace


def run(config: SimConfig, workload=(), workload_gen=None) -> Trace:
    """Drive one deterministic simulation to quiescence or the time bound."""
    return Sim(config, workload, workload_gen).run()


# ---------------------------------------------------------------------------
# Deployment builders shared by tests, campaigns and the CLI.
# ---------------------------------------------------------------------------


def build_deployment(
    protocol: str,
    f: int,
    extra_learners: int = 2,
    proposers: int = 1,
    params: Params | None = None,
) -> Deployment:
    params = params or Params()
    acceptors = tuple(range(2 * f + 1))
    if protocol == "uring":
        # every ring process plays proposer, acceptor, and learner; extra
        # learner-only members extend the ring
        extras = tuple(range(2 * f + 1, 2 * f + 1 + extra_learners))
        ring = acceptors + extras
        return Deployment(
            protocol=protocol,
            f=f,
            acceptors=acceptors,
            learners=ring,
            proposers=acceptors,
            ring=ring,
            params=params,
        )
    first = 2 * f + 1
    learners = tuple(range(first, first + max(extra_learners, proposers)))
    return Deployment(
        protocol=protocol,
        f=f,
        acceptors=acceptors,
        learners=learners,
        proposers=learners[:proposers],
        params=params,
    )


def liveness_deadline(config: SimConfig, last_submit: int) -> int:
    """Delivery deadline: ten post-stabilization protocol round trips after
    the system is quiet (stabilized, last submission, last crash)."""
    p = config.deploy.params
    rt_bound = (
        p.fd_timeout
        + p.retx_interval
        + p.proposer_retx
        + (4 + 2 * config.deploy.f) * config.delay[1]
    )
    base = max(config.gst, last_submit,
               max((t for t, _ in config.crashes), default=0))
    return base + 10 * rt_bound


def check_liveness(sim: Sim, trace: Trace, deadline: int) -> Verdict:
    errors = []
    want = sim.correct_proposer_vids()
    for l in sim.correct_learners():
        missing = want - sim.delivered_vids[l]
        if missing:
            errors.append(
                f"learner {l} missing {len(missing)} values at "
                f"t={sim.now} (deadline {deadline})"
            )
    late = [
        r for r in trace.deliveries()
        if r[1] > deadline and r[2] not in trace.crashed
    ]
    if late:
        errors.append(f"{len(late)} deliveries after the deadline {deadline}")
    return Verdict(not errors, errors)


def crash_suite(protocol: str, f: int, seed: int = 0) -> Verdict:
    """Targeted crash coverage: one ring acceptor, one spare (multicast
    protocol only), and the coordinator, each at a randomized time; the run
    must re-form a ring and deliver everything proposed by correct
    proposers."""
    errors = []
    rng = random.Random(seed)
    targets = []
    acceptors = list(range(2 * f + 1))
    if protocol == "mring":
        targets.append(("acceptor", acceptors[1]))
        if len(acceptors) > f + 1:
            targets.append(("spare", acceptors[-1]))
        targets.append(("coordinator", 0))
    elif protocol == "uring":
        targets.append(("acceptor", acceptors[1] if f >= 1 else acceptors[0]))
        targets.append(("coordinator", 0))
    else:
        targets.append(("acceptor", acceptors[1]))
        targets.append(("coordinator", 0))
    for label, victim in targets:
        crash_t = rng.randrange(300, 1200)
        deploy = build_deployment(protocol, f)
        workload = []
        t = 100
        proposer_pool = [
            p for p in deploy.proposers if p != victim
        ] or list(deploy.proposers)
        for i in range(12):
            workload.append((t, proposer_pool[i % len(proposer_pool)],
                             b"m%03d" % i))
            t += rng.randrange(50, 300)
        cfg = SimConfig(
            deploy=deploy,
            seed=seed * 977 + crash_t,
            gst=max(crash_t + 1, 2600),
            crashes=((crash_t, victim),),
            max_ticks=80_000,
        )
        sim = Sim(cfg, workload)
        trace = sim.run()
        v = check_safety(trace)
        if not v.ok:
            errors.extend(f"{protocol}/{label}: {e}" for e in v.errors)
        deadline = liveness_deadline(cfg, workload[-1][0])
        lv = check_liveness(sim, trace, deadline)
        if not lv.ok:
            errors.extend(f"{protocol}/{label}: {e}" for e in lv.errors)
    return Verdict(not errors, errors)


# ---------------------------------------------------------------------------
# Scenario files: line-oriented key-value config plus a workload listing.
# ---------------------------------------------------------------------------


def parse_scenario(text: str):
    """Scenario text to (SimConfig, workload) pairs.

    Keys: protocol, seed, f, learners (count), proposers (count), delay lo hi,
    loss, gst, max_ticks, crash t pid, outage t0 t1 src dst,
    apply t pid ticks, param name value, workload t proposer size-or-0xhex.
    """
    protocol = "mring"
    f = 1
    seed = 0
    learners = 2
    proposers = 1
    delay = (1, 1)
    loss = 0.0
    gst = 0
    max_ticks = 200_000
    crashes = []
    outages = []
    apply_schedule = []
    params = Params()
    workload = []
    rng = random.Random(12345)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        key = tok[0]
        try:
            if key == "protocol":
                protocol = tok[1]
            elif key == "seed":
                seed = int(tok[1])
            elif key == "f":
                f = int(tok[1])
            elif key == "learners":
                learners = int(tok[1])
            elif key == "proposers":
                proposers = int(tok[1])
            elif key == "delay":
                delay = (int(tok[1]), int(tok[2]))
            elif key == "loss":
                loss = float(tok[1])
            elif key == "gst":
                gst = int(tok[1])
            elif key == "max_ticks":
                max_ticks = int(tok[1])
            elif key == "crash":
                crashes.append((int(tok[1]), int(tok[2])))
            elif key == "outage":
                outages.append(tuple(int(x) for x in tok[1:5]))
            elif key == "apply":
                apply_schedule.append((int(tok[1]), int(tok[2]), int(tok[3])))
            elif key == "param":
                name, value = tok[1], tok[2]
                cur = getattr(params, name)
                if isinstance(cur, bool):
                    setattr(params, name, value in ("1", "true", "True"))
                elif isinstance(cur, float):
                    setattr(params, name, float(value))
                else:
                    setattr(params, name, int(value))
            elif key == "workload":
                t, proposer = int(tok[1]), int(tok[2])
                if tok[3].startswith("0x"):
                    payload = bytes.fromhex(tok[3][2:])
                else:
                    payload = bytes(
                        rng.randrange(256) for _ in range(int(tok[3]))
                    )
                workload.append((t, proposer, payload))
            else:
                raise ValueError(f"unknown key {key!r}")
        except (IndexError, ValueError) as e:
            raise ValueError(f"scenario line {lineno}: {e}") from None
    deploy = build_deployment(protocol, f, learners, proposers, params)
    cfg = SimConfig(
        deploy=deploy,
        seed=seed,
        delay=delay,
        loss=loss,
        gst=gst,
        max_ticks=max_ticks,
        crashes=tuple(crashes),
        outages=tuple(outages),
        apply_schedule=tuple(apply_schedule),
    )
    return cfg, workload
