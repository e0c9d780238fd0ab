"""Node runner and benchmark harness.

``run`` joins a deployment in any role combination over real sockets.
``bench`` drives open-loop load and writes per-second CSV records, either
against a live deployment (optionally spawning one locally) or against the
deterministic simulator.  ``simulate`` executes scenario files and dumps
diffable traces; ``crashsuite`` runs the targeted crash coverage.
"""

from __future__ import annotations

import argparse
import math
import os
import signal
import subprocess
import sys
import tempfile
import threading
import time

import psutil

from . import control, simnet, transport
from .core import (
    ConfigError,
    Decided,
    Deliver,
    Mcast,
    NewBatch,
    Params,
    Persist,
    ProcessId,
    Recv,
    Send,
    StartTimer,
    Submit,
    Timer,
    decode_batch,
    payload_crc,
)

TICKS_PER_SECOND = 10_000  # 10 ticks per millisecond

CSV_HEADER = (
    "ts_s,msgs_per_s,mbits_per_s,p50_us,p99_us,window,drops,cpu_pct,rss_mb,"
    "efficiency"
)


class Histogram:
    """Fixed-precision histogram: values bucketed to two significant digits,
    so the hot path never allocates beyond one dict slot per bucket."""

    def __init__(self):
        self.buckets: dict[int, int] = {}
        self.count = 0

    def add(self, value: int):
        if value < 10:
            key = max(value, 0)
        else:
            mag = 10 ** (int(math.log10(value)) - 1)
            key = (value // mag) * mag
        self.buckets[key] = self.buckets.get(key, 0) + 1
        self.count += 1

    def percentile(self, p: float) -> int:
        if not self.count:
            return 0
        need = max(1, int(self.count * p + 0.5))
        seen = 0
        for key in sorted(self.buckets):
            seen += self.buckets[key]
            if seen >= need:
                return key
        return max(self.buckets)

    def clear(self):
        self.buckets.clear()
        self.count = 0


class Node:
    """One process: engine + transports + the per-process event queue."""

    def __init__(self, netcfg: transport.NetConfig, pid: ProcessId,
                 trace_out=None, persist_dir=None,
                 trace_kinds=("BATCH", "DELIVER")):
        self.netcfg = netcfg
        self.pid = pid
        self.trace_kinds = set(trace_kinds)
        deploy = netcfg.deploy
        if persist_dir:
            deploy.params.persist = True
        self.engine = simnet.ENGINES[deploy.protocol](pid, deploy)
        self.pump = transport.EventPump()
        # datagrams are handled inline on the reactor thread; streams cross
        # threads and go through the pump queue
        self.dgram = transport.DatagramTransport(
            netcfg, pid, self._on_dgram_inline, self.pump.bad_frame
        )
        self.streams = transport.StreamHub(
            netcfg, pid, self.pump.push_msg, self.pump.bad_frame,
            self.pump.push_linkdown,
        )
        self.wal = None
        if persist_dir:
            path = os.path.join(persist_dir, f"acceptor-{pid}.wal")
            self.wal = control.WriteAheadLog(path)
        self.trace_fh = open(trace_out, "w") if trace_out else None
        self.t0 = time.monotonic()
        self.stop_event = threading.Event()
        # metrics shared with the bench reporter
        self.delivered_msgs = 0
        self.delivered_bytes = 0
        self.oversize_dropped = 0
        self.latency = Histogram()
        self._batch_submit: dict = {}
        self.on_deliver = None

    def now_ticks(self) -> int:
        return int((time.monotonic() - self.t0) * TICKS_PER_SECOND)

    def _mcast_targets(self):
        deploy = self.netcfg.deploy
        if deploy.protocol == "mring":
            ring = self.engine.view.ring
            return list(ring) + [
                l for l in deploy.learners if l not in ring
            ]
        return None  # full group

    def _on_dgram_inline(self, src, msg, stream):
        self._apply_actions(self.engine.step(self.now_ticks(), Recv(src, msg)))

    def submit(self, payload: bytes):
        self.pump.push_submit(payload)

    def start(self):
        import gc

        sys.setswitchinterval(0.02)  # fewer forced GIL handoffs on hot paths
        gc.set_threshold(200_000, 100, 100)  # allocation churn is acyclic
        self.dgram.start()
        self.streams.start()
        threading.Thread(target=self._loop, daemon=True).start()

    def _loop(self):
        """Single-threaded reactor: datagrams are drained inline, stream
        and submit events arrive through the pump queue, timers interleave
        fairly with both."""
        import selectors

        sel = selectors.DefaultSelector()
        for s in self.dgram.sockets():
            sel.register(s, selectors.EVENT_READ, ("dgram", s))
        sel.register(self.pump.wake_r, selectors.EVENT_READ, ("wake", None))

        self._apply_actions(self.engine.start(self.now_ticks()))
        step = self.engine.step
        while not self.stop_event.is_set():
            now_mono = time.monotonic()
            key = self.pump.due_timer(now_mono)
            if key is not None:
                self._apply_actions(step(self.now_ticks(), Timer(key)))
                continue
            progressed = self._drain_queue_events(step)
            for skey, _ in sel.select(
                0 if progressed else self.pump.timeout_until_timer()
            ):
                kind, sock = skey.data
                if kind == "dgram":
                    progressed += self.dgram.drain(sock)
                else:
                    self.pump.clear_wake()
        sel.close()
        self._shutdown()

    def _drain_queue_events(self, step, limit: int = 64) -> int:
        import queue as _queue

        n = 0
        while n < limit:
            try:
                ev = self.pump.q.get_nowait()
            except _queue.Empty:
                break
            n += 1
            kind = ev[0]
            if kind == "recv":
                self._apply_actions(step(self.now_ticks(), Recv(ev[1], ev[2])))
            elif kind == "submit":
                self._apply_actions(step(self.now_ticks(), Submit(ev[1])))
            elif kind == "submitN":
                now = self.now_ticks()
                for payload in ev[1]:
                    self._apply_actions(step(now, Submit(payload)))
            elif kind == "linkdown":
                # a broken stream is a suspicion hint for the detector
                self.engine.fd.last_heard[ev[1]] = -(10**9)
            elif kind == "stop":
                self.stop_event.set()
        return n

    def _apply_actions(self, acts):
        for act in acts:
            ta = type(act)
            if ta is Send:
                try:
                    if act.stream:
                        self.streams.send(act.dst, act.msg)
                    else:
                        self.dgram.send(act.dst, act.msg)
                except transport.TransportError:
                    self.oversize_dropped += 1
                except OSError:
                    pass
            elif ta is Mcast:
                targets = self._mcast_targets()
                if targets is not None and self.pid in targets:
                    # local copy loops through the queue without the codec
                    targets = [p for p in targets if p != self.pid]
                    self.pump.push_msg(self.pid, act.msg, False)
                try:
                    self.dgram.send(transport.GROUP, act.msg, targets=targets)
                except transport.TransportError:
                    self.oversize_dropped += 1
            elif ta is StartTimer:
                deadline = self.t0 + (
                    self.now_ticks() + act.delay
                ) / TICKS_PER_SECOND
                self.pump.arm_timer(act.key, deadline)
            elif ta is Deliver:
                self.delivered_bytes += len(act.payload)
                try:
                    self.delivered_msgs += len(decode_batch(act.payload))
                except ValueError:
                    self.delivered_msgs += 1
                if act.vid in self._batch_submit:
                    lat_ticks = self.now_ticks() - self._batch_submit.pop(act.vid)
                    self.latency.add(lat_ticks * 100)  # ticks -> microseconds
                if self.trace_fh is not None and "DELIVER" in self.trace_kinds:
                    self.trace_fh.write(
                        f"DELIVER\t{self.now_ticks()}\t{self.pid}\t"
                        f"{act.instance}\t{act.vid.proposer}\t{act.vid.seq}\t"
                        f"{len(act.payload)}\t{payload_crc(act.payload)}\n"
                    )
                if self.on_deliver is not None:
                    self.on_deliver(act)
            elif ta is Decided:
                pass
            elif ta is NewBatch:
                self._batch_submit[act.vid] = act.first_submit
                if self.trace_fh is not None and "BATCH" in self.trace_kinds:
                    self.trace_fh.write(
                        f"BATCH\t{act.first_submit}\t{self.pid}\t"
                        f"{act.vid.proposer}\t{act.vid.seq}\t{act.size}\t"
                        f"{act.crc}\t{act.first_submit}\t{int(act.filler)}\n"
                    )
            elif ta is Persist:
                if self.wal is not None:
                    self.wal.append(act.delta)
                    self.wal.flush()

    def drops(self) -> int:
        c = self.engine.counters
        return (
            self.pump.bad_frames
            + self.dgram.dropped_frames
            + self.oversize_dropped
            + c["stale_dropped"]
            + c["queue_overflow"]
            + c["cache_overflow"]
        )

    def stop(self):
        self.stop_event.set()
        self.pump.push_stop()

    def _shutdown(self):
        if self.trace_fh is not None:
            self.trace_fh.flush()
            self.trace_fh.close()
        if self.wal is not None:
            self.wal.close()
        self.dgram.close()
        self.streams.close()


# ---------------------------------------------------------------------------
# run: a long-running node process
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    with open(args.config) as fh:
        netcfg = transport.parse_netconfig(fh.read())
    if args.id not in netcfg.endpoints:
        raise ConfigError(f"process {args.id} not in config")
    if args.protocol and args.protocol != netcfg.deploy.protocol:
        raise ConfigError(
            f"--protocol {args.protocol} does not match config "
            f"({netcfg.deploy.protocol})"
        )
    if args.roles:
        want = tuple(sorted(set(args.roles.split(","))))
        have = netcfg.roles[args.id]
        if want != have:
            raise ConfigError(
                f"--roles {want} does not match config roles {have}"
            )
    if netcfg.deploy.protocol == "mring" and netcfg.multicast and not netcfg.group_addr:
        raise ConfigError("mring multicast mode needs a group line")
    node = Node(netcfg, args.id, trace_out=args.trace_out,
                persist_dir=args.persist)
    node.start()
    stopper = lambda *_: node.stop()
    signal.signal(signal.SIGTERM, stopper)
    signal.signal(signal.SIGINT, stopper)
    while not node.stop_event.is_set():
        time.sleep(0.2)
    time.sleep(0.2)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _bench_rows_to_csv(meta: dict, rows: list[dict], efficiency: float) -> str:
    out = ["# ringpaxos-bench v1 " + " ".join(f"{k}={v}" for k, v in meta.items())]
    out.append(CSV_HEADER)
    for r in rows:
        out.append(
            f"{r['ts_s']},{r['msgs_per_s']},{r['mbits_per_s']:.3f},"
            f"{r['p50_us']},{r['p99_us']},{r['window']},{r['drops']},"
            f"{r['cpu_pct']:.1f},{r['rss_mb']:.1f},"
        )
    last_ts = rows[-1]["ts_s"] if rows else 0
    out.append(f"{last_ts},,,,,,,,,{efficiency:.4f}")
    return "\n".join(out) + "\n"


def bench_simnet(protocol: str, f: int, msg_size: int, rate: int,
                 duration: int, seed: int, slow=None, window=None,
                 learner_slots=None, _return_sim: bool = False):
    """Deterministic benchmark: same CSV schema, simulated clock.

    ``slow``: optional (t0_s, t1_s, ticks_per_apply) slow-learner interval,
    reproducing the flow-control timeline shape.
    """
    params = Params()
    params.batch_ticks = 0
    if msg_size + 600 > params.packet_bytes:
        params.packet_bytes = msg_size + 1024
    if window:
        params.window = window
    if learner_slots:
        params.learner_slots = learner_slots
    deploy = simnet.build_deployment(protocol, f, extra_learners=3,
                                     proposers=2, params=params)
    apply_schedule = []
    slow_pid = None
    if slow:
        t0_s, t1_s, ticks = slow
        slow_pid = deploy.learners[-1]
        apply_schedule = [
            (t0_s * TICKS_PER_SECOND, slow_pid, ticks),
            (t1_s * TICKS_PER_SECOND, slow_pid, 0),
        ]
    max_ticks = (duration + 2) * TICKS_PER_SECOND
    cfg = simnet.SimConfig(
        deploy=deploy,
        seed=seed,
        delay=(10, 10),  # 1 ms links, so the window actually gates the rate
        apply_schedule=tuple(apply_schedule),
        max_ticks=max_ticks,
        stop_when_complete=False,
    )
    interval = max(1, TICKS_PER_SECOND // max(rate, 1))
    payload = bytes(msg_size)
    proposers = deploy.proposers

    def gen(sim, seq):
        t = 100 + (seq + 1) * interval
        if t > duration * TICKS_PER_SECOND:
            return False
        sim.submit_later(t, proposers[seq % len(proposers)], payload)
        return True

    sim = simnet.Sim(cfg, [(100, proposers[0], payload)], workload_gen=gen)

    window_series: dict[int, int] = {}

    def probe(s):
        coord = s.procs[min(deploy.acceptors)].engine
        window_series[s.now // TICKS_PER_SECOND] = coord.flow.window

    sim.probe(TICKS_PER_SECOND // 2, probe)
    trace = sim.run()

    # aggregate per-second delivery at one healthy learner
    healthy = deploy.learners[0]
    per_sec_msgs: dict[int, int] = {}
    per_sec_bytes: dict[int, int] = {}
    for _, t, pid, instance, vp, vs, size, crc in trace.deliveries():
        if pid != healthy:
            continue
        sec = t // TICKS_PER_SECOND
        per_sec_msgs[sec] = per_sec_msgs.get(sec, 0) + 1
        per_sec_bytes[sec] = per_sec_bytes.get(sec, 0) + size
    lat_by_sec: dict[int, Histogram] = {}
    batch_t = {}
    for _, t, pid, vp, vs, size, crc, first, filler in trace.batches():
        batch_t[(vp, vs)] = first
    for _, t, pid, instance, vp, vs, size, crc in trace.deliveries():
        if pid != vp:
            continue  # latency is measured by the proposer
        if (vp, vs) in batch_t:
            sec = t // TICKS_PER_SECOND
            lat_by_sec.setdefault(sec, Histogram()).add(
                (t - batch_t.pop((vp, vs))) * 100
            )
    rows = []
    for sec in range(0, duration + 1):
        h = lat_by_sec.get(sec)
        rows.append(
            dict(
                ts_s=sec,
                msgs_per_s=per_sec_msgs.get(sec, 0),
                mbits_per_s=per_sec_bytes.get(sec, 0) * 8 / 1e6,
                p50_us=h.percentile(0.5) if h else 0,
                p99_us=h.percentile(0.99) if h else 0,
                window=window_series.get(
                    sec, window_series.get(sec - 1, params.window)
                ),
                drops=0,
                cpu_pct=0.0,
                rss_mb=0.0,
            )
        )
    meta = dict(
        protocol=protocol, msg_size=msg_size,
        receivers=len(deploy.learners), nominal_mbps=1000,
        seed=seed, mode="simnet",
        slow_learner=slow_pid if slow_pid is not None else "",
    )
    steady = [r["mbits_per_s"] for r in rows[2 : duration - 1]] or [0.0]
    efficiency = (sum(steady) / len(steady)) / 1000.0
    csv_text = _bench_rows_to_csv(meta, rows, efficiency)
    if _return_sim:
        return csv_text, sim
    return csv_text


def _free_ports(n: int) -> list[int]:
    import socket as s

    socks, ports = [], []
    for _ in range(n):
        sk = s.socket()
        sk.bind(("127.0.0.1", 0))
        socks.append(sk)
        ports.append(sk.getsockname()[1])
    for sk in socks:
        sk.close()
    return ports


def make_local_config(protocol: str, f: int, n_learners: int,
                      msg_size: int, window: int = 32) -> tuple[str, int]:
    """Loopback deployment text plus the pid reserved for the bench node.

    The bench process plays proposer and learner; for the multicast
    protocol it also coordinates (roles combine freely, and feeding the
    coordinator in-process is how the protocol is meant to be driven at
    full rate).  ``n_learners`` counts the dedicated learner processes on
    top of the bench learner.
    """
    n_acc = 2 * f + 1
    if protocol == "mring":
        bench_pid = 0
        n = n_acc + n_learners
    else:
        bench_pid = n_acc + n_learners
        n = bench_pid + 1
    ports = _free_ports(2 * n + 1)
    lines = [f"protocol {protocol}", f"f {f}"]
    # batches amortize per-packet costs; UDP caps a datagram at 64 KiB
    per_msg = msg_size + 4
    batch = max(per_msg, min(7 * per_msg, 58000))
    packet = min(batch + 2560, 65000)
    lines.append(f"param batch_bytes {batch}")
    lines.append(f"param packet_bytes {packet}")
    lines.append(f"param stream_packet_bytes {max(32768, packet)}")
    lines.append(f"param window {window}")
    # loopback wall-clock pacing: a loaded Python process stalls for tens of
    # milliseconds, so retransmit and suspicion clocks run much slower than
    # the simulator's unit-delay ticks
    for name, val in (
        ("retx_interval", 2000),
        ("proposer_retx", 4000),
        ("fd_timeout", 10000),
        ("hb_interval", 1000),
        ("parked_interval", 500),
        ("version_interval", 500),
        ("recover_interval", 1000),
    ):
        lines.append(f"param {name} {val}")
    ring_members = []
    for pid in range(n):
        if protocol == "mring":
            if pid == 0:
                roles = "acceptor,learner,proposer"
            elif pid < n_acc:
                roles = "acceptor"
            else:
                roles = "learner"
        elif protocol == "uring":
            roles = (
                "acceptor,learner,proposer" if pid < n_acc
                else "learner,proposer" if pid == bench_pid else "learner"
            )
        else:
            if pid < n_acc:
                roles = "acceptor"
            elif pid < n_acc + n_learners:
                roles = "learner"
            else:
                roles = "learner,proposer"
        lines.append(
            f"node {pid} 127.0.0.1 {ports[2 * pid]} {ports[2 * pid + 1]} {roles}"
        )
        ring_members.append(pid)
    if protocol == "uring":
        lines.append("ring " + " ".join(str(p) for p in ring_members))
    return "\n".join(lines) + "\n", bench_pid


def cmd_bench(args) -> int:
    if args.simnet:
        slow = None
        if args.slow_learner:
            a, b, ticks = args.slow_learner.split(":")
            slow = (int(a), int(b), int(ticks))
        csv = bench_simnet(
            args.protocol, args.f, args.msg_size, args.rate, args.duration,
            args.seed, slow=slow, window=args.window,
            learner_slots=args.learner_slots,
        )
        _write_out(args.csv_out, csv)
        return 0

    tmpdir = None
    children = []
    if args.spawn_local:
        nl = args.spawn_local
        tmpdir = args.workdir or tempfile.mkdtemp(prefix="ringpaxos-")
        os.makedirs(tmpdir, exist_ok=True)
        text, bench_pid = make_local_config(
            args.protocol, args.f, nl, args.msg_size, args.window or 32
        )
        cfgpath = os.path.join(tmpdir, "deploy.cfg")
        with open(cfgpath, "w") as fh:
            fh.write(text)
        args.config = cfgpath
        args.id = bench_pid
        with open(cfgpath) as fh:
            netcfg = transport.parse_netconfig(fh.read())
        # two-core pipelines convoy badly when every stage timeslices one
        # run queue: put the ordering stages (acceptors) on one core and
        # the delivery stages (learners, load) on another
        cpus = sorted(os.sched_getaffinity(0))
        pin = {}
        if len(cpus) >= 2:
            for pid in netcfg.endpoints:
                sender_side = pid in netcfg.deploy.acceptors
                pin[pid] = cpus[0] if sender_side else cpus[1]
            os.sched_setaffinity(0, {pin[bench_pid]})
        for pid in netcfg.endpoints:
            if pid == bench_pid:
                continue
            trace = os.path.join(tmpdir, f"node-{pid}.tsv")
            cmd = [sys.executable, "-m", "ringpaxos.cli", "run",
                   "--config", cfgpath, "--id", str(pid),
                   "--trace-out", trace]
            if pin:
                cmd = ["taskset", "-c", str(pin[pid])] + cmd
            children.append(
                subprocess.Popen(
                    cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL
                )
            )
        time.sleep(1.0)
    else:
        with open(args.config) as fh:
            netcfg = transport.parse_netconfig(fh.read())

    try:
        csv = bench_live(netcfg, args)
    finally:
        for ch in children:
            ch.terminate()
        for ch in children:
            try:
                ch.wait(timeout=5)
            except subprocess.TimeoutExpired:
                ch.kill()
    _write_out(args.csv_out, csv)
    if tmpdir:
        print(f"deployment artifacts in {tmpdir}", file=sys.stderr)
    return 0


def bench_live(netcfg: transport.NetConfig, args) -> str:
    node = Node(netcfg, args.id, trace_out=args.trace_out,
                persist_dir=args.persist,
                trace_kinds=("BATCH",))  # learners carry the delivery trace
    node.start()
    time.sleep(0.5)

    payload = bytes(args.msg_size)
    budget = args.inflight
    stop = threading.Event()

    per_batch = max(1, node.engine.params.payload_cap() // (len(payload) + 4))

    def submitter():
        period = 1.0 / args.rate if args.rate > 0 else 0.0
        next_t = time.monotonic()
        while not stop.is_set():
            # slow-start the in-flight budget so the first burst cannot
            # swamp the coordinator's receive buffer
            limit = min(budget, 16 + node.delivered_msgs)
            clear = (
                len(node.engine.pending_batches) < limit
                and node.pump.q.qsize() < 64 * per_batch
            )
            if clear:
                if period:
                    node.submit(payload)
                else:
                    # one whole batch per queue crossing
                    node.pump.push_submit_many([payload] * per_batch)
            if period:
                next_t += period
                delay = next_t - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            elif not clear:
                time.sleep(0.0005)

    threading.Thread(target=submitter, daemon=True).start()
    proc = psutil.Process()
    proc.cpu_percent(None)
    rows = []
    last_msgs = last_bytes = 0
    for sec in range(args.duration):
        time.sleep(1.0)
        msgs, bts = node.delivered_msgs, node.delivered_bytes
        h = node.latency
        rows.append(
            dict(
                ts_s=sec + 1,
                msgs_per_s=msgs - last_msgs,
                mbits_per_s=(bts - last_bytes) * 8 / 1e6,
                p50_us=h.percentile(0.5),
                p99_us=h.percentile(0.99),
                window=getattr(node.engine, "flow",
                               control.FlowState()).window,
                drops=node.drops(),
                cpu_pct=proc.cpu_percent(None),
                rss_mb=proc.memory_info().rss / 1e6,
            )
        )
        h.clear()
        last_msgs, last_bytes = msgs, bts
    stop.set()
    node.stop()
    time.sleep(0.3)
    steady = [r["mbits_per_s"] for r in rows[2:]] or [0.0]
    efficiency = (sum(steady) / len(steady)) / args.nominal_mbps
    meta = dict(
        protocol=netcfg.deploy.protocol, msg_size=args.msg_size,
        receivers=len(netcfg.deploy.learners), nominal_mbps=args.nominal_mbps,
        seed="", mode="live",
    )
    return _bench_rows_to_csv(meta, rows, efficiency)


def _write_out(path, text):
    if path and path != "-":
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# simulate / crashsuite
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    with open(args.scenario) as fh:
        cfg, workload = simnet.parse_scenario(fh.read())
    sim = simnet.Sim(cfg, workload)
    trace = sim.run()
    if args.trace_out:
        _write_out(args.trace_out, trace.to_tsv())
    if args.check:
        verdict = simnet.check_safety(trace)
        for e in verdict.errors:
            print(f"violation: {e}", file=sys.stderr)
        print(f"safety: {'pass' if verdict.ok else 'FAIL'}")
        return 0 if verdict.ok else 1
    return 0


def cmd_crashsuite(args) -> int:
    verdict = simnet.crash_suite(args.protocol, args.f, args.seed)
    for e in verdict.errors:
        print(f"violation: {e}", file=sys.stderr)
    print(f"crash suite {args.protocol} f={args.f}: "
          f"{'pass' if verdict.ok else 'FAIL'}")
    return 0 if verdict.ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ringpaxos")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="join a deployment as one process")
    run.add_argument("--config", required=True)
    run.add_argument("--id", type=int, required=True)
    run.add_argument("--roles", default="")
    run.add_argument("--protocol", default="")
    run.add_argument("--trace-out", default="")
    run.add_argument("--persist", default="")
    run.set_defaults(fn=cmd_run)

    bench = sub.add_parser("bench", help="drive load and emit CSV records")
    bench.add_argument("--protocol", default="mring",
                       choices=["paxos", "mring", "uring"])
    bench.add_argument("--config", default="")
    bench.add_argument("--id", type=int, default=-1)
    bench.add_argument("--msg-size", type=int, default=8192)
    bench.add_argument("--rate", type=int, default=0,
                       help="client messages per second; 0 = open throttle")
    bench.add_argument("--duration", type=int, default=10)
    bench.add_argument("--csv-out", default="-")
    bench.add_argument("--trace-out", default="")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--persist", default="")
    bench.add_argument("--simnet", action="store_true",
                       help="run against the deterministic simulator")
    bench.add_argument("--f", type=int, default=1)
    bench.add_argument("--window", type=int, default=0)
    bench.add_argument("--learner-slots", type=int, default=0)
    bench.add_argument("--slow-learner", default="",
                       help="simnet: t0:t1:ticks_per_apply slow interval")
    bench.add_argument("--spawn-local", type=int, default=0, metavar="LEARNERS",
                       help="spawn a loopback deployment with this many "
                            "dedicated learners")
    bench.add_argument("--workdir", default="",
                       help="where --spawn-local writes configs and traces")
    bench.add_argument("--inflight", type=int, default=256)
    bench.add_argument("--nominal-mbps", type=float, default=1000.0)
    bench.set_defaults(fn=cmd_bench)

    simu = sub.add_parser("simulate", help="run a scenario file")
    simu.add_argument("--scenario", required=True)
    simu.add_argument("--trace-out", default="")
    simu.add_argument("--check", action="store_true")
    simu.set_defaults(fn=cmd_simulate)

    cs = sub.add_parser("crashsuite", help="targeted crash coverage")
    cs.add_argument("--protocol", default="mring",
                    choices=["paxos", "mring", "uring"])
    cs.add_argument("--f", type=int, default=1)
    cs.add_argument("--seed", type=int, default=0)
    cs.set_defaults(fn=cmd_crashsuite)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, transport.TransportError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
