"""Real-network backends with the same event interface as the simulator.

Reliable ordered streams (TCP) carry the unicast ring and Phase-1 traffic;
lossy datagrams (UDP) carry everything multicast-flavored.  All arrivals,
link failures, and timer fires are serialized into one queue per process;
engine code cannot tell the two harnesses apart.
"""

from __future__ import annotations

import heapq
import os
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass

from . import wire
from .core import ConfigError, Deployment, Params, ProcessId

GROUP = -2  # send_datagram destination meaning "the multicast group"

_PID_HELLO = struct.Struct(">i")
_STREAM_BUFFER_BYTES = 4 * 1024 * 1024


@dataclass
class Endpoint:
    host: str
    stream_port: int
    dgram_port: int


@dataclass
class NetConfig:
    deploy: Deployment
    endpoints: dict[ProcessId, Endpoint]
    roles: dict[ProcessId, tuple[str, ...]]
    group_addr: tuple[str, int] | None = None  # None: unicast fan-out
    multicast: bool = False  # real multicast socket vs fan-out emulation

    def group_members(self) -> list[ProcessId]:
        seen = []
        for p in (*self.deploy.acceptors, *self.deploy.learners):
            if p not in seen:
                seen.append(p)
        return seen


def parse_netconfig(text: str) -> NetConfig:
    """Deployment file: one directive per line.

    protocol mring|uring|paxos
    f <int>
    node <pid> <host> <stream_port> <dgram_port> <role,role,...>
    ring <pid> <pid> ...          (uring order; optional otherwise)
    group <addr> <port> [multicast]
    param <name> <value>
    """
    protocol = None
    f = None
    nodes: dict[int, Endpoint] = {}
    roles: dict[int, tuple[str, ...]] = {}
    ring: tuple[int, ...] = ()
    group_addr = None
    multicast = False
    params = Params()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "protocol":
                protocol = tok[1]
            elif tok[0] == "f":
                f = int(tok[1])
            elif tok[0] == "node":
                pid = int(tok[1])
                if pid in nodes:
                    raise ConfigError(f"duplicate process id {pid}")
                nodes[pid] = Endpoint(tok[2], int(tok[3]), int(tok[4]))
                roles[pid] = tuple(sorted(set(tok[5].split(","))))
            elif tok[0] == "ring":
                ring = tuple(int(x) for x in tok[1:])
            elif tok[0] == "group":
                group_addr = (tok[1], int(tok[2]))
                multicast = len(tok) > 3 and tok[3] == "multicast"
            elif tok[0] == "param":
                cur = getattr(params, tok[1])
                if isinstance(cur, bool):
                    setattr(params, tok[1], tok[2] in ("1", "true"))
                elif isinstance(cur, float):
                    setattr(params, tok[1], float(tok[2]))
                else:
                    setattr(params, tok[1], int(tok[2]))
            else:
                raise ConfigError(f"unknown directive {tok[0]!r}")
        except (IndexError, ValueError) as e:
            raise ConfigError(f"config line {lineno}: {e}") from None
    if protocol is None or f is None:
        raise ConfigError("config must set protocol and f")
    acceptors = tuple(sorted(p for p, r in roles.items() if "acceptor" in r))
    learners = tuple(sorted(p for p, r in roles.items() if "learner" in r))
    proposers = tuple(sorted(p for p, r in roles.items() if "proposer" in r))
    for p, r in roles.items():
        unknown = set(r) - {"acceptor", "learner", "proposer"}
        if unknown:
            raise ConfigError(f"node {p}: unknown roles {sorted(unknown)}")
    if protocol == "mring" and group_addr is None and not multicast:
        # fan-out emulation still needs per-node datagram sockets, which the
        # node list provides; a group line is required only for multicast
        pass
    deploy = Deployment(
        protocol=protocol,
        f=f,
        acceptors=acceptors,
        learners=learners,
        proposers=proposers,
        ring=ring,
        params=params,
    )
    return NetConfig(deploy, nodes, roles, group_addr, multicast)


class TransportError(Exception):
    pass


_SO_RCVBUFFORCE = 33
_SO_SNDBUFFORCE = 32


def _grow_buffers(sock, size: int = 16 << 20):
    """Windowed bursts of large datagrams need deep kernel buffers; the
    force variants bypass rmem_max when running privileged."""
    for opt, force in (
        (socket.SO_RCVBUF, _SO_RCVBUFFORCE),
        (socket.SO_SNDBUF, _SO_SNDBUFFORCE),
    ):
        try:
            sock.setsockopt(socket.SOL_SOCKET, force, size)
        except OSError:
            try:
                sock.setsockopt(socket.SOL_SOCKET, opt, size)
            except OSError:
                pass


class DatagramTransport:
    """Best-effort datagrams plus a multicast group (real or fan-out).

    Reception is pull-based: the node's reactor selects on the socket(s)
    and drains them inline, so no thread handoff sits on the datagram path.
    """

    def __init__(self, cfg: NetConfig, pid: ProcessId, on_msg, on_bad_frame):
        self.cfg = cfg
        self.pid = pid
        self.on_msg = on_msg
        self.on_bad_frame = on_bad_frame
        self.packet_cap = cfg.deploy.params.packet_bytes
        ep = cfg.endpoints[pid]
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        _grow_buffers(self.sock)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((ep.host, ep.dgram_port))
        self.sock.setblocking(False)
        self.msock = None
        if cfg.multicast and cfg.group_addr:
            self.msock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            _grow_buffers(self.msock)
            self.msock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self.msock.bind(("", cfg.group_addr[1]))
            mreq = socket.inet_aton(cfg.group_addr[0]) + socket.inet_aton(
                ep.host
            )
            self.msock.setsockopt(
                socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, mreq
            )
            self.msock.setblocking(False)
            self.sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
            self.sock.setsockopt(
                socket.IPPROTO_IP, socket.IP_MULTICAST_IF,
                socket.inet_aton(ep.host),
            )
        self.dropped_frames = 0
        self._own = _PID_HELLO.pack(self.pid)
        self._stop = False

    def start(self):
        pass  # pull-based; nothing to spin up

    def sockets(self):
        return [s for s in (self.sock, self.msock) if s is not None]

    def drain(self, sock, limit: int = 64) -> int:
        """Decode up to ``limit`` waiting datagrams into the handler."""
        n = 0
        while n < limit:
            try:
                data, _addr = sock.recvfrom(65536)
            except BlockingIOError:
                break
            except OSError:
                break
            n += 1
            if data[:4] == self._own:
                continue  # multicast loop copy; the node self-delivers
            try:
                src, msg = decode_frame(data)
            except wire.WireError:
                self.dropped_frames += 1
                self.on_bad_frame()
                continue
            self.on_msg(src, msg, False)
        return n

    def send(self, dst: ProcessId, msg, targets=None):
        frame = encode_frame(self.pid, msg)
        if len(frame) > self.packet_cap:
            raise TransportError(
                f"frame of {len(frame)} bytes exceeds packet cap "
                f"{self.packet_cap}"
            )
        if dst == GROUP:
            if self.msock is not None:
                self.sock.sendto(frame, self.cfg.group_addr)
            else:
                # fan-out emulation can skip processes the sender knows are
                # outside the address set (cold spares)
                for p in targets if targets is not None else self.cfg.group_members():
                    self._sendto(p, frame)
            return
        self._sendto(dst, frame)

    def _sendto(self, dst: ProcessId, frame: bytes):
        ep = self.cfg.endpoints[dst]
        try:
            self.sock.sendto(frame, (ep.host, ep.dgram_port))
        except OSError:
            pass  # best effort

    def close(self):
        self._stop = True
        self.sock.close()
        if self.msock is not None:
            self.msock.close()


class _StreamConn:
    """One established TCP link with a bounded, back-pressured send queue."""

    def __init__(self, sock: socket.socket, peer: ProcessId, hub):
        self.sock = sock
        self.peer = peer
        self.hub = hub
        self.outq: queue.Queue = queue.Queue()
        self.queued_bytes = 0
        self._lock = threading.Lock()
        self.alive = True
        threading.Thread(target=self._writer, daemon=True).start()
        threading.Thread(target=self._reader, daemon=True).start()

    def send(self, frame: bytes) -> bool:
        """False signals back-pressure (queue beyond the buffer budget)."""
        with self._lock:
            self.queued_bytes += len(frame)
            backpressed = self.queued_bytes > _STREAM_BUFFER_BYTES
        self.outq.put(frame)
        return not backpressed

    def _writer(self):
        while True:
            frame = self.outq.get()
            if frame is None:
                return
            try:
                self.sock.sendall(frame)
            except OSError:
                self._die()
                return
            with self._lock:
                self.queued_bytes -= len(frame)

    def _reader(self):
        buf = b""
        sock = self.sock
        while True:
            try:
                chunk = sock.recv(65536)
            except OSError:
                chunk = b""
            if not chunk:
                self._die()
                return
            buf += chunk
            while True:
                frame, buf = split_frame(buf)
                if frame is None:
                    break
                try:
                    src, msg = decode_frame(frame)
                except wire.WireError:
                    self.hub.on_bad_frame()
                    continue
                self.hub.on_msg(src, msg, True)

    def _die(self):
        if self.alive:
            self.alive = False
            self.outq.put(None)
            try:
                self.sock.close()
            except OSError:
                pass
            self.hub.on_link_down(self.peer)

    def close(self):
        self._die()


class StreamHub:
    """Listener plus on-demand outgoing connections, one per peer."""

    def __init__(self, cfg: NetConfig, pid: ProcessId, on_msg, on_bad_frame,
                 on_link_down):
        self.cfg = cfg
        self.pid = pid
        self.on_msg = on_msg
        self.on_bad_frame = on_bad_frame
        self.on_link_down = on_link_down
        self.conns: dict[ProcessId, _StreamConn] = {}
        self._lock = threading.Lock()
        ep = cfg.endpoints[pid]
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind((ep.host, ep.stream_port))
        self.listener.listen(32)
        self._stop = False

    def start(self):
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def _accept_loop(self):
        while not self._stop:
            try:
                sock, _ = self.listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = b""
            while len(hello) < _PID_HELLO.size:
                part = sock.recv(_PID_HELLO.size - len(hello))
                if not part:
                    break
                hello += part
            if len(hello) < _PID_HELLO.size:
                sock.close()
                continue
            (peer,) = _PID_HELLO.unpack(hello)
            conn = _StreamConn(sock, peer, self)
            with self._lock:
                old = self.conns.get(peer)
                self.conns[peer] = conn
            if old is not None:
                old.close()

    def _connect(self, peer: ProcessId) -> _StreamConn:
        ep = self.cfg.endpoints[peer]
        sock = socket.create_connection(
            (ep.host, ep.stream_port), timeout=5.0
        )
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(_PID_HELLO.pack(self.pid))
        return _StreamConn(sock, peer, self)

    def send(self, dst: ProcessId, msg) -> bool:
        frame = encode_frame(self.pid, msg)
        with self._lock:
            conn = self.conns.get(dst)
        if conn is None or not conn.alive:
            try:
                conn = self._connect(dst)
            except OSError:
                self.on_link_down(dst)
                return False
            with self._lock:
                self.conns[dst] = conn
        return conn.send(frame)

    def close(self):
        self._stop = True
        try:
            self.listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self.conns.values())
        for c in conns:
            c.close()


# Frames on the wire carry a 4-byte source pid prefix before the message
# frame proper; streams concatenate many of them.


def encode_frame(src: ProcessId, msg) -> bytes:
    return _PID_HELLO.pack(src) + wire.encode(msg)


def decode_frame(data: bytes):
    if len(data) < _PID_HELLO.size:
        raise wire.WireError("missing source prefix")
    (src,) = _PID_HELLO.unpack_from(data)
    return src, wire.decode(data[_PID_HELLO.size :])


def split_frame(buf: bytes):
    """First complete (src-prefixed) frame and the remainder, or (None, buf)."""
    need = _PID_HELLO.size + wire.HEADER_SIZE
    if len(buf) < need:
        return None, buf
    length = struct.unpack_from(
        ">I", buf, _PID_HELLO.size + wire.HEADER_SIZE - 4
    )[0]
    total = _PID_HELLO.size + wire.FRAME_OVERHEAD + length
    if len(buf) < total:
        return None, buf
    return buf[:total], buf[total:]


# ---------------------------------------------------------------------------
# Event pump: one ordered queue per process; arrivals beat timers that are
# due at the same instant.
# ---------------------------------------------------------------------------


class EventPump:
    """Cross-thread event intake (streams, submits, control) plus timers.

    Datagrams bypass the queue entirely: the reactor drains those sockets
    directly.  A self-pipe wakes the reactor when the queue goes non-empty.
    """

    def __init__(self):
        self.q: queue.Queue = queue.Queue()
        self._timers: list = []
        self._timer_gen: dict[tuple, int] = {}
        self._seq = 0
        self.bad_frames = 0
        self.wake_r, self.wake_w = os.pipe()
        os.set_blocking(self.wake_r, False)
        os.set_blocking(self.wake_w, False)

    def _wake(self):
        try:
            os.write(self.wake_w, b"x")
        except (BlockingIOError, OSError):
            pass  # pipe full: the reactor is already behind and will wake

    def clear_wake(self):
        try:
            while os.read(self.wake_r, 4096):
                pass
        except (BlockingIOError, OSError):
            pass

    def push_msg(self, src, msg, stream):
        self.q.put(("recv", src, msg, stream))
        self._wake()

    def push_submit(self, payload):
        self.q.put(("submit", payload))
        self._wake()

    def push_submit_many(self, payloads):
        self.q.put(("submitN", payloads))
        self._wake()

    def push_linkdown(self, pid):
        self.q.put(("linkdown", pid))
        self._wake()

    def push_stop(self):
        self.q.put(("stop",))
        self._wake()

    def bad_frame(self):
        self.bad_frames += 1

    def arm_timer(self, key: tuple, deadline: float):
        gen = self._timer_gen.get(key, 0) + 1
        self._timer_gen[key] = gen
        self._seq += 1
        heapq.heappush(self._timers, (deadline, self._seq, key, gen))

    def due_timer(self, now: float):
        """Pop one due timer key, or None."""
        while self._timers and (
            self._timer_gen.get(self._timers[0][2]) != self._timers[0][3]
        ):
            heapq.heappop(self._timers)  # cancelled or re-armed
        if self._timers and self._timers[0][0] <= now:
            _, _, key, _gen = heapq.heappop(self._timers)
            return key
        return None

    def timeout_until_timer(self, cap: float = 0.25) -> float:
        while self._timers and (
            self._timer_gen.get(self._timers[0][2]) != self._timers[0][3]
        ):
            heapq.heappop(self._timers)
        if not self._timers:
            return cap
        return min(cap, max(0.0, self._timers[0][0] - time.monotonic()))
