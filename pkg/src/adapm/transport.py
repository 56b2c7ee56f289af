"""Frame delivery: deterministic in-process loopback and TCP sockets.

Both deliver frames exactly once and in FIFO order per ordered node pair.
"""

from __future__ import annotations

import collections
import logging
import queue
import socket
import struct
import threading
import time
from typing import Dict, Optional, Tuple

from .wire import HEADER

log = logging.getLogger(__name__)

LEN = struct.Struct("<I")


class TransportError(RuntimeError):
    pass


def frame_header(frame: bytes) -> Tuple[int, int, int, int]:
    """(from, to, round, kind) of an encoded envelope."""
    src, dst, rnd, kind, _vl, _n = HEADER.unpack_from(frame, 0)
    return src, dst, rnd, kind


class FrameCounter:
    """Exact per-node byte counts and per-(round, src, dst, kind) frame counts."""

    def __init__(self):
        self.bytes_sent: Dict[int, int] = collections.Counter()
        self.frames_sent: Dict[int, int] = collections.Counter()
        self.per_pair = collections.Counter()
        self._lock = threading.Lock()

    def record(self, frame: bytes) -> None:
        src, dst, rnd, kind = frame_header(frame)
        with self._lock:
            self.bytes_sent[src] += len(frame) + LEN.size
            self.frames_sent[src] += 1
            self.per_pair[(rnd, src, dst, kind)] += 1

    def max_per_pair(self, kind: int) -> int:
        return max((c for (r, s, d, k), c in self.per_pair.items() if k == kind), default=0)


class LoopbackHub:
    """In-process network. Frames sent during a step become visible at ``step()``."""

    def __init__(self, num_nodes: int):
        self.num_nodes = num_nodes
        self.counter = FrameCounter()
        self._staged = [collections.deque() for _ in range(num_nodes)]
        self._ready = [collections.deque() for _ in range(num_nodes)]

    def endpoint(self, node: int) -> "LoopbackTransport":
        return LoopbackTransport(self, node)

    def step(self) -> None:
        for n in range(self.num_nodes):
            self._ready[n].extend(self._staged[n])
            self._staged[n].clear()

    def pending(self) -> int:
        return sum(len(q) for q in self._staged) + sum(len(q) for q in self._ready)


class LoopbackTransport:
    def __init__(self, hub: LoopbackHub, node: int):
        self.hub = hub
        self.node = node

    @property
    def counter(self) -> FrameCounter:
        return self.hub.counter

    def send(self, to: int, frame: bytes) -> None:
        self.hub.counter.record(frame)
        self.hub._staged[to].append((self.node, frame))

    def receive(self, timeout: Optional[float] = None):
        q = self.hub._ready[self.node]
        if q:
            return q.popleft()
        return None

    def close(self) -> None:
        pass


def read_manifest(path) -> Dict[int, Tuple[str, int]]:
    """Parse ``node_id host:port`` lines."""
    peers = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                node_s, addr = line.split()
                host, port_s = addr.rsplit(":", 1)
                peers[int(node_s)] = (host, int(port_s))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'node_id host:port'") from None
    return peers


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


class SocketTransport:
    """One TCP connection per ordered peer pair; a reader thread per inbound stream."""

    def __init__(self, node: int, peers: Dict[int, Tuple[str, int]],
                 connect_attempts: int = 50, backoff: float = 0.05):
        self.node = node
        self.peers = peers
        self.connect_attempts = connect_attempts
        self.backoff = backoff
        self.counter = FrameCounter()
        self._inbox: "queue.Queue" = queue.Queue()
        self._out: Dict[int, socket.socket] = {}
        self._out_locks = collections.defaultdict(threading.Lock)
        self._closed = threading.Event()
        host, port = peers[node]
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind((host, port))
        self._server.listen(len(peers) + 4)
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        self._acceptor.start()

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: socket.socket) -> None:
        with conn:
            while True:
                try:
                    head = _recv_exact(conn, LEN.size)
                    if head is None:
                        return
                    (n,) = LEN.unpack(head)
                    frame = _recv_exact(conn, n)
                except OSError:
                    return
                if frame is None:
                    return
                self._inbox.put((frame_header(frame)[0], frame))

    def _connect(self, to: int) -> socket.socket:
        host, port = self.peers[to]
        delay = self.backoff
        for attempt in range(self.connect_attempts):
            try:
                s = socket.create_connection((host, port), timeout=5.0)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                s.settimeout(None)
                return s
            except OSError as exc:
                log.debug("connect to node %d failed (%s), attempt %d", to, exc, attempt + 1)
                time.sleep(delay)
                delay = min(delay * 1.5, 1.0)
        raise TransportError(f"node {to} unreachable at {host}:{port}")

    def send(self, to: int, frame: bytes) -> None:
        with self._out_locks[to]:
            sock = self._out.get(to)
            if sock is None:
                sock = self._out[to] = self._connect(to)
            self.counter.record(frame)
            try:
                sock.sendall(LEN.pack(len(frame)) + frame)
            except OSError as exc:
                raise TransportError(f"send to node {to} failed: {exc}") from exc

    def receive(self, timeout: Optional[float] = None):
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._closed.set()
        try:
            self._server.close()
        except OSError:
            pass
        for s in self._out.values():
            try:
                s.close()
            except OSError:
                pass
