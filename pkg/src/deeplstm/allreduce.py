"""Decentralized mesh allreduce: reduce-scatter of N contiguous vector
pieces followed by an all-gather, over a pluggable point-to-point
transport.

Every worker sends its slice of each peer's piece, reduces its own piece
over all senders in ascending worker order (so the result is
bit-reproducible and matches a serial mean), then broadcasts the reduced
piece back. 2*N*(N-1) piece messages per reduction.

The reference transport is in-process queues; an optional socket transport
speaks a small length-prefixed frame format over TCP.
"""

import queue
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

SCATTER = "scatter"
GATHER = "gather"
_PHASE_CODES = {SCATTER: 0, GATHER: 1}
_PHASE_NAMES = {0: SCATTER, 1: GATHER}

WIRE_MAGIC = b"MARD"
_HEADER = struct.Struct("<4sBIIQ")


class AggregationError(Exception):
    """A distributed reduction could not complete (timeout, protocol
    violation, or transport failure)."""


@dataclass(frozen=True)
class Partition:
    """N contiguous, disjoint ranges covering [0, length); sizes differ by
    at most one, with earlier ranges taking the remainder."""

    num_workers: int
    ranges: tuple

    @property
    def length(self):
        return self.ranges[-1][1] if self.ranges else 0

    def piece(self, vector, slot):
        lo, hi = self.ranges[slot]
        return vector[lo:hi]


def partition(length, num_workers):
    """Split [0, length) into num_workers near-equal contiguous ranges."""
    if num_workers < 1:
        raise ValueError(f"need at least one worker, got {num_workers}")
    if length < 0:
        raise ValueError(f"length must be >= 0, got {length}")
    base, rem = divmod(length, num_workers)
    ranges = []
    start = 0
    for i in range(num_workers):
        size = base + (1 if i < rem else 0)
        ranges.append((start, start + size))
        start += size
    return Partition(num_workers, tuple(ranges))


@dataclass
class PieceMessage:
    """One vector piece in flight: who sent it, which slot it belongs to,
    and whether it is raw (scatter) or reduced (gather)."""

    sender: int
    slot: int
    payload: np.ndarray
    phase: str

    def __post_init__(self):
        if self.phase not in _PHASE_CODES:
            raise ValueError(f"unknown phase {self.phase!r}")
        self.payload = np.asarray(self.payload, dtype=np.float64)


def encode_piece(msg):
    """Frame a piece message: magic, phase byte, sender, slot, payload
    length, then little-endian float64 payload."""
    body = msg.payload.astype("<f8").tobytes()
    header = _HEADER.pack(WIRE_MAGIC, _PHASE_CODES[msg.phase], msg.sender,
                          msg.slot, len(body))
    return header + body


def decode_piece(data):
    """Inverse of :func:`encode_piece`."""
    if len(data) < _HEADER.size:
        raise AggregationError("short frame: missing header")
    magic, phase_code, sender, slot, body_len = _HEADER.unpack_from(data)
    if magic != WIRE_MAGIC:
        raise AggregationError(f"bad frame magic {magic!r}")
    if phase_code not in _PHASE_NAMES:
        raise AggregationError(f"bad phase code {phase_code}")
    body = data[_HEADER.size:]
    if len(body) != body_len:
        raise AggregationError(
            f"frame payload has {len(body)} bytes, header says {body_len}"
        )
    if body_len % 8:
        raise AggregationError("payload length not a multiple of 8")
    payload = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return PieceMessage(sender, slot, payload, _PHASE_NAMES[phase_code])


class Transport:
    """Point-to-point message channel for one worker.

    Delivery must be reliable and ordered per sender-receiver pair.
    ``push_back`` re-queues a message that arrived early (next round's
    traffic) so a later ``receive`` returns it again, oldest first.
    """

    def __init__(self):
        self._pushed_back = deque()

    def send(self, to, msg):
        raise NotImplementedError

    def _receive_new(self):
        raise NotImplementedError

    def receive(self):
        if self._pushed_back:
            return self._pushed_back.popleft()
        return self._receive_new()

    def push_back(self, msg):
        self._pushed_back.append(msg)


class InProcessMesh:
    """Fully connected in-memory mesh: one inbox queue per worker.

    Counts messages and payload bytes for traffic accounting. Thread-safe;
    each worker uses its own endpoint.
    """

    def __init__(self, num_workers, timeout=30.0):
        self.num_workers = num_workers
        self.timeout = timeout
        self._inboxes = [queue.Queue() for _ in range(num_workers)]
        self._lock = threading.Lock()
        self.messages_sent = 0
        self.payload_bytes = 0

    def endpoint(self, worker):
        return _InProcessEndpoint(self, worker)

    def _send(self, to, msg):
        if not 0 <= to < self.num_workers:
            raise AggregationError(f"no such worker {to}")
        with self._lock:
            self.messages_sent += 1
            self.payload_bytes += msg.payload.nbytes
        self._inboxes[to].put(msg)

    def _receive(self, worker):
        try:
            return self._inboxes[worker].get(timeout=self.timeout)
        except queue.Empty:
            raise AggregationError(
                f"worker {worker} timed out after {self.timeout}s waiting for a piece"
            ) from None


class _InProcessEndpoint(Transport):
    def __init__(self, mesh, worker):
        super().__init__()
        self._mesh = mesh
        self._worker = worker

    def send(self, to, msg):
        self._mesh._send(to, msg)

    def _receive_new(self):
        return self._mesh._receive(self._worker)


class SocketTransport(Transport):
    """TCP mesh endpoint speaking the :func:`encode_piece` frame format.

    One connection per peer pair; a background reader per connection feeds
    a single inbox so ``receive`` returns messages from any peer.
    """

    def __init__(self, me, num_workers, base_port, host="127.0.0.1",
                 timeout=30.0):
        super().__init__()
        self.me = me
        self.num_workers = num_workers
        self.timeout = timeout
        self._inbox = queue.Queue()
        self._socks = {}
        self._send_locks = {}
        self._readers = []

        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, base_port + me))
        server.listen(num_workers)
        server.settimeout(timeout)
        self._server = server

        # lower ids listen for higher ids; higher ids dial lower ids,
        # retrying while the peer's listener comes up
        for peer in range(me):
            s = self._dial(host, base_port + peer)
            s.sendall(struct.pack("<I", me))
            self._adopt(peer, s)
        for _ in range(num_workers - 1 - me):
            s, _addr = server.accept()
            (peer,) = struct.unpack("<I", self._read_exact(s, 4))
            self._adopt(peer, s)

    def _dial(self, host, port):
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                return socket.create_connection((host, port), timeout=self.timeout)
            except OSError:
                if time.monotonic() >= deadline:
                    raise AggregationError(
                        f"worker {self.me} could not reach peer at port {port}"
                    ) from None
                time.sleep(0.02)

    def _adopt(self, peer, sock):
        sock.settimeout(self.timeout)
        self._socks[peer] = sock
        self._send_locks[peer] = threading.Lock()
        reader = threading.Thread(target=self._read_loop, args=(sock,), daemon=True)
        reader.start()
        self._readers.append(reader)

    @staticmethod
    def _read_exact(sock, n):
        buf = b""
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                raise AggregationError("peer closed connection mid-frame")
            buf += chunk
        return buf

    def _read_loop(self, sock):
        try:
            while True:
                header = self._read_exact(sock, _HEADER.size)
                (_, _, _, _, body_len) = _HEADER.unpack(header)
                body = self._read_exact(sock, body_len) if body_len else b""
                self._inbox.put(decode_piece(header + body))
        except (AggregationError, OSError):
            self._inbox.put(None)  # wake a blocked receive; it will error out

    def send(self, to, msg):
        data = encode_piece(msg)
        with self._send_locks[to]:
            self._socks[to].sendall(data)

    def _receive_new(self):
        try:
            msg = self._inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise AggregationError(
                f"worker {self.me} timed out after {self.timeout}s"
            ) from None
        if msg is None:
            raise AggregationError("a peer connection closed during reduction")
        return msg

    def close(self):
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._server.close()


def mesh_allreduce(local, me, part, transport):
    """Average equal-length vectors across all workers of a mesh.

    Phase 1 (reduce-scatter): send each peer its piece of the local vector;
    collect everyone's copy of piece ``me`` and average in ascending sender
    order. Phase 2 (all-gather): broadcast the reduced piece, collect the
    others. Every worker returns the identical full mean vector.

    Messages from the next reduction round can arrive while this one is
    still gathering (a fast peer may race ahead); those are pushed back
    onto the transport for the next call.
    """
    local = np.asarray(local, dtype=np.float64)
    if local.ndim != 1 or local.size != part.length:
        raise ValueError(
            f"local vector length {local.size} does not match partition "
            f"length {part.length}"
        )
    n = part.num_workers
    if me < 0 or me >= n:
        raise ValueError(f"worker id {me} out of range for {n} workers")
    if n == 1:
        return local.copy()

    for peer in range(n):
        if peer != me:
            transport.send(
                peer, PieceMessage(me, peer, part.piece(local, peer).copy(), SCATTER)
            )

    pieces = {me: part.piece(local, me)}
    early_gathers = []
    while len(pieces) < n:
        msg = transport.receive()
        if msg.phase == GATHER:
            early_gathers.append(msg)  # current round; a peer finished first
            continue
        if msg.slot != me:
            raise AggregationError(
                f"worker {me} got a scatter for slot {msg.slot}"
            )
        if msg.sender in pieces:
            raise AggregationError(f"duplicate scatter from worker {msg.sender}")
        _check_piece_len(part, msg)
        pieces[msg.sender] = msg.payload

    lo, hi = part.ranges[me]
    reduced = np.zeros(hi - lo)
    for sender in range(n):
        reduced += pieces[sender]
    reduced /= n

    for peer in range(n):
        if peer != me:
            transport.send(peer, PieceMessage(me, me, reduced.copy(), GATHER))

    result = np.empty_like(local)
    result[lo:hi] = reduced
    seen = {me}

    def take_gather(msg):
        if msg.slot != msg.sender:
            raise AggregationError(
                f"gather slot {msg.slot} does not match sender {msg.sender}"
            )
        if msg.sender in seen:
            raise AggregationError(f"duplicate gather from worker {msg.sender}")
        _check_piece_len(part, msg)
        g_lo, g_hi = part.ranges[msg.slot]
        result[g_lo:g_hi] = msg.payload
        seen.add(msg.sender)

    for msg in early_gathers:
        take_gather(msg)
    next_round = []
    while len(seen) < n:
        msg = transport.receive()
        if msg.phase == SCATTER:
            next_round.append(msg)  # a peer already started the next round
            continue
        take_gather(msg)
    for msg in next_round:
        transport.push_back(msg)
    return result


def _check_piece_len(part, msg):
    lo, hi = part.ranges[msg.slot]
    if msg.payload.size != hi - lo:
        raise AggregationError(
            f"piece for slot {msg.slot} has length {msg.payload.size}, "
            f"expected {hi - lo}"
        )
