"""Wide-area channel: parallel streams, framing, pacing, and emulation.

A channel carries whole messages over ``n_streams`` parallel byte streams.
Messages are split into chunks, striped round-robin across the streams,
paced per stream by a token bucket, and reassembled at the receiver by
(message id, chunk sequence); delivery is whole-message and in message-id
order.  The same framing and reassembly code runs over two backends:

* ``emu``  -- in-process byte pipes with configurable one-way latency,
  per-direction path bandwidth, seeded jitter, and a per-stream in-flight
  cap equal to the configured buffer size (the emulated transmit window);
* ``net``  -- TCP sockets, one port per stream (base + stream index,
  default base 4256, overridable via the TREEGRID_PORT_BASE env var).

Wire frame, little-endian: magic ``TGW1``, msg_id u64, chunk_seq u32,
n_chunks u32, payload_len u32, crc32 u32, payload bytes.
"""

from __future__ import annotations

import heapq
import os
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ChannelConfig",
    "EmuNetConfig",
    "FRAME_MAGIC",
    "FRAME_HEADER_BYTES",
    "DEFAULT_PORT_BASE",
    "TransportError",
    "ConnectTimeoutError",
    "PartialConnectionError",
    "IntegrityError",
    "TruncationError",
    "SendReport",
    "Channel",
    "EmuNetwork",
    "open_channel",
    "open_channel_pair",
    "send_message",
    "recv_message",
    "measure_path",
    "serve_echo",
    "encode_frame",
    "decode_frame_header",
]

FRAME_MAGIC = b"TGW1"
_HEADER = struct.Struct("<4sQIIII")
FRAME_HEADER_BYTES = _HEADER.size  # 28
DEFAULT_PORT_BASE = 4256


class TransportError(Exception):
    """Base class for channel failures."""


class ConnectTimeoutError(TransportError):
    pass


class PartialConnectionError(TransportError):
    def __init__(self, requested, connected):
        super().__init__(f"only {connected} of {requested} streams connected; rolled back")
        self.requested = requested
        self.connected = connected


class IntegrityError(TransportError):
    def __init__(self, stream, msg_id, chunk_seq):
        super().__init__(f"crc mismatch on stream {stream}, message {msg_id}, chunk {chunk_seq}")
        self.stream = stream
        self.msg_id = msg_id
        self.chunk_seq = chunk_seq


class TruncationError(TransportError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    """Stream count, buffering, pacing and framing parameters."""

    n_streams: int = 64
    buffer_bytes: int = 786_432          # 768 kB per stream
    pace_bytes_per_s: int = 10_000_000   # per stream; 0 disables pacing
    connect_timeout_ms: int = 5_000
    chunk_bytes: int = 65_536
    aggregate_pace_bytes_per_s: int = 0  # optional whole-path cap; 0 disables

    def __post_init__(self):
        if self.n_streams < 1:
            raise ValueError("n_streams must be >= 1")
        if self.chunk_bytes < 1024:
            raise ValueError("chunk_bytes must be >= 1 KiB")
        if self.buffer_bytes < self.chunk_bytes:
            raise ValueError("buffer_bytes must hold at least one chunk")
        if min(self.pace_bytes_per_s, self.aggregate_pace_bytes_per_s,
               self.connect_timeout_ms) < 0:
            raise ValueError("rates and timeouts must be non-negative")


@dataclass(frozen=True)
class EmuNetConfig:
    """Emulated path shape.  Loss is fixed at zero (reliable byte streams)."""

    one_way_latency_ms: float = 0.0
    bandwidth_bytes_per_s: float = 1.25e9
    jitter_ms: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.one_way_latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be non-negative")
        if self.bandwidth_bytes_per_s <= 0:
            raise ValueError("bandwidth must be positive")


def encode_frame(msg_id, chunk_seq, n_chunks, payload):
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return _HEADER.pack(FRAME_MAGIC, msg_id, chunk_seq, n_chunks,
                        len(payload), crc) + payload


def decode_frame_header(buf):
    magic, msg_id, chunk_seq, n_chunks, length, crc = _HEADER.unpack(buf)
    if magic != FRAME_MAGIC:
        raise TransportError(f"bad frame magic {magic!r}")
    return msg_id, chunk_seq, n_chunks, length, crc


@dataclass
class SendReport:
    nbytes: int
    elapsed_s: float
    throughput_bytes_per_s: float


class _TokenBucket:
    """Per-stream pacer: capacity one refill quantum or one chunk."""

    def __init__(self, rate, chunk_bytes, quantum_s=0.01):
        self.rate = float(rate)
        self.capacity = max(self.rate * quantum_s, float(chunk_bytes))
        self.tokens = self.capacity
        self.last = time.perf_counter()
        self.lock = threading.Lock()

    def acquire(self, n):
        if self.rate <= 0:
            return
        while True:
            with self.lock:
                now = time.perf_counter()
                self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
                self.last = now
                if self.tokens >= n:
                    self.tokens -= n
                    return
                wait = (n - self.tokens) / self.rate
            time.sleep(min(wait, 0.01) if wait > 0.01 else wait)


# -- emulated backend ----------------------------------------------------------

class _EmuPathDirection:
    """Shared transmission line for all streams of one path direction."""

    def __init__(self, emu_cfg, direction_seed):
        self.cfg = emu_cfg
        self.lock = threading.Lock()
        self.busy_until = 0.0
        self.rng = np.random.default_rng((emu_cfg.seed, direction_seed))


class _EmuPipe:
    """One direction of one emulated stream: reliable, in-order, delayed."""

    def __init__(self, path, buffer_bytes):
        self.path = path
        self.buffer_bytes = buffer_bytes
        self.cond = threading.Condition()
        self.items = []           # FIFO of (deliver_at, bytes)
        self.in_flight = 0
        self.last_deliver = 0.0
        self.closed = False
        self._leftover = b""

    def send(self, data):
        n = len(data)
        with self.cond:
            while self.in_flight + n > self.buffer_bytes and not self.closed:
                self.cond.wait(timeout=0.005)
            if self.closed:
                raise TransportError("pipe closed")
        path = self.path
        with path.lock:
            now = time.perf_counter()
            start = max(now, path.busy_until)
            path.busy_until = start + n / path.cfg.bandwidth_bytes_per_s
            deliver = path.busy_until + path.cfg.one_way_latency_ms * 1e-3
            if path.cfg.jitter_ms > 0:
                deliver += path.rng.uniform(0.0, path.cfg.jitter_ms) * 1e-3
        with self.cond:
            deliver = max(deliver, self.last_deliver)  # streams stay in-order
            self.last_deliver = deliver
            self.items.append((deliver, data))
            self.in_flight += n
            self.cond.notify_all()

    def read(self, nbytes, timeout=None):
        """Up to nbytes once the head item's delivery time has passed."""
        deadline = None if timeout is None else time.perf_counter() + timeout
        while True:
            with self.cond:
                if self._leftover:
                    out = self._leftover[:nbytes]
                    self._leftover = self._leftover[nbytes:]
                    return out
                if self.items:
                    deliver, data = self.items[0]
                    now = time.perf_counter()
                    if deliver <= now:
                        self.items.pop(0)
                        self.in_flight -= len(data)
                        self.cond.notify_all()
                        out = data[:nbytes]
                        self._leftover = data[nbytes:]
                        return bytes(out)
                    wait = deliver - now
                elif self.closed:
                    return b""
                else:
                    wait = 0.05
                if deadline is not None and time.perf_counter() >= deadline:
                    return None
                self.cond.wait(timeout=min(wait, 0.05))

    def close(self):
        with self.cond:
            self.closed = True
            self.cond.notify_all()


class EmuNetwork:
    """Rendezvous registry plus path configuration for emulated channels."""

    def __init__(self):
        self._lock = threading.RLock()
        self._paths = {}
        self._default = EmuNetConfig()
        self._pending = {}

    def set_path(self, a, b, emu_cfg):
        with self._lock:
            self._paths[frozenset((a, b))] = emu_cfg

    def set_default_path(self, emu_cfg):
        with self._lock:
            self._default = emu_cfg

    def path_config(self, a, b):
        with self._lock:
            return self._paths.get(frozenset((a, b)), self._default)

    def _rendezvous(self, local, remote, cfg, timeout_s, fail_streams):
        """Both ends call this; the first builds the pipes, both get endpoints."""
        key = (min(local, remote), max(local, remote))
        deadline = time.perf_counter() + timeout_s
        with self._lock:
            entry = self._pending.get(key)
            if entry is None:
                emu = self.path_config(local, remote)
                if fail_streams:
                    raise PartialConnectionError(cfg.n_streams,
                                                 cfg.n_streams - len(fail_streams))
                # one transmission line per direction, shared by its streams
                line_ab = _EmuPathDirection(emu, 1)
                line_ba = _EmuPathDirection(emu, 2)
                pipes_ab = [_EmuPipe(line_ab, cfg.buffer_bytes)
                            for _ in range(cfg.n_streams)]
                pipes_ba = [_EmuPipe(line_ba, cfg.buffer_bytes)
                            for _ in range(cfg.n_streams)]
                entry = {"cfg": cfg, "pipes": {key[0]: (pipes_ab, pipes_ba),
                                               key[1]: (pipes_ba, pipes_ab)},
                         "first": local}
                self._pending[key] = entry
                first = True
            else:
                first = False
                if entry["cfg"].n_streams != cfg.n_streams:
                    raise TransportError("both ends must configure the same stream count")
        if first:
            # wait for the peer to show up
            while True:
                with self._lock:
                    if entry.get("joined"):
                        break
                if time.perf_counter() > deadline:
                    with self._lock:
                        self._pending.pop(key, None)
                    raise ConnectTimeoutError(
                        f"emulated peer {remote!r} did not connect within {timeout_s:.1f}s")
                time.sleep(0.001)
        else:
            with self._lock:
                entry["joined"] = True
                self._pending.pop(key, None)
        if local not in entry["pipes"]:
            raise TransportError("endpoint not part of this path")
        return entry["pipes"][local]


_DEFAULT_EMU_NETWORK = EmuNetwork()


# -- channel -------------------------------------------------------------------

class _StreamSender(threading.Thread):
    def __init__(self, channel, index, write_fn):
        super().__init__(daemon=True, name=f"tx-{index}")
        self.channel = channel
        self.index = index
        self.write_fn = write_fn
        self.outbox = queue.Queue()
        self.corrupt_next = False

    def run(self):
        bucket = self.channel._buckets[self.index]
        agg = self.channel._agg_bucket
        while True:
            item = self.outbox.get()
            if item is None:
                return
            msg_id, seq, n_chunks, payload, done = item
            try:
                frame = encode_frame(msg_id, seq, n_chunks, payload)
                if self.corrupt_next and len(frame) > FRAME_HEADER_BYTES:
                    self.corrupt_next = False
                    frame = bytearray(frame)
                    frame[FRAME_HEADER_BYTES] ^= 0xFF
                    frame = bytes(frame)
                bucket.acquire(len(payload))
                if agg is not None:
                    agg.acquire(len(payload))
                self.write_fn(frame)
            except Exception as exc:  # surface on the sending side
                self.channel._fail(exc)
                done[1] = exc
            finally:
                done[0].release()


class _StreamReader(threading.Thread):
    def __init__(self, channel, index, read_fn):
        super().__init__(daemon=True, name=f"rx-{index}")
        self.channel = channel
        self.index = index
        self.read_fn = read_fn
        self._buf = b""

    def _read_exact(self, n):
        parts = []
        need = n
        while need > 0:
            if self._buf:
                take = self._buf[:need]
                self._buf = self._buf[len(take):]
                parts.append(take)
                need -= len(take)
                continue
            data = self.read_fn(max(need, 65536))
            if not data:
                return None if not parts else b"".join(parts)  # truncated
            self._buf = data
        return b"".join(parts)

    def run(self):
        ch = self.channel
        while not ch._closing:
            head = self._read_exact(FRAME_HEADER_BYTES)
            if head is None or len(head) == 0:
                return  # orderly close between frames
            if len(head) < FRAME_HEADER_BYTES:
                ch._fail(TruncationError(
                    f"stream {self.index} closed inside a frame header"))
                return
            try:
                msg_id, seq, n_chunks, length, crc = decode_frame_header(head)
            except TransportError as exc:
                ch._fail(exc)
                return
            payload = self._read_exact(length) if length else b""
            if payload is None or (payload is not None and len(payload) < length):
                ch._fail(TruncationError(
                    f"stream {self.index} closed inside message {msg_id} chunk {seq}"))
                return
            if (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
                ch._fail(IntegrityError(self.index, msg_id, seq))
                return
            ch._reassemble(msg_id, seq, n_chunks, payload)


class Channel:
    """Striped, paced, framed message channel over n parallel streams."""

    def __init__(self, config, send_pipes, recv_pipes, close_fns, label=""):
        self.config = config
        self.label = label
        self._closing = False
        self._error = None
        self._close_fns = close_fns
        self._next_msg_id = 0
        self._send_lock = threading.Lock()
        self._buckets = [_TokenBucket(config.pace_bytes_per_s, config.chunk_bytes)
                         for _ in range(config.n_streams)]
        self._agg_bucket = (_TokenBucket(config.aggregate_pace_bytes_per_s,
                                         config.chunk_bytes)
                            if config.aggregate_pace_bytes_per_s else None)
        self._partial = {}
        self._ready = []            # (msg_id, bytes) heap
        self._next_deliver = 0
        self._recv_cond = threading.Condition()
        self._senders = [_StreamSender(self, i, send_pipes[i]) for i in range(config.n_streams)]
        self._readers = [_StreamReader(self, i, recv_pipes[i]) for i in range(config.n_streams)]
        for t in self._senders + self._readers:
            t.start()

    # internal ------------------------------------------------------------

    def _fail(self, exc):
        with self._recv_cond:
            if self._error is None:
                self._error = exc
            self._recv_cond.notify_all()

    def _reassemble(self, msg_id, seq, n_chunks, payload):
        with self._recv_cond:
            parts = self._partial.get(msg_id)
            if parts is None:
                parts = [None] * n_chunks
                self._partial[msg_id] = parts
            if seq >= n_chunks or parts[seq] is not None:
                self._error = TransportError(
                    f"duplicate or out-of-range chunk {seq} of message {msg_id}")
                self._recv_cond.notify_all()
                return
            parts[seq] = payload
            if all(p is not None for p in parts):
                del self._partial[msg_id]
                heapq.heappush(self._ready, (msg_id, b"".join(parts)))
                self._recv_cond.notify_all()

    # public ----------------------------------------------------------------

    def send_message(self, data):
        if self._error is not None:
            raise self._error
        if self._closing:
            raise TransportError("channel closed")
        data = bytes(data)
        cb = self.config.chunk_bytes
        n_chunks = max(1, -(-len(data) // cb))
        with self._send_lock:
            msg_id = self._next_msg_id
            self._next_msg_id += 1
            t0 = time.perf_counter()
            done = [threading.Semaphore(0), None]
            for seq in range(n_chunks):
                chunk = data[seq * cb:(seq + 1) * cb]
                self._senders[seq % len(self._senders)].outbox.put(
                    (msg_id, seq, n_chunks, chunk, done))
            for _ in range(n_chunks):
                done[0].acquire()
            elapsed = time.perf_counter() - t0
        if done[1] is not None:
            raise done[1]
        return SendReport(len(data), elapsed,
                          len(data) / elapsed if elapsed > 0 else float("inf"))

    def recv_message(self, timeout=None):
        deadline = None if timeout is None else time.perf_counter() + timeout
        with self._recv_cond:
            while True:
                if self._error is not None:
                    raise self._error
                if self._ready and self._ready[0][0] == self._next_deliver:
                    msg_id, data = heapq.heappop(self._ready)
                    self._next_deliver = msg_id + 1
                    return data
                if self._closing:
                    raise TransportError("channel closed")
                remaining = None if deadline is None else deadline - time.perf_counter()
                if remaining is not None and remaining <= 0:
                    raise ConnectTimeoutError("recv_message timed out")
                self._recv_cond.wait(timeout=0.05 if remaining is None
                                     else min(remaining, 0.05))

    @property
    def n_streams(self):
        return self.config.n_streams

    def emu_corrupt_next_chunk(self, stream=0):
        """Test hook: flip one payload byte in the next chunk on a stream."""
        self._senders[stream].corrupt_next = True

    def close(self):
        if self._closing:
            return
        self._closing = True
        for s in self._senders:
            s.outbox.put(None)
        for fn in self._close_fns:
            try:
                fn()
            except Exception:
                pass
        with self._recv_cond:
            self._recv_cond.notify_all()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- channel opening -----------------------------------------------------------

def open_channel(endpoint, config=None, backend="emu", network=None,
                 role="connect", fail_streams=None):
    """Open all streams of a channel; any stream failure rolls back.

    emu: ``endpoint`` is (local_name, remote_name); both ends must call
    within the connect timeout.  net: ``endpoint`` is "host:port_base"
    (role="connect") or ":port_base"/"host:port_base" (role="listen");
    stream k uses port_base + k.
    """
    config = config or ChannelConfig()
    if backend == "emu":
        network = network or _DEFAULT_EMU_NETWORK
        local, remote = endpoint
        send_pipes, recv_pipes = network._rendezvous(
            local, remote, config, config.connect_timeout_ms * 1e-3,
            fail_streams or ())
        return Channel(config,
                       [p.send for p in send_pipes],
                       [p.read for p in recv_pipes],
                       [p.close for p in send_pipes] + [p.close for p in recv_pipes],
                       label=f"emu:{local}->{remote}")
    if backend != "net":
        raise ValueError(f"unknown backend {backend!r}")
    host, _, port_s = endpoint.rpartition(":")
    base = int(port_s) if port_s else _env_port_base()
    host = host or "127.0.0.1"
    socks = []
    deadline = time.perf_counter() + config.connect_timeout_ms * 1e-3
    try:
        if role == "listen":
            listeners = []
            try:
                for k in range(config.n_streams):
                    ls = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                    ls.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                    ls.bind((host, base + k))
                    ls.listen(1)
                    ls.settimeout(max(0.05, deadline - time.perf_counter()))
                    listeners.append(ls)
                for k, ls in enumerate(listeners):
                    try:
                        conn, _ = ls.accept()
                    except socket.timeout:
                        raise ConnectTimeoutError(
                            f"no peer on port {base + k} within "
                            f"{config.connect_timeout_ms} ms "
                            f"({k} of {config.n_streams} streams connected)")
                    _tune_socket(conn, config)
                    socks.append(conn)
            finally:
                for ls in listeners:
                    ls.close()
        else:
            for k in range(config.n_streams):
                while True:
                    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                    s.settimeout(max(0.05, deadline - time.perf_counter()))
                    try:
                        s.connect((host, base + k))
                        _tune_socket(s, config)
                        socks.append(s)
                        break
                    except (ConnectionRefusedError, socket.timeout, OSError):
                        s.close()
                        if time.perf_counter() >= deadline:
                            raise ConnectTimeoutError(
                                f"connect to {host}:{base + k} timed out "
                                f"({k} of {config.n_streams} streams connected)")
                        time.sleep(0.02)
    except TransportError:
        for s in socks:
            s.close()
        if socks:
            raise PartialConnectionError(config.n_streams, len(socks))
        raise
    recv_fns = [_sock_reader(s) for s in socks]
    send_fns = [s.sendall for s in socks]
    return Channel(config, send_fns, recv_fns,
                   [s.close for s in socks], label=f"net:{endpoint}")


def _env_port_base():
    return int(os.environ.get("TREEGRID_PORT_BASE", DEFAULT_PORT_BASE))


def _tune_socket(s, config):
    s.settimeout(None)
    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, config.buffer_bytes)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, config.buffer_bytes)


def _sock_reader(s):
    def read(n):
        try:
            return s.recv(n)
        except OSError:
            return b""
    return read


def open_channel_pair(config=None, emu_cfg=None, names=("a", "b")):
    """Both ends of an emulated channel, for in-process use."""
    config = config or ChannelConfig()
    net = EmuNetwork()
    if emu_cfg is not None:
        net.set_default_path(emu_cfg)
    out = {}
    def side(local, remote):
        out[local] = open_channel((local, remote), config, "emu", network=net)
    t = threading.Thread(target=side, args=(names[1], names[0]), daemon=True)
    t.start()
    side(names[0], names[1])
    t.join()
    return out[names[0]], out[names[1]]


def send_message(channel, data):
    return channel.send_message(data)


def recv_message(channel, timeout=None):
    return channel.recv_message(timeout)


def serve_echo(channel, n_messages):
    """Echo whole messages back; the peer side of measure_path."""
    for _ in range(n_messages):
        channel.send_message(channel.recv_message())


def measure_path(channel, probe_bytes, repetitions):
    """(rtt seconds, throughput bytes/s) by median-of-repetitions probing.

    The peer must be running :func:`serve_echo` with 2 * repetitions
    messages.  Round-trip time uses tiny probes; throughput divides the
    full echoed probe volume by its round-trip wall time.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if probe_bytes < 1:
        raise ValueError("probe_bytes must be >= 1")
    rtts = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        channel.send_message(b"\x00" * 8)
        channel.recv_message()
        rtts.append(time.perf_counter() - t0)
    blob = os.urandom(min(probe_bytes, 1 << 20))
    reps = -(-probe_bytes // len(blob))
    payload = (blob * reps)[:probe_bytes]
    assert len(payload) == probe_bytes
    rates = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        channel.send_message(payload)
        back = channel.recv_message()
        dt = time.perf_counter() - t0
        if back != payload:
            raise TransportError("echo probe came back altered")
        rates.append(2.0 * probe_bytes / dt)
    return float(np.median(rtts)), float(np.median(rates))
