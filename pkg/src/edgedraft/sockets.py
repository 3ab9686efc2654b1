"""Stream-socket backend: a threaded verification server, a wall-clock device
session runner, and a lossy forwarding proxy.

Protocol I/O is concurrent across connections, but queue mutation, batch
planning, and session updates happen on one worker thread.  At loss 0 a
session run here commits the same tokens as the simulated backend given the
same seeds (timing differs; tokens do not).
"""

from __future__ import annotations

import heapq
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

from .device import (
    ArmTimer,
    DeviceAgent,
    DraftingPolicy,
    ReliabilityPolicy,
    ResponseArrived,
    SendRequest,
    SessionLimits,
    TimeoutFired,
)
from .errors import BindError, ConnectError, Malformed, TransportFatal
from .models import LanguageModel
from .protocol import (
    SessionClose,
    SessionInit,
    VerifyRequest,
    VerifyResponse,
    decode_stream,
    encode,
)
from .rng import RngStream
from .server import VerifyServer


def _now_ms() -> float:
    return time.monotonic() * 1000.0


class SocketVerifyServer:
    """Threaded socket front end over the transport-agnostic VerifyServer."""

    def __init__(self, server: VerifyServer, host: str, port: int,
                 inject_service_delay: bool = True):
        self.server = server
        self.inject_service_delay = inject_service_delay
        try:
            self._sock = socket.create_server((host, port))
        except OSError as exc:
            raise BindError(f"cannot bind {host}:{port}: {exc}") from exc
        self.host, self.port = self._sock.getsockname()[:2]
        self._inbox: queue.Queue = queue.Queue()
        self._conn_of_session: dict[int, socket.socket] = {}
        self._write_locks: dict[socket.socket, threading.Lock] = {}
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    # -- lifecycle -------------------------------------------------------------

    def start(self):
        acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        worker = threading.Thread(target=self._worker_loop, daemon=True)
        acceptor.start()
        worker.start()
        self._threads = [acceptor, worker]

    def shutdown(self):
        """Stop accepting, drain the queue, answer everything, then close."""
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        for thread in self._threads:
            thread.join(timeout=5.0)
        self._drain()

    def _drain(self):
        while True:
            batch = [e.request for e in self.server.queue.entries]
            self.server.queue.entries = []
            if not batch:
                break
            result = self.server.execute_batch(batch, _now_ms())
            for resp in result.responses:
                self._send_response(resp)

    # -- socket plumbing ----------------------------------------------------------

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            self._write_locks[conn] = threading.Lock()
            reader = threading.Thread(target=self._reader_loop, args=(conn,),
                                      daemon=True)
            reader.start()

    def _reader_loop(self, conn: socket.socket):
        buf = b""
        while not self._stop.is_set():
            try:
                chunk = conn.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            try:
                msgs, used = decode_stream(buf)
            except Malformed:
                conn.close()  # malformed frames are connection-fatal
                return
            buf = buf[used:]
            for msg in msgs:
                self._inbox.put((conn, msg))

    def _send_response(self, resp: VerifyResponse):
        conn = self._conn_of_session.get(resp.session_id)
        if conn is None:
            return
        lock = self._write_locks.get(conn)
        data = encode(resp)
        try:
            if lock:
                with lock:
                    conn.sendall(data)
            else:
                conn.sendall(data)
        except OSError:
            pass

    # -- serialized execution ---------------------------------------------------

    def _worker_loop(self):
        cfg = self.server.config
        while not self._stop.is_set():
            timeout_s = 0.01
            oldest = self.server.queue.oldest_arrival_ms()
            if oldest is not None and cfg.batch_timeout_ms > 0:
                due = oldest + cfg.batch_timeout_ms
                timeout_s = max(0.0, min(timeout_s, (due - _now_ms()) / 1000.0))
            try:
                conn, msg = self._inbox.get(timeout=timeout_s)
            except queue.Empty:
                conn = msg = None
            if msg is not None:
                self._handle(conn, msg)
                while True:  # drain whatever arrived together
                    try:
                        conn, msg = self._inbox.get_nowait()
                    except queue.Empty:
                        break
                    self._handle(conn, msg)
            batch = self.server.take_batch(_now_ms())
            if not batch:
                continue
            start = _now_ms()
            result = self.server.execute_batch(batch, start)
            if self.inject_service_delay:
                remaining = (result.finished_ms - _now_ms()) / 1000.0
                if remaining > 0:
                    time.sleep(remaining)
            for resp in result.responses:
                self._send_response(resp)

    def _handle(self, conn: socket.socket, msg):
        if isinstance(msg, SessionInit):
            self.server.session_init(msg)
            self._conn_of_session[msg.session_id] = conn
        elif isinstance(msg, VerifyRequest):
            reply = self.server.submit(msg, _now_ms())
            if reply is not None:
                self._send_response(reply)
        elif isinstance(msg, SessionClose):
            self.server.session_close(msg)


class SocketTransport:
    """Device-side connection: frames out, decoded responses in."""

    def __init__(self, host: str, port: int, timeout_s: float = 5.0):
        try:
            self._sock = socket.create_connection((host, port),
                                                  timeout=timeout_s)
        except OSError as exc:
            raise ConnectError(f"cannot reach {host}:{port}: {exc}") from exc
        self._sock.settimeout(None)
        self.inbox: queue.Queue = queue.Queue()
        self._closed = False
        threading.Thread(target=self._reader_loop, daemon=True).start()

    def _reader_loop(self):
        buf = b""
        while not self._closed:
            try:
                chunk = self._sock.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            try:
                msgs, used = decode_stream(buf)
            except Malformed:
                return
            buf = buf[used:]
            for msg in msgs:
                self.inbox.put(msg)

    def send(self, msg):
        try:
            self._sock.sendall(encode(msg))
        except OSError:
            pass  # loss is detected by timeouts, not send errors

    def close(self):
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass


@dataclass
class SessionTranscript:
    prompt: tuple[int, ...]
    emitted: list = field(default_factory=list)
    events: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        import json

        lines = []
        for token in self.emitted:
            lines.append(json.dumps(
                {"index": token.index, "token": token.token,
                 "provenance": token.provenance, "time_ms": token.time_ms},
                sort_keys=True))
        for event in self.events:
            lines.append(json.dumps(event, sort_keys=True))
        return "\n".join(lines) + "\n"


def run_session(
    prompt,
    draft: LanguageModel,
    transport: SocketTransport,
    drafting: DraftingPolicy,
    reliability: ReliabilityPolicy,
    limits: SessionLimits,
    draft_stream: RngStream | None = None,
    device_index: int = 0,
    pace: bool = True,
    wall_timeout_s: float = 120.0,
    on_emit=None,
) -> SessionTranscript:
    """Drive one device session over a connected transport until done.

    With pace=False the device drafts as fast as the machine allows (useful
    for tests); otherwise drafting follows the model profile's rate.
    """
    if draft_stream is None:
        draft_stream = RngStream.derive(0, "draft", device_index, 0)
    agent = DeviceAgent(prompt, draft, drafting, reliability, limits,
                        draft_stream, device_index=device_index)
    transcript = SessionTranscript(tuple(prompt))
    period_ms = 1000.0 / draft.profile.tokens_per_second if pace else 0.0
    timers: dict[int, float] = {}
    start = _now_ms()
    next_draft = start + period_ms

    def do_actions(actions):
        for action in actions:
            if isinstance(action, SendRequest):
                for msg in action.messages:
                    transport.send(msg)
                    transcript.events.append(
                        {"event": "send", "type": type(msg).__name__,
                         "time_ms": _now_ms() - start})
            elif isinstance(action, ArmTimer):
                timers[action.timer_id] = action.deadline_ms
            # EmitTokens / ReleaseFallback land in agent.state.emitted

    try:
        while not agent.state.done:
            now = _now_ms()
            if now - start > wall_timeout_s * 1000.0:
                break
            deadlines = []
            if agent.wants_draft():
                deadlines.append(next_draft)
            deadlines.extend(timers.values())
            emitted_before = len(agent.state.emitted)
            if not deadlines:
                try:
                    msg = transport.inbox.get(timeout=0.05)
                except queue.Empty:
                    continue
                do_actions(agent.step(ResponseArrived(msg), _now_ms()))
            else:
                due = min(deadlines)
                wait_s = max(0.0, (due - now) / 1000.0)
                try:
                    msg = transport.inbox.get(timeout=wait_s)
                    do_actions(agent.step(ResponseArrived(msg), _now_ms()))
                except queue.Empty:
                    now = _now_ms()
                    fired = [tid for tid, t in timers.items() if t <= now]
                    for tid in fired:
                        del timers[tid]
                        do_actions(agent.step(TimeoutFired(tid), now))
                    if agent.wants_draft() and next_draft <= now:
                        do_actions(agent.draft_one(now))
                        next_draft = now + period_ms
            if on_emit is not None:
                for token in agent.state.emitted[emitted_before:]:
                    on_emit(token)
    except TransportFatal:
        transcript.stats["transport_fatal"] = True
    transcript.emitted = list(agent.state.emitted)
    transcript.stats.update(agent.stats)
    return transcript


class LossyProxy:
    """Forwards frames between two endpoints applying Bernoulli loss and
    latency per message, preserving per-direction FIFO order."""

    def __init__(self, listen: tuple[str, int], forward: tuple[str, int],
                 loss: float = 0.0, rtt_ms: float = 0.0, jitter_ms: float = 0.0,
                 seed: int = 0):
        self.forward = forward
        self.loss = loss
        self.rtt_ms = rtt_ms
        self.jitter_ms = jitter_ms
        self.seed = seed
        try:
            self._sock = socket.create_server(listen)
        except OSError as exc:
            raise BindError(f"cannot bind {listen}: {exc}") from exc
        self.host, self.port = self._sock.getsockname()[:2]
        self._stop = threading.Event()
        self._pair = 0

    def start(self):
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def stop(self):
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                client, _ = self._sock.accept()
            except OSError:
                return
            try:
                upstream = socket.create_connection(self.forward, timeout=5.0)
            except OSError:
                client.close()
                continue
            pair = self._pair
            self._pair += 1
            self._pump(client, upstream, RngStream.derive(self.seed, "up", pair))
            self._pump(upstream, client, RngStream.derive(self.seed, "down", pair))

    def _pump(self, src: socket.socket, dst: socket.socket, rng: RngStream):
        frames: queue.Queue = queue.Queue()

        def reader():
            buf = b""
            last_due = 0.0
            while not self._stop.is_set():
                try:
                    chunk = src.recv(65536)
                except OSError:
                    break
                if not chunk:
                    break
                buf += chunk
                try:
                    msgs, used = decode_stream(buf)
                except Malformed:
                    break
                raw, buf = buf[:used], buf[used:]
                offset = 0
                for msg in msgs:
                    data = encode(msg)
                    offset += len(data)
                    if self.loss > 0 and rng.uniform() < self.loss:
                        continue
                    delay = self.rtt_ms / 2.0
                    if self.jitter_ms > 0:
                        delay += (rng.uniform() - 0.5) * self.jitter_ms
                    due = max(_now_ms() + max(delay, 0.0), last_due)
                    last_due = due
                    frames.put((due, data))
            frames.put(None)

        def writer():
            while True:
                item = frames.get()
                if item is None:
                    try:
                        dst.close()
                    except OSError:
                        pass
                    return
                due, data = item
                wait = (due - _now_ms()) / 1000.0
                if wait > 0:
                    time.sleep(wait)
                try:
                    dst.sendall(data)
                except OSError:
                    return

        threading.Thread(target=reader, daemon=True).start()
        threading.Thread(target=writer, daemon=True).start()
