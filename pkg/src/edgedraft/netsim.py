"""Deterministic discrete-event clock and lossy simulated links.

The full system trace is a pure function of (config, seeds): events at equal
timestamps fire in insertion order, every random draw comes from a named
RngStream, and links preserve per-link FIFO order by construction (a message
never overtakes an earlier one even when jitter draws say otherwise).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable

from .errors import DomainError, LinkClosed
from .rng import RngStream


@dataclass(frozen=True)
class NetworkConditions:
    rtt_mean_ms: float = 100.0
    rtt_jitter_ms: float = 0.0
    loss_rate: float = 0.0  # independent per message, each direction
    bandwidth_bytes_per_s: float | None = None  # None = unlimited

    def __post_init__(self):
        if self.rtt_mean_ms < 0 or self.rtt_jitter_ms < 0:
            raise DomainError("rtt parameters must be >= 0")
        if not (0.0 <= self.loss_rate <= 1.0):
            raise DomainError("loss_rate must be in [0, 1]")
        if self.bandwidth_bytes_per_s is not None and self.bandwidth_bytes_per_s <= 0:
            raise DomainError("bandwidth must be > 0 or unlimited")


class SimClock:
    """Event queue ordered by (time, insertion sequence)."""

    def __init__(self):
        self.now_ms = 0.0
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0
        self.horizon_hit = False

    def at(self, time_ms: float, fn: Callable[[], None]):
        if time_ms < self.now_ms:
            time_ms = self.now_ms  # never travel backwards
        self._seq += 1
        heapq.heappush(self._heap, (time_ms, self._seq, fn))

    def after(self, delay_ms: float, fn: Callable[[], None]):
        self.at(self.now_ms + delay_ms, fn)

    def run_until_idle(self, horizon_ms: float | None = None) -> float:
        """Drain events in deterministic order; stops at the horizon if given
        (reported via .horizon_hit, not fatal)."""
        while self._heap:
            time_ms, _, fn = heapq.heappop(self._heap)
            if horizon_ms is not None and time_ms > horizon_ms:
                self.horizon_hit = True
                self.now_ms = horizon_ms
                self._heap.clear()
                break
            self.now_ms = time_ms
            fn()
        return self.now_ms


class SimLink:
    """One direction of a point-to-point link with Bernoulli loss.

    Per message: one loss draw; if delivered and jitter is configured, one
    jitter draw.  Delivery time = serialization (when bandwidth is finite)
    + one-way latency, floored to keep FIFO order.
    """

    def __init__(
        self,
        clock: SimClock,
        conditions: NetworkConditions,
        rng: RngStream,
        deliver: Callable[[object], None],
        size_of: Callable[[object], int] | None = None,
    ):
        self.clock = clock
        self.conditions = conditions
        self.rng = rng
        self.deliver = deliver
        self.size_of = size_of
        self.closed = False
        self._busy_until_ms = 0.0
        self._last_delivery_ms = 0.0
        self.sent = 0
        self.dropped = 0
        self.delivered = 0

    def close(self):
        self.closed = True

    def send(self, msg: object):
        if self.closed:
            raise LinkClosed("link is closed")
        self.sent += 1
        cond = self.conditions
        if cond.loss_rate > 0.0 and self.rng.uniform() < cond.loss_rate:
            self.dropped += 1
            return
        latency = cond.rtt_mean_ms / 2.0
        if cond.rtt_jitter_ms > 0.0:
            latency += (self.rng.uniform() - 0.5) * cond.rtt_jitter_ms
        if latency < 0.0:
            latency = 0.0
        now = self.clock.now_ms
        if cond.bandwidth_bytes_per_s is not None:
            size = self.size_of(msg) if self.size_of else 0
            tx_start = max(now, self._busy_until_ms)
            tx_end = tx_start + 1000.0 * size / cond.bandwidth_bytes_per_s
            self._busy_until_ms = tx_end
            arrive = tx_end + latency
        else:
            arrive = now + latency
        if arrive < self._last_delivery_ms:
            arrive = self._last_delivery_ms
        self._last_delivery_ms = arrive
        self.clock.at(arrive, lambda m=msg: self._deliver(m))

    def _deliver(self, msg: object):
        self.delivered += 1
        self.deliver(msg)
