"""Deterministic counter-based random streams.

Every source of randomness in the system is an :class:`RngStream` derived from
one root seed plus a string/integer label path, e.g.
``RngStream.derive(root, "verify", session_id)``.  Streams are counter-based
(splitmix64 of ``state ^ mix(counter)``), so draws can be taken sequentially or
keyed by an absolute position; keyed draws make token choices independent of
event timing.  The same construction is used inside the numba/numpy kernels,
bit for bit.
"""

from __future__ import annotations

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
# Scale for the 53-bit mantissa; draws lie in [0, 1).
_U53 = 2.0 ** -53


def splitmix64(x: int) -> int:
    """One splitmix64 finalization step (pure integer, wraps at 64 bits)."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _absorb(state: int, value: int) -> int:
    return splitmix64(state ^ (value & MASK64))


def hash_labels(seed: int, *labels: int | str) -> int:
    """Collapse a label path into a 64-bit stream seed."""
    state = splitmix64(seed & MASK64)
    for label in labels:
        if isinstance(label, str):
            state = _absorb(state, len(label))
            for b in label.encode("utf-8"):
                state = _absorb(state, b)
        else:
            state = _absorb(state, label)
    return state


class RngStream:
    """A named, reproducible stream of uniform draws.

    Identical (seed, label path) always yields the identical sequence,
    regardless of platform or backend.
    """

    __slots__ = ("state", "counter")

    def __init__(self, state: int):
        self.state = state & MASK64
        self.counter = 0

    @classmethod
    def derive(cls, seed: int, *labels: int | str) -> "RngStream":
        return cls(hash_labels(seed, *labels))

    def child(self, *labels: int | str) -> "RngStream":
        return RngStream(hash_labels(self.state, *labels))

    def u64_at(self, index: int) -> int:
        return splitmix64(self.state ^ (index & MASK64))

    def uniform_at(self, index: int) -> float:
        """Keyed draw in [0, 1): independent of how many draws came before."""
        return (self.u64_at(index) >> 11) * _U53

    def next_u64(self) -> int:
        value = self.u64_at(self.counter)
        self.counter += 1
        return value

    def uniform(self) -> float:
        value = self.uniform_at(self.counter)
        self.counter += 1
        return value

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"RngStream(state={self.state:#018x}, counter={self.counter})"
