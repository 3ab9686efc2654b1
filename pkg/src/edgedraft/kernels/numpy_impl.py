"""Pure-numpy kernel backend (reference semantics)."""

from __future__ import annotations

import numpy as np

NAME = "numpy"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 2.0 ** -53

_lane_cache: dict[int, np.ndarray] = {}


def _lanes(vocab_size: int) -> np.ndarray:
    lanes = _lane_cache.get(vocab_size)
    if lanes is None:
        lanes = np.arange(vocab_size, dtype=np.uint64) * _GOLDEN
        _lane_cache[vocab_size] = lanes
    return lanes


def _mix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def categorical_probs(
    fp: int, vocab_size: int, concentration: float, eos_token: int, eos_floor: float
) -> np.ndarray:
    """Deterministic distribution over `vocab_size` tokens for fingerprint `fp`.

    Lane i draws a uniform u from splitmix64(fp ^ i·golden) and weights it
    v^c for v = 1/(1-u) — a heavy tail, so a handful of lanes dominate and the
    peak sharpens as `concentration` grows.  v^c uses repeated multiplication
    for the integer part and linear interpolation toward the next power for
    the fractional part: only +,-,*,/ so both backends agree bit for bit.
    The eos lane carries exactly `eos_floor` mass, making expected sequence
    length 1/eos_floor (0 disables termination).  concentration is capped at
    16 to keep v^c finite.
    """
    h = _mix64(np.uint64(fp) ^ _lanes(vocab_size))
    u = (h >> np.uint64(11)).astype(np.float64) * _U53
    v = 1.0 / (1.0 - np.minimum(u, 1.0 - 1e-12))
    whole = min(int(concentration), 16)
    frac = min(concentration, 16.0) - whole
    w = np.ones_like(v)
    for _ in range(whole):
        w = w * v
    w = w * ((1.0 - frac) + frac * v)
    w[eos_token] = 0.0
    total = np.cumsum(w)[-1]  # sequential order, matches the numba loop
    probs = w * ((1.0 - eos_floor) / total)
    probs[eos_token] = eos_floor
    return probs


def sample_index(probs: np.ndarray, u: float) -> int:
    """First index where the running CDF exceeds `u` (ascending token ids)."""
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u, side="right"))
    return idx if idx < probs.shape[0] else probs.shape[0] - 1


def blend(a: np.ndarray, b: np.ndarray, weight: float) -> np.ndarray:
    """(1-weight)·a + weight·b, elementwise."""
    return (1.0 - weight) * a + weight * b
