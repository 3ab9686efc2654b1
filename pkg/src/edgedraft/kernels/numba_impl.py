"""Numba @njit kernel backend; semantics identical to numpy_impl bit for bit."""

from __future__ import annotations

import numpy as np
from numba import njit

NAME = "numba"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 2.0 ** -53
_SHIFT11 = np.uint64(11)
_SHIFT30 = np.uint64(30)
_SHIFT27 = np.uint64(27)
_SHIFT31 = np.uint64(31)


@njit(cache=True)
def _categorical_probs(fp, vocab_size, concentration, eos_token, eos_floor):
    whole = int(concentration)
    if whole > 16:
        whole = 16
    frac = concentration - whole
    if concentration > 16.0:
        frac = 0.0
    w = np.empty(vocab_size, dtype=np.float64)
    for i in range(vocab_size):
        z = (fp ^ (np.uint64(i) * _GOLDEN)) + _GOLDEN
        z = (z ^ (z >> _SHIFT30)) * _MIX1
        z = (z ^ (z >> _SHIFT27)) * _MIX2
        z = z ^ (z >> _SHIFT31)
        u = np.float64(z >> _SHIFT11) * _U53
        if u > 1.0 - 1e-12:
            u = 1.0 - 1e-12
        v = 1.0 / (1.0 - u)
        wi = 1.0
        for _ in range(whole):
            wi = wi * v
        w[i] = wi * ((1.0 - frac) + frac * v)
    w[eos_token] = 0.0
    total = 0.0
    for i in range(vocab_size):
        total += w[i]
    scale = (1.0 - eos_floor) / total
    for i in range(vocab_size):
        w[i] = w[i] * scale
    w[eos_token] = eos_floor
    return w


def categorical_probs(
    fp: int, vocab_size: int, concentration: float, eos_token: int, eos_floor: float
) -> np.ndarray:
    return _categorical_probs(
        np.uint64(fp), vocab_size, concentration, eos_token, eos_floor
    )


@njit(cache=True)
def _sample_index(probs, u):
    acc = 0.0
    for i in range(probs.shape[0]):
        acc += probs[i]
        if u < acc:
            return i
    return probs.shape[0] - 1


def sample_index(probs: np.ndarray, u: float) -> int:
    return int(_sample_index(probs, u))


@njit(cache=True)
def _blend(a, b, weight):
    out = np.empty(a.shape[0], dtype=np.float64)
    for i in range(a.shape[0]):
        out[i] = (1.0 - weight) * a[i] + weight * b[i]
    return out


def blend(a: np.ndarray, b: np.ndarray, weight: float) -> np.ndarray:
    return _blend(a, b, weight)
