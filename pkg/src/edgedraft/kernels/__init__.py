"""Hot numeric kernels with selectable backends.

The inner loops of the whole system are (a) building a categorical
distribution for a context fingerprint and (b) inverse-CDF sampling from a
distribution.  Both are implemented twice — a numba ``@njit`` version and a
pure-numpy version — and the two are bit-identical by construction: integer
splitmix64 hashing, rational shaping using only +,-,*,/ (all correctly
rounded), and strictly sequential summation (``np.cumsum`` on the numpy side,
an accumulation loop on the numba side).

Backend selection: set ``EDGEDRAFT_KERNELS=numpy`` or ``=numba`` in the
environment before import; unset picks numba when importable, else numpy.
``benchmarks/bench_kernels.py`` times the two side by side.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import numpy_impl


def _load_numba_impl() -> ModuleType:
    from . import numba_impl

    return numba_impl


def get_backend(name: str | None = None) -> ModuleType:
    """Return the kernel module for `name` ('numba', 'numpy', or None=auto)."""
    if name is None:
        name = os.environ.get("EDGEDRAFT_KERNELS", "").strip().lower() or "auto"
    if name == "numpy":
        return numpy_impl
    if name == "numba":
        return _load_numba_impl()
    if name == "auto":
        try:
            return _load_numba_impl()
        except ImportError:
            return numpy_impl
    raise ValueError(f"unknown kernel backend {name!r} (use 'numba' or 'numpy')")


_active = get_backend()

BACKEND = _active.NAME
categorical_probs = _active.categorical_probs
sample_index = _active.sample_index
blend = _active.blend


def select_backend(name: str | None) -> str:
    """Rebind the module-level kernels; returns the active backend name."""
    global _active, BACKEND, categorical_probs, sample_index, blend
    _active = get_backend(name)
    BACKEND = _active.NAME
    categorical_probs = _active.categorical_probs
    sample_index = _active.sample_index
    blend = _active.blend
    return BACKEND
