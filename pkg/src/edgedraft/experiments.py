"""Evaluation harness: workload statistics, throughput/capacity metrics, the
dollars-per-kilotoken cost model, Pareto extraction, and the quality proxy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .calibration import DEFAULT_WARMUP_FRACTION
from .device import ACCEPTED, PROV_VERIFIED, REJECTED
from .errors import DomainError, EmptyTrace, Unsupportable
from .models import LanguageModel
from .rng import RngStream
from .simrun import MODE_CENTRALIZED, MODE_EDGE_ONLY, MODE_SLED, RunTrace


# --- workload -----------------------------------------------------------------


def poisson_arrivals(lam: float, horizon_s: float, rng: RngStream) -> list[float]:
    """Arrival timestamps with Exp(lam) inter-arrival gaps, truncated at the
    horizon."""
    if lam <= 0:
        raise DomainError("arrival rate must be > 0")
    if horizon_s < 0:
        raise DomainError("horizon must be >= 0")
    out: list[float] = []
    t = 0.0
    while True:
        t += -math.log(1.0 - rng.uniform()) / lam
        if t >= horizon_s:
            return out
        out.append(t)


def derive_lambda(tokens_per_second: float, mean_speculative_length: float) -> float:
    """Per-device verification-request rate: drafting rate over block length."""
    if tokens_per_second <= 0 or mean_speculative_length <= 0:
        raise DomainError("rates and lengths must be > 0")
    return tokens_per_second / mean_speculative_length


# --- throughput ------------------------------------------------------------------


def _counted_provenance(mode: str) -> set[str]:
    if mode in (MODE_SLED, MODE_CENTRALIZED):
        return {PROV_VERIFIED}
    return {PROV_VERIFIED, "fallback"}


def measure_wstgr(trace: RunTrace, warmup_fraction: float = DEFAULT_WARMUP_FRACTION,
                  count_fallback: bool = False) -> float:
    """Whole-system token generation rate: tokens generated and verified per
    second in the post-warmup window."""
    if trace.horizon_ms <= 0 or not trace.devices:
        raise EmptyTrace("no simulated time or no devices")
    start_ms = warmup_fraction * trace.horizon_ms
    window_s = (trace.horizon_ms - start_ms) / 1000.0
    allowed = _counted_provenance(trace.mode)
    if count_fallback:
        allowed = allowed | {"fallback"}
    total = 0
    any_emitted = False
    for device in trace.devices:
        for token in device.emitted():
            any_emitted = True
            if token.time_ms >= start_ms and token.provenance in allowed:
                total += 1
    if not any_emitted:
        if not trace.server_metrics:
            raise EmptyTrace("trace contains no committed tokens")
        # Open-loop traces have no device-side emission; count server commits.
        total = sum(
            row["tokens_verified"] + row["tokens_rejected"]
            for row in trace.server_metrics
            if row["time_ms"] >= start_ms
        )
    return total / window_s


def per_device_rates(trace: RunTrace,
                     warmup_fraction: float = DEFAULT_WARMUP_FRACTION,
                     count_fallback: bool = False) -> list[float]:
    if trace.horizon_ms <= 0 or not trace.devices:
        raise EmptyTrace("no simulated time or no devices")
    start_ms = warmup_fraction * trace.horizon_ms
    window_s = (trace.horizon_ms - start_ms) / 1000.0
    allowed = _counted_provenance(trace.mode)
    if count_fallback:
        allowed = allowed | {"fallback"}
    rates = []
    for device in trace.devices:
        count = sum(
            1 for token in device.emitted()
            if token.time_ms >= start_ms and token.provenance in allowed
        )
        rates.append(count / window_s)
    return rates


def edge_committed_rate(trace: RunTrace,
                        warmup_fraction: float = DEFAULT_WARMUP_FRACTION) -> float:
    """User-visible edge throughput: verified + fallback tokens per second."""
    return measure_wstgr(trace, warmup_fraction, count_fallback=True)


# --- capacity ---------------------------------------------------------------------


def capacity_search(
    rate_for_devices: Callable[[int], float],
    target_rate: float,
    n_max: int = 128,
    tolerance: float = 0.0,
) -> float:
    """Largest device count sustaining `target_rate` per device, with linear
    interpolation between the last passing and first failing integer counts.

    `rate_for_devices(n)` must return the mean per-device committed rate of a
    run with n devices; results are cached so repeated searches (e.g. for
    several target rates) reuse simulations.
    """
    if target_rate <= 0:
        raise DomainError("target rate must be > 0")
    cache: dict[int, float] = getattr(rate_for_devices, "_capacity_cache", None)
    if cache is None:
        cache = {}
        try:
            rate_for_devices._capacity_cache = cache  # type: ignore[attr-defined]
        except AttributeError:
            pass

    def rate(n: int) -> float:
        if n not in cache:
            cache[n] = rate_for_devices(n)
        return cache[n]

    def passes(n: int) -> bool:
        return rate(n) + tolerance >= target_rate

    if not passes(1):
        raise Unsupportable(
            f"a single device reaches {rate(1):.3f} < {target_rate} tokens/s"
        )
    lo = 1
    hi = 2
    while hi <= n_max and passes(hi):
        lo = hi
        hi *= 2
    if hi > n_max:
        hi = n_max + 1
        if passes(n_max):
            return float(n_max)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if passes(mid):
            lo = mid
        else:
            hi = mid
    r_lo, r_hi = rate(lo), rate(hi)
    if r_lo <= r_hi or r_lo <= target_rate:
        return float(lo)
    frac = (r_lo - target_rate) / (r_lo - r_hi)
    return lo + min(1.0, max(0.0, frac))


# --- cost model ----------------------------------------------------------------------


@dataclass(frozen=True)
class CostParams:
    rate_tokens_per_s: float
    device_price_usd: float
    avg_power_watts: float
    lifetime_years: float = 3.0
    hours_per_year: float = 8760.0
    utilization: float = 0.70
    electricity_usd_per_kwh: float = 0.083

    def __post_init__(self):
        for name in ("device_price_usd", "avg_power_watts"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        for name in ("lifetime_years", "hours_per_year", "utilization",
                     "electricity_usd_per_kwh"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be > 0")


def hourly_cost_usd(price_usd: float, watts: float,
                    lifetime_years: float = 3.0, hours_per_year: float = 8760.0,
                    utilization: float = 0.70,
                    electricity_usd_per_kwh: float = 0.083) -> float:
    """Amortized purchase price plus electricity, per utilized hour."""
    capex = price_usd / (lifetime_years * hours_per_year * utilization)
    opex = (watts / 1000.0) * electricity_usd_per_kwh
    return capex + opex


def cost_per_1k_tokens(params: CostParams) -> float:
    """Dollars per thousand generated tokens for one device at rate R."""
    if params.rate_tokens_per_s <= 0:
        raise DomainError("token rate must be > 0")
    hourly = hourly_cost_usd(
        params.device_price_usd, params.avg_power_watts, params.lifetime_years,
        params.hours_per_year, params.utilization, params.electricity_usd_per_kwh,
    )
    return 1000.0 / (3600.0 * params.rate_tokens_per_s) * hourly


def system_cost_per_1k_tokens(components: Iterable[tuple[float, float]],
                              rate_tokens_per_s: float) -> float:
    """Cost model over several amortized components (devices + server)."""
    if rate_tokens_per_s <= 0:
        raise DomainError("token rate must be > 0")
    hourly = sum(hourly_cost_usd(price, watts) for price, watts in components)
    return 1000.0 / (3600.0 * rate_tokens_per_s) * hourly


# --- Pareto -------------------------------------------------------------------------


@dataclass(frozen=True)
class ParetoPoint:
    cost_per_1k_usd: float
    wstgr: float
    label: str = ""


def _dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    return (
        a.cost_per_1k_usd <= b.cost_per_1k_usd
        and a.wstgr >= b.wstgr
        and (a.cost_per_1k_usd < b.cost_per_1k_usd or a.wstgr > b.wstgr)
    )


def brute_force_non_dominated(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    return [p for p in points if not any(_dominates(q, p) for q in points)]


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated subset, sorted by cost ascending; exact ties are kept.

    The result is cross-checked against the O(n^2) brute-force definition on
    every call.
    """
    front = brute_force_non_dominated(points)
    front.sort(key=lambda p: (p.cost_per_1k_usd, -p.wstgr, p.label))
    check = {(p.cost_per_1k_usd, p.wstgr, p.label)
             for p in brute_force_non_dominated(points)}
    got = {(p.cost_per_1k_usd, p.wstgr, p.label) for p in front}
    if got != check:  # pragma: no cover - defensive, definitionally equal
        raise AssertionError("pareto front failed brute-force verification")
    return front


# --- confidence/acceptance --------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceBin:
    lo: float
    hi: float
    count: int
    accepted: int
    low_sample: bool

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.count if self.count else float("nan")


def confidence_acceptance_histogram(
    trace_or_pairs, bins: int = 10, min_samples: int = 100
) -> list[ConfidenceBin]:
    """Acceptance frequency per confidence bin over examined draft tokens.

    Accepts either a RunTrace or an iterable of (confidence, accepted) pairs;
    only tokens with a server verdict count (discarded/released drafts do not).
    """
    if isinstance(trace_or_pairs, RunTrace):
        pairs = []
        for device in trace_or_pairs.devices:
            for conf, verdict in zip(device.draft_conf, device.draft_verdict):
                if verdict == ACCEPTED:
                    pairs.append((conf, True))
                elif verdict == REJECTED:
                    pairs.append((conf, False))
    else:
        pairs = list(trace_or_pairs)
    if not pairs:
        raise EmptyTrace("no verified draft tokens in trace")
    counts = [0] * bins
    accepted = [0] * bins
    for conf, ok in pairs:
        idx = min(int(conf * bins), bins - 1)
        counts[idx] += 1
        if ok:
            accepted[idx] += 1
    return [
        ConfidenceBin(i / bins, (i + 1) / bins, counts[i], accepted[i],
                      counts[i] < min_samples)
        for i in range(bins)
    ]


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise DomainError("need two equal-length samples of size >= 2")

    def ranks(vals):
        order = sorted(range(len(vals)), key=lambda i: vals[i])
        out = [0.0] * len(vals)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and vals[order[j + 1]] == vals[order[i]]:
                j += 1
            avg = (i + j) / 2.0
            for k in range(i, j + 1):
                out[order[k]] = avg
            i = j + 1
        return out

    rx, ry = ranks(xs), ranks(ys)
    mx = sum(rx) / len(rx)
    my = sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    if den == 0:
        raise DomainError("degenerate ranks")
    return num / den


# --- quality proxy -----------------------------------------------------------------


def _context_visits(sequences: Iterable[tuple[Sequence[int], Sequence[int]]],
                    model: LanguageModel):
    """Per-context next-token counts over committed output streams, where a
    context is the model's own state (bounded for n-gram models)."""
    visits: dict[object, dict[int, int]] = {}
    for prompt, tokens in sequences:
        state = model.state_for(prompt)
        for tok in tokens:
            bucket = visits.setdefault(state, {})
            bucket[tok] = bucket.get(tok, 0) + 1
            state = model.advance(state, tok)
    return visits


def empirical_tv_to_model(
    sequences: Iterable[tuple[Sequence[int], Sequence[int]]],
    model: LanguageModel,
) -> tuple[float, int]:
    """Visit-weighted total variation between the empirical committed-token
    conditionals and the model's conditionals.  Returns (tv, sample count)."""
    visits = _context_visits(sequences, model)
    total = sum(sum(b.values()) for b in visits.values())
    if total == 0:
        raise EmptyTrace("no committed tokens to evaluate")
    tv = 0.0
    for state, bucket in visits.items():
        n_ctx = sum(bucket.values())
        probs = model.probs_from_state(state)
        l1 = 0.0
        for tok in range(model.vocab_size):
            emp = bucket.get(tok, 0) / n_ctx
            l1 += abs(emp - float(probs[tok]))
        tv += (n_ctx / total) * 0.5 * l1
    return tv, total


def expected_tv_between(
    sequences: Iterable[tuple[Sequence[int], Sequence[int]]],
    model_a: LanguageModel,
    model_b: LanguageModel,
) -> float:
    """Visit-averaged exact TV(model_a, model_b) over the contexts the
    sequences traverse (the loss=1 reference level)."""
    total = 0
    acc = 0.0
    for prompt, tokens in sequences:
        state_a = model_a.state_for(prompt)
        state_b = model_b.state_for(prompt)
        for tok in tokens:
            pa = model_a.probs_from_state(state_a)
            pb = model_b.probs_from_state(state_b)
            acc += 0.5 * float(np.abs(pa - pb).sum())
            total += 1
            state_a = model_a.advance(state_a, tok)
            state_b = model_b.advance(state_b, tok)
    if total == 0:
        raise EmptyTrace("no committed tokens to evaluate")
    return acc / total


def committed_sequences(trace: RunTrace,
                        warmup_fraction: float = 0.0):
    """(prompt, emitted-token) pairs per session, for the quality proxy."""
    out = []
    start_ms = warmup_fraction * trace.horizon_ms
    for device in trace.devices:
        for session in device.sessions:
            tokens = [t.token for t in session.emitted if t.time_ms >= start_ms]
            if len(tokens) != len(session.emitted):
                continue  # skip sessions straddling the warmup boundary
            if tokens:
                out.append((session.prompt, tokens))
    return out
