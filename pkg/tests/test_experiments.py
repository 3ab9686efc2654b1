import math

import pytest

from edgedraft.errors import DomainError, EmptyTrace, Unsupportable
from edgedraft.experiments import (
    CostParams,
    ParetoPoint,
    brute_force_non_dominated,
    capacity_search,
    confidence_acceptance_histogram,
    cost_per_1k_tokens,
    derive_lambda,
    measure_wstgr,
    pareto_front,
    poisson_arrivals,
    spearman_rho,
    system_cost_per_1k_tokens,
)
from edgedraft.rng import RngStream
from edgedraft.simrun import RunTrace


def test_poisson_mean_interarrival():
    rng = RngStream.derive(4, "poisson")
    arrivals = poisson_arrivals(2.0, 50_000.0, rng)
    gaps = [b - a for a, b in zip([0.0] + arrivals, arrivals)]
    mean = sum(gaps) / len(gaps)
    assert abs(mean - 0.5) / 0.5 < 0.01


def test_poisson_count_band():
    rng = RngStream.derive(9, "poisson")
    horizon = 20_000.0
    n = len(poisson_arrivals(2.0, horizon, rng))
    sigma = math.sqrt(2.0 * horizon)
    assert abs(n - 2.0 * horizon) <= 3 * sigma


def test_poisson_degenerate_and_errors():
    assert poisson_arrivals(2.0, 0.0, RngStream.derive(0, "p")) == []
    with pytest.raises(DomainError):
        poisson_arrivals(0.0, 10.0, RngStream.derive(0, "p"))


def test_derive_lambda():
    assert derive_lambda(7.0, 4.0) == pytest.approx(1.75)
    with pytest.raises(DomainError):
        derive_lambda(0.0, 4.0)


def test_measure_wstgr_definitional():
    # 1 device committing exactly 5 verified tokens/s for 100 s.
    from edgedraft.device import EmittedToken
    from edgedraft.simrun import DeviceTrace, SessionTrace

    emitted = [EmittedToken(i, 1, "verified", (i + 1) * 200.0) for i in range(500)]
    trace = RunTrace(
        mode="sled", horizon_ms=100_000.0,
        devices=[DeviceTrace(0, sessions=[SessionTrace(0, (0,), emitted)])],
        server_metrics=[], server_stats={}, server_sessions={}, final_time_ms=1e5)
    # window [10s, 100s]; tokens land at 200ms, 400ms, ... so 451 fall inside
    assert measure_wstgr(trace, warmup_fraction=0.1) == pytest.approx(451 / 90.0)


def test_measure_wstgr_empty_trace():
    trace = RunTrace("sled", 1000.0, [], [], {}, {}, 0.0)
    with pytest.raises(EmptyTrace):
        measure_wstgr(trace)


def test_capacity_search_analytic():
    # Server verifies exactly 24 tokens/s shared evenly; device ceiling 5.
    def rate(n):
        return min(5.0, 24.0 / n)

    cap = capacity_search(rate, target_rate=3.0, n_max=64)
    assert cap == pytest.approx(8.0, abs=0.15)
    with pytest.raises(Unsupportable):
        capacity_search(rate, target_rate=6.0, n_max=64)


def test_capacity_monotone_in_target_rate():
    def rate(n):
        return min(5.0, 24.0 / n)

    caps = [capacity_search(rate, t, n_max=64) for t in (2.0, 3.0, 4.0, 5.0)]
    assert all(b <= a + 1e-9 for a, b in zip(caps, caps[1:]))


def test_cost_model_hand_values():
    assert cost_per_1k_tokens(CostParams(5.24, 80.0, 8.0)) == pytest.approx(
        2.6573e-4, abs=1e-8)
    assert cost_per_1k_tokens(CostParams(1.0, 80.0, 8.0)) == pytest.approx(
        1.39244e-3, abs=1e-8)


def test_cost_model_monotonicity_and_errors():
    base = cost_per_1k_tokens(CostParams(5.0, 80.0, 8.0))
    assert cost_per_1k_tokens(CostParams(10.0, 80.0, 8.0)) < base
    assert cost_per_1k_tokens(CostParams(5.0, 120.0, 8.0)) > base
    assert cost_per_1k_tokens(CostParams(5.0, 80.0, 16.0)) > base
    with pytest.raises(DomainError):
        cost_per_1k_tokens(CostParams(0.0, 80.0, 8.0))


def test_system_cost_accumulates_components():
    single = system_cost_per_1k_tokens([(80.0, 8.0)], 5.24)
    assert single == pytest.approx(2.6573e-4, abs=1e-8)
    double = system_cost_per_1k_tokens([(80.0, 8.0), (80.0, 8.0)], 5.24)
    assert double == pytest.approx(2 * single, rel=1e-12)


def test_pareto_front_examples():
    pts = [ParetoPoint(1.0, 10.0, "a"), ParetoPoint(2.0, 5.0, "b"),
           ParetoPoint(3.0, 20.0, "c")]
    front = pareto_front(pts)
    assert [p.label for p in front] == ["a", "c"]
    assert pareto_front([pts[0]]) == [pts[0]]
    same = [ParetoPoint(1.0, 1.0, "x"), ParetoPoint(1.0, 1.0, "y")]
    assert len(pareto_front(same)) == 2  # exact ties kept


def test_pareto_front_matches_brute_force_random():
    rng = RngStream.derive(12, "pareto")
    pts = [ParetoPoint(round(rng.uniform(), 2), round(rng.uniform(), 2), str(i))
           for i in range(200)]
    front = set(id(p) for p in pareto_front(pts))
    brute = set(id(p) for p in brute_force_non_dominated(pts))
    assert front == brute


def test_histogram_trivial_and_empty():
    pairs = [(0.05, True), (0.05, False), (0.95, True)]
    bins = confidence_acceptance_histogram(pairs, min_samples=1)
    assert bins[0].count == 2 and bins[0].acceptance_rate == 0.5
    assert bins[9].count == 1 and bins[9].acceptance_rate == 1.0
    assert not bins[0].low_sample
    with pytest.raises(EmptyTrace):
        confidence_acceptance_histogram([])


def test_histogram_low_sample_flag():
    pairs = [(0.5, True)] * 99
    bins = confidence_acceptance_histogram(pairs, min_samples=100)
    assert bins[5].low_sample


def test_spearman_perfect_and_inverted():
    assert spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
