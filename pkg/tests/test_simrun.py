import statistics

import pytest

from edgedraft.device import PROV_FALLBACK, PROV_VERIFIED
from edgedraft.experiments import measure_wstgr, per_device_rates
from edgedraft.scenarios import ScenarioSpec, run_scenario

FAST = ScenarioSpec().with_(horizon_ms=20_000.0, root_seed=7)


def _tokens(trace):
    return [
        [(t.token, t.provenance) for t in device.emitted()]
        for device in trace.devices
    ]


def test_determinism_identical_seeds_identical_transcripts():
    a = run_scenario(FAST.with_(num_devices=3))
    b = run_scenario(FAST.with_(num_devices=3))
    assert _tokens(a) == _tokens(b)
    assert a.server_metrics == b.server_metrics


def test_different_seed_differs():
    a = run_scenario(FAST.with_(num_devices=2))
    b = run_scenario(FAST.with_(num_devices=2, root_seed=8))
    assert _tokens(a) != _tokens(b)


def test_zero_loss_all_tokens_verified():
    trace = run_scenario(FAST.with_(num_devices=2))
    for device in trace.devices:
        provs = {t.provenance for t in device.emitted()}
        assert provs <= {PROV_VERIFIED}
        assert device.stats["fallback_releases"] == 0


def test_context_consistency_under_loss():
    # Device emission must remain a prefix-consistent view of the server's
    # committed context, retries and fallback re-inits included.
    trace = run_scenario(FAST.with_(
        num_devices=2, loss_rate=0.15, timeout_ms=300.0, horizon_ms=40_000.0))
    checked = 0
    for device in trace.devices:
        for session in device.sessions:
            emitted = [t.token for t in session.emitted
                       if t.provenance == PROV_VERIFIED]
            if not emitted:
                continue
            # Match against the server session carrying this prompt.
            for srv in trace.server_sessions.values():
                committed = srv["committed"]
                if committed[: len(session.prompt)] == list(session.prompt):
                    body = committed[len(session.prompt):]
                    if body[: len(emitted)] == emitted:
                        checked += 1
                        break
    assert checked > 0


def test_conservation_per_session_gamma_one():
    # gamma=1 commits exactly one token per response, so a gracefully finished
    # session has server accepted+corrective == device verified count.
    trace = run_scenario(FAST.with_(
        num_devices=1, gamma=1, max_tokens=30, eos_enabled=False,
        restart_sessions=False, horizon_ms=120_000.0))
    device = trace.devices[0]
    assert len(device.sessions) == 1
    session = device.sessions[0]
    verified = sum(1 for t in session.emitted if t.provenance == PROV_VERIFIED)
    assert verified == 30
    srv = next(iter(trace.server_sessions.values()))
    assert srv["accepted"] + srv["corrective"] == verified


def test_wstgr_additivity_below_saturation():
    single = measure_wstgr(run_scenario(FAST.with_(num_devices=1,
                                                   horizon_ms=60_000.0)))
    four = measure_wstgr(run_scenario(FAST.with_(num_devices=4,
                                                 horizon_ms=60_000.0)))
    assert abs(four - 4 * single) / (4 * single) < 0.05


def test_fallback_tokens_follow_threshold_failures():
    trace = run_scenario(FAST.with_(
        num_devices=1, loss_rate=1.0, timeout_ms=300.0, fallback_threshold=3,
        horizon_ms=30_000.0))
    device = trace.devices[0]
    emitted = list(device.emitted())
    assert emitted, "total loss must still produce fallback output"
    assert all(t.provenance == PROV_FALLBACK for t in emitted)
    assert device.stats["timeouts"] >= 3
    assert device.stats["responses"] == 0
    # Fallback-only output approaches the standalone drafting rate.
    rate = per_device_rates(trace, count_fallback=True)[0]
    assert abs(rate - 7.0) / 7.0 < 0.05


def test_confidence_policy_blocks_obey_threshold():
    trace = run_scenario(FAST.with_(
        num_devices=2, policy="confidence", c_th=0.6, gamma_max=6,
        horizon_ms=30_000.0))
    eos = 63
    checked = 0
    for device in trace.devices:
        for entry in device.request_log:
            if entry["probe"] or entry["last_token"] == eos:
                continue
            assert entry["last_confidence"] < 0.6 or entry["length"] >= 6
            assert entry["length"] <= 6
            checked += 1
    assert checked > 10


def test_open_loop_poisson_workload_runs():
    trace = run_scenario(FAST.with_(
        num_devices=4, open_loop_lambda=1.5, horizon_ms=30_000.0))
    assert trace.server_metrics, "server must process open-loop batches"
    w = measure_wstgr(trace)
    assert w > 0.0


def test_centralized_tokens_follow_target_distribution():
    # Server-generated tokens must be target samples: check the unigram of a
    # context-free target... the seeded model is context-dependent, so just
    # check determinism + counting here.
    a = run_scenario(FAST.with_(mode="centralized", num_devices=2))
    b = run_scenario(FAST.with_(mode="centralized", num_devices=2))
    assert _tokens(a) == _tokens(b)
    total = sum(1 for d in a.devices for _ in d.emitted())
    generated = sum(s["generated"] for s in a.server_sessions.values())
    assert generated >= total > 0
