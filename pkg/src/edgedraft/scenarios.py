"""Scenario assembly: calibration + overrides -> runnable SimRunConfig."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import calibration as cal
from .device import ConfidenceThreshold, FixedLength, ReliabilityPolicy, SessionLimits
from .models import ModelRegistry, SeededCategoricalModel
from .netsim import NetworkConditions
from .server import ServerConfig, ServiceTimeModel
from .simrun import DeviceSpec, RunTrace, SimRunConfig, run_simulation

DRAFT_MODEL_NAME = "edge-draft"


@dataclass(frozen=True)
class ScenarioSpec:
    """Declarative description of one simulated run."""

    mode: str = "sled"
    num_devices: int = 16
    hardware: str = "rpi5"
    quant_bits: int = 16

    # drafting policy
    policy: str = "fixed"  # fixed | confidence
    gamma: int = cal.DEFAULT_GAMMA
    c_th: float = 0.5
    gamma_max: int = 8
    draft_ahead_limit: int | None = None

    # reliability
    timeout_ms: float | None = cal.DEFAULT_EXPERIMENT_TIMEOUT_MS  # None = 4x RTT
    max_retries: int = 2
    fallback_threshold: int = 3
    fallback_enabled: bool = True

    # server
    batch_size: int = cal.DEFAULT_BATCH_SIZE
    batch_timeout_ms: float = cal.DEFAULT_BATCH_TIMEOUT_MS
    service_base_ms: float = cal.DEFAULT_SERVICE_BASE_MS
    service_per_sequence_ms: float = cal.DEFAULT_SERVICE_PER_SEQUENCE_MS
    service_per_token_ms: float = cal.DEFAULT_SERVICE_PER_TOKEN_MS

    # network
    rtt_ms: float = cal.DEFAULT_RTT_MS
    jitter_ms: float = cal.DEFAULT_JITTER_MS
    loss_rate: float = 0.0
    bandwidth_bytes_per_s: float | None = None

    # models
    vocab_size: int = cal.DEFAULT_VOCAB
    concentration: float = cal.DEFAULT_CONCENTRATION
    eos_floor: float = cal.DEFAULT_EOS_FLOOR
    eos_enabled: bool = True  # off: sessions end at max_tokens only
    target_seed: int = cal.DEFAULT_TARGET_SEED
    draft_seed: int = cal.DEFAULT_DRAFT_SEED
    drift: float = cal.DEFAULT_DRIFT

    # workload
    horizon_ms: float = 60_000.0
    max_tokens: int = 1_000_000
    prompt_len: int = 4
    root_seed: int = 17
    restart_sessions: bool = True
    open_loop_lambda: float | None = None
    device_rate_override: float | None = None  # tokens/s, bypasses hardware table

    def with_(self, **kw) -> "ScenarioSpec":
        return replace(self, **kw)


def build_models(spec: ScenarioSpec):
    eos = spec.vocab_size - 1
    target = SeededCategoricalModel(
        spec.vocab_size, seed=spec.target_seed, concentration=spec.concentration,
        eos_token=eos, eos_floor=spec.eos_floor,
    )
    draft = SeededCategoricalModel(
        spec.vocab_size, seed=spec.draft_seed, concentration=spec.concentration,
        eos_token=eos, eos_floor=spec.eos_floor, anchor=target, drift=spec.drift,
        profile=cal.device_model_profile(spec.hardware, spec.quant_bits),
    )
    registry = ModelRegistry(target)
    registry.register(DRAFT_MODEL_NAME, draft)
    return target, registry


def build_run_config(spec: ScenarioSpec, target=None, registry=None) -> SimRunConfig:
    if target is None or registry is None:
        target, registry = build_models(spec)
    if spec.policy == "fixed":
        drafting = FixedLength(spec.gamma)
    elif spec.policy == "confidence":
        drafting = ConfidenceThreshold(spec.c_th, spec.gamma_max)
    else:
        raise ValueError(f"unknown drafting policy {spec.policy!r}")
    timeout = spec.timeout_ms if spec.timeout_ms else 4.0 * spec.rtt_ms
    reliability = ReliabilityPolicy(
        timeout_ms=timeout,
        max_retries_per_request=spec.max_retries,
        fallback_failure_threshold=spec.fallback_threshold,
        fallback_enabled=spec.fallback_enabled,
    )
    rate = spec.device_rate_override or cal.device_rate(spec.hardware,
                                                        spec.quant_bits)
    device = DeviceSpec(
        draft_model_name=DRAFT_MODEL_NAME,
        tokens_per_second=rate,
        drafting=drafting,
        reliability=reliability,
        draft_ahead_limit=spec.draft_ahead_limit,
    )
    return SimRunConfig(
        mode=spec.mode,
        target=target,
        registry=registry,
        devices=[device] * spec.num_devices,
        network=NetworkConditions(
            rtt_mean_ms=spec.rtt_ms,
            rtt_jitter_ms=spec.jitter_ms,
            loss_rate=spec.loss_rate,
            bandwidth_bytes_per_s=spec.bandwidth_bytes_per_s,
        ),
        server=ServerConfig(
            batch_size=spec.batch_size,
            batch_timeout_ms=spec.batch_timeout_ms,
            service=ServiceTimeModel(
                spec.service_base_ms,
                spec.service_per_sequence_ms,
                spec.service_per_token_ms,
            ),
        ),
        limits=SessionLimits(
            max_tokens=spec.max_tokens,
            eos=spec.vocab_size - 1 if spec.eos_enabled else None,
        ),
        prompt_len=spec.prompt_len,
        horizon_ms=spec.horizon_ms,
        root_seed=spec.root_seed,
        restart_sessions=spec.restart_sessions,
        open_loop_lambda=spec.open_loop_lambda,
    )


def run_scenario(spec: ScenarioSpec) -> RunTrace:
    return run_simulation(build_run_config(spec))


# -- calibrated experiment presets -------------------------------------------


def loss_throughput_spec(loss_rate: float, horizon_ms: float = 240_000.0,
                         root_seed: int = 31) -> ScenarioSpec:
    """Single-device loss robustness run (prototype-style: one Pi-class device,
    high-fidelity draft, tight timeout)."""
    return ScenarioSpec(
        num_devices=1, drift=0.05, timeout_ms=500.0, draft_ahead_limit=16,
        loss_rate=loss_rate, horizon_ms=horizon_ms, root_seed=root_seed,
    )


def confidence_spec(root_seed: int = 51,
                    horizon_ms: float = 300_000.0) -> ScenarioSpec:
    """Fast zero-loss run producing ~100k examined draft tokens for the
    confidence/acceptance correlation."""
    return ScenarioSpec(
        num_devices=2, device_rate_override=200.0, horizon_ms=horizon_ms,
        service_base_ms=10.0, service_per_sequence_ms=0.5,
        service_per_token_ms=0.05, batch_size=2, batch_timeout_ms=10.0,
        rtt_ms=20.0, jitter_ms=4.0, timeout_ms=500.0, eos_enabled=False,
        root_seed=root_seed,
    )


QUALITY_VOCAB = 12


def quality_models():
    """Order-2 target vs. lumpy unigram draft: a large, exactly computable
    quality gap for the TV-distance proxy."""
    import numpy as np

    from .models import NgramModel

    V = QUALITY_VOCAB
    counts_t = {}
    for x in range(V):
        row = np.ones(V)
        row[(x * 7 + 1) % V] = 14.0
        row[(x * 5 + 4) % V] = 5.0
        counts_t[(x,)] = row
    target = NgramModel(order=2, vocab_size=V, counts=counts_t, delta=0.2)
    draft = NgramModel(
        order=1, vocab_size=V,
        counts={(): np.array([1.0 + (i % 3) * 2.0 for i in range(V)])},
        delta=0.5)
    registry = ModelRegistry(target)
    registry.register(DRAFT_MODEL_NAME, draft)
    return target, draft, registry


def quality_spec(loss_rate: float, horizon_ms: float = 300_000.0,
                 root_seed: int = 41) -> ScenarioSpec:
    """Companion quality-run settings for the loss sweep (fast devices, light
    service model; distribution correctness is what is measured)."""
    return ScenarioSpec(
        num_devices=2, timeout_ms=200.0, draft_ahead_limit=16,
        horizon_ms=horizon_ms, max_tokens=400, root_seed=root_seed,
        vocab_size=QUALITY_VOCAB, device_rate_override=150.0,
        service_base_ms=10.0, service_per_sequence_ms=0.5,
        service_per_token_ms=0.05, batch_size=2, batch_timeout_ms=10.0,
        rtt_ms=20.0, jitter_ms=4.0, loss_rate=loss_rate, eos_enabled=False,
    )
