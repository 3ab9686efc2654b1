"""Default desk-scale calibration.

Hardware profiles are named after the boards they imitate and carry the
purchase prices and power draws used by the cost model, but the token rates
are calibration fictions chosen so the simulated system reproduces the
qualitative behavior of the real deployment (throughput ratios, capacity
bands, loss robustness) at desk scale.  They are not measurements.
"""

from __future__ import annotations

from dataclasses import dataclass

from .models import ModelProfile


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    price_usd: float
    watts: float
    base_tokens_per_second: float  # drafting rate at 16-bit


# Rate/power scaling per quantization width (fictions, documented as such).
QUANT_RATE_SCALE = {16: 1.0, 8: 1.35, 4: 1.7}
QUANT_WATTS_SCALE = {16: 1.0, 8: 0.95, 4: 0.9}

HARDWARE: dict[str, HardwareProfile] = {
    "rpi4b": HardwareProfile("rpi4b", price_usd=55.0, watts=6.0,
                             base_tokens_per_second=4.2),
    "rpi5": HardwareProfile("rpi5", price_usd=80.0, watts=8.0,
                            base_tokens_per_second=7.0),
    "jetson-orin-nano": HardwareProfile("jetson-orin-nano", price_usd=249.0,
                                        watts=15.0, base_tokens_per_second=14.0),
    # The shared verification server (4 accelerators + host).
    "a100-server": HardwareProfile("a100-server", price_usd=40_000.0,
                                   watts=1_600.0, base_tokens_per_second=1.0),
}


def device_rate(hardware: str, quant_bits: int) -> float:
    profile = HARDWARE[hardware]
    return profile.base_tokens_per_second * QUANT_RATE_SCALE[quant_bits]


def device_watts(hardware: str, quant_bits: int) -> float:
    profile = HARDWARE[hardware]
    return profile.watts * QUANT_WATTS_SCALE[quant_bits]


def device_model_profile(hardware: str, quant_bits: int) -> ModelProfile:
    return ModelProfile(
        name=f"{hardware}-q{quant_bits}",
        tokens_per_second=device_rate(hardware, quant_bits),
        watts_avg=device_watts(hardware, quant_bits),
        quant_bits=quant_bits,
    )


# Mock-model defaults: one shared vocabulary, a peaked target, and a draft
# anchored to it.  drift controls the quality gap (acceptance rate ~ 1 - drift
# times the typical TV between independent peaked distributions).
DEFAULT_VOCAB = 64
DEFAULT_CONCENTRATION = 2.0
DEFAULT_EOS_FLOOR = 5e-4
DEFAULT_TARGET_SEED = 1000
DEFAULT_DRAFT_SEED = 2000
DEFAULT_DRIFT = 0.18

# Service-time calibration: a 70B-class verification pass on the shared
# server.  The affine form follows the queueing design; the base dominates so
# batching amortizes it, which is what produces the SLED-vs-centralized gap.
DEFAULT_SERVICE_BASE_MS = 140.0
DEFAULT_SERVICE_PER_SEQUENCE_MS = 1.5
DEFAULT_SERVICE_PER_TOKEN_MS = 0.2

DEFAULT_BATCH_SIZE = 4
DEFAULT_BATCH_TIMEOUT_MS = 50.0

DEFAULT_RTT_MS = 100.0
DEFAULT_JITTER_MS = 10.0

DEFAULT_GAMMA = 4
# Closed-loop experiment runs override the generic 4x-RTT timeout: queueing
# delay at saturation far exceeds the bare network round trip.
DEFAULT_EXPERIMENT_TIMEOUT_MS = 3000.0

DEFAULT_TARGET_RATE = 2.0  # tokens/s per device for capacity search
DEFAULT_WARMUP_FRACTION = 0.1
