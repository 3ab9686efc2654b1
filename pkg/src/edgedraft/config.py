"""Declarative TOML configuration with strict schema checking.

Sections: [seeds], [models], [server], [network], [workload], [experiment],
and an optional [[devices]] list of device groups.  Unknown keys anywhere are
a load error (no silent typos); a fully defaulted (empty) config runs end to
end.  CLI flag overrides win over file values.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import calibration as cal
from .errors import ConfigError
from .scenarios import ScenarioSpec

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

_SCHEMA = {
    "seeds": {"root"},
    "models": {
        "vocab_size", "concentration", "eos_floor", "eos_enabled",
        "target_seed", "draft_seed", "drift",
    },
    "server": {
        "batch_size", "batch_timeout_ms", "service_base_ms",
        "service_per_sequence_ms", "service_per_token_ms",
    },
    "network": {
        "rtt_mean_ms", "rtt_jitter_ms", "loss_rate", "bandwidth_bytes_per_s",
    },
    "workload": {
        "arrival", "lambda_per_device", "horizon_ms", "max_tokens",
        "prompt_len", "restart_sessions", "policy", "gamma", "c_th",
        "gamma_max", "timeout_ms", "max_retries", "fallback_threshold",
        "fallback_enabled", "draft_ahead_limit",
    },
    "experiment": {
        "mode", "num_devices", "warmup_fraction", "target_rate", "out_dir",
    },
    "devices": {
        "count", "hardware", "quant_bits", "tokens_per_second", "policy",
        "gamma", "c_th", "gamma_max", "timeout_ms", "max_retries",
        "fallback_threshold", "fallback_enabled", "draft_ahead_limit",
    },
}

DEFAULTS = {
    "seeds": {"root": 17},
    "models": {
        "vocab_size": cal.DEFAULT_VOCAB,
        "concentration": cal.DEFAULT_CONCENTRATION,
        "eos_floor": cal.DEFAULT_EOS_FLOOR,
        "eos_enabled": True,
        "target_seed": cal.DEFAULT_TARGET_SEED,
        "draft_seed": cal.DEFAULT_DRAFT_SEED,
        "drift": cal.DEFAULT_DRIFT,
    },
    "server": {
        "batch_size": cal.DEFAULT_BATCH_SIZE,
        "batch_timeout_ms": cal.DEFAULT_BATCH_TIMEOUT_MS,
        "service_base_ms": cal.DEFAULT_SERVICE_BASE_MS,
        "service_per_sequence_ms": cal.DEFAULT_SERVICE_PER_SEQUENCE_MS,
        "service_per_token_ms": cal.DEFAULT_SERVICE_PER_TOKEN_MS,
    },
    "network": {
        "rtt_mean_ms": cal.DEFAULT_RTT_MS,
        "rtt_jitter_ms": cal.DEFAULT_JITTER_MS,
        "loss_rate": 0.0,
        "bandwidth_bytes_per_s": 0.0,  # 0 = unlimited
    },
    "workload": {
        "arrival": "closed",
        "lambda_per_device": 0.0,  # 0 = derive from rate / block length
        "horizon_ms": 60_000.0,
        "max_tokens": 1_000_000,
        "prompt_len": 4,
        "restart_sessions": True,
        "policy": "fixed",
        "gamma": cal.DEFAULT_GAMMA,
        "c_th": 0.5,
        "gamma_max": 8,
        "timeout_ms": cal.DEFAULT_EXPERIMENT_TIMEOUT_MS,  # 0 = 4x RTT
        "max_retries": 2,
        "fallback_threshold": 3,
        "fallback_enabled": True,
        "draft_ahead_limit": 0,  # 0 = 2x nominal block length
    },
    "experiment": {
        "mode": "sled",
        "num_devices": 16,
        "warmup_fraction": cal.DEFAULT_WARMUP_FRACTION,
        "target_rate": cal.DEFAULT_TARGET_RATE,
        "out_dir": "out",
    },
}


@dataclass
class Config:
    seeds: dict
    models: dict
    server: dict
    network: dict
    workload: dict
    experiment: dict
    devices: list[dict] = field(default_factory=list)


def _check_keys(section: str, table: dict, allowed: set[str]):
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key '{section}.{key}'")


def _merged(section: str, table: dict) -> dict:
    _check_keys(section, table, _SCHEMA[section])
    merged = dict(DEFAULTS[section])
    merged.update(table)
    return merged


def load_config(path: str | Path | None) -> Config:
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    for section in raw:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section '[{section}]'")
    devices_raw = raw.get("devices", [])
    if not isinstance(devices_raw, list):
        raise ConfigError("[devices] must be an array of tables ([[devices]])")
    devices = []
    for entry in devices_raw:
        _check_keys("devices", entry, _SCHEMA["devices"])
        devices.append(dict(entry))
    return Config(
        seeds=_merged("seeds", raw.get("seeds", {})),
        models=_merged("models", raw.get("models", {})),
        server=_merged("server", raw.get("server", {})),
        network=_merged("network", raw.get("network", {})),
        workload=_merged("workload", raw.get("workload", {})),
        experiment=_merged("experiment", raw.get("experiment", {})),
        devices=devices,
    )


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply --set section.key=value pairs (flags win over the file)."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must be section.key=value: {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SCHEMA or section == "devices":
            raise ConfigError(f"cannot override section '{section}'")
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown key '{section}.{key}'")
        table = getattr(cfg, section)
        table[key] = _parse_literal(value)
    return cfg


def _parse_literal(text: str):
    low = text.strip()
    if low.lower() in ("true", "false"):
        return low.lower() == "true"
    try:
        return int(low)
    except ValueError:
        pass
    try:
        return float(low)
    except ValueError:
        pass
    return low.strip("\"'")


def config_to_spec(cfg: Config, mode: str | None = None,
                   num_devices: int | None = None) -> ScenarioSpec:
    """Collapse a homogeneous config into a ScenarioSpec.

    Heterogeneous [[devices]] groups cannot be expressed as one spec; sweeps
    and the simulate command require at most one group.
    """
    if len(cfg.devices) > 1:
        raise ConfigError("sweeps/simulate need a homogeneous device fleet "
                          "(at most one [[devices]] group)")
    group = dict(cfg.devices[0]) if cfg.devices else {}
    count = group.pop("count", cfg.experiment["num_devices"])
    work = dict(cfg.workload)
    work.update(group)
    hardware = work.pop("hardware", "rpi5")
    quant_bits = int(work.pop("quant_bits", 16))
    rate_override = float(work.pop("tokens_per_second", 0.0)) or None
    bandwidth = float(cfg.network["bandwidth_bytes_per_s"]) or None
    if work["arrival"] not in ("closed", "open"):
        raise ConfigError("workload.arrival must be 'closed' or 'open'")
    open_lambda = None
    if work["arrival"] == "open":
        open_lambda = float(work["lambda_per_device"])
        if open_lambda <= 0:
            from .experiments import derive_lambda

            rate = rate_override or cal.device_rate(hardware, quant_bits)
            open_lambda = derive_lambda(rate, float(work["gamma"]))
    return ScenarioSpec(
        mode=mode or cfg.experiment["mode"],
        num_devices=int(num_devices if num_devices is not None else count),
        hardware=hardware,
        quant_bits=quant_bits,
        policy=work["policy"],
        gamma=int(work["gamma"]),
        c_th=float(work["c_th"]),
        gamma_max=int(work["gamma_max"]),
        draft_ahead_limit=int(work["draft_ahead_limit"]) or None,
        timeout_ms=float(work["timeout_ms"]) or None,
        max_retries=int(work["max_retries"]),
        fallback_threshold=int(work["fallback_threshold"]),
        fallback_enabled=bool(work["fallback_enabled"]),
        batch_size=int(cfg.server["batch_size"]),
        batch_timeout_ms=float(cfg.server["batch_timeout_ms"]),
        service_base_ms=float(cfg.server["service_base_ms"]),
        service_per_sequence_ms=float(cfg.server["service_per_sequence_ms"]),
        service_per_token_ms=float(cfg.server["service_per_token_ms"]),
        rtt_ms=float(cfg.network["rtt_mean_ms"]),
        jitter_ms=float(cfg.network["rtt_jitter_ms"]),
        loss_rate=float(cfg.network["loss_rate"]),
        bandwidth_bytes_per_s=bandwidth,
        vocab_size=int(cfg.models["vocab_size"]),
        concentration=float(cfg.models["concentration"]),
        eos_floor=float(cfg.models["eos_floor"]),
        eos_enabled=bool(cfg.models["eos_enabled"]),
        target_seed=int(cfg.models["target_seed"]),
        draft_seed=int(cfg.models["draft_seed"]),
        drift=float(cfg.models["drift"]),
        horizon_ms=float(work["horizon_ms"]),
        max_tokens=int(work["max_tokens"]),
        prompt_len=int(work["prompt_len"]),
        root_seed=int(cfg.seeds["root"]),
        restart_sessions=bool(work["restart_sessions"]),
        open_loop_lambda=open_lambda,
        device_rate_override=rate_override,
    )
