"""Deterministic experiment reports: JSON summaries and figure-matching CSVs.

Every artifact is a pure function of (config, seeds): no wall-clock stamps,
sorted JSON keys, fixed CSV field orders, '\n' line endings — so repeated runs
produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calibration as cal
from .device import ACCEPTED, REJECTED
from .errors import Unsupportable
from .experiments import (
    capacity_search,
    confidence_acceptance_histogram,
    committed_sequences,
    edge_committed_rate,
    empirical_tv_to_model,
    expected_tv_between,
    measure_wstgr,
    pareto_front,
    ParetoPoint,
    per_device_rates,
    spearman_rho,
    system_cost_per_1k_tokens,
)
from .scenarios import (
    ScenarioSpec,
    build_run_config,
    loss_throughput_spec,
    quality_models,
    quality_spec,
    run_scenario,
)
from .server import METRICS_FIELDS
from .simrun import MODE_CENTRALIZED, MODE_EDGE_ONLY, MODE_SLED, run_simulation


def write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_csv(path: Path, fieldnames, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


@dataclass
class ExperimentReport:
    mode: str
    num_devices: int
    wstgr: float
    per_device_rate: float
    acceptance_rate: float | None = None
    capacity: float | None = None
    cost_per_1k_usd: float | None = None
    confidence_bins: list[dict] = field(default_factory=list)
    loss_series: list[dict] = field(default_factory=list)
    csv_paths: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "num_devices": self.num_devices,
            "wstgr_tokens_per_s": self.wstgr,
            "per_device_rate_tokens_per_s": self.per_device_rate,
            "acceptance_rate": self.acceptance_rate,
            "capacity_devices": self.capacity,
            "cost_per_1k_usd": self.cost_per_1k_usd,
            "confidence_bins": self.confidence_bins,
            "loss_series": self.loss_series,
            "csv_paths": self.csv_paths,
        }


def trace_acceptance_rate(trace) -> float | None:
    accepted = rejected = 0
    for device in trace.devices:
        for verdict in device.draft_verdict:
            if verdict == ACCEPTED:
                accepted += 1
            elif verdict == REJECTED:
                rejected += 1
    examined = accepted + rejected
    return accepted / examined if examined else None


def scenario_cost_per_1k(spec: ScenarioSpec, wstgr: float) -> float | None:
    if wstgr <= 0:
        return None
    device_hw = cal.HARDWARE[spec.hardware]
    watts = cal.device_watts(spec.hardware, spec.quant_bits)
    components = [(device_hw.price_usd, watts)] * spec.num_devices
    if spec.mode in (MODE_SLED, MODE_CENTRALIZED):
        server = cal.HARDWARE["a100-server"]
        components.append((server.price_usd, server.watts))
    return system_cost_per_1k_tokens(components, wstgr)


def simulate_report(spec: ScenarioSpec, out_dir: Path) -> ExperimentReport:
    """Run one scenario and write report.json + server_metrics.csv."""
    trace = run_scenario(spec)
    wstgr = measure_wstgr(trace)
    rates = per_device_rates(trace)
    report = ExperimentReport(
        mode=spec.mode,
        num_devices=spec.num_devices,
        wstgr=wstgr,
        per_device_rate=statistics.mean(rates),
        acceptance_rate=trace_acceptance_rate(trace),
        cost_per_1k_usd=scenario_cost_per_1k(spec, wstgr),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "server_metrics.csv"
    write_csv(metrics_path, METRICS_FIELDS, trace.server_metrics)
    report.csv_paths.append(metrics_path.name)  # relative: reports relocate
    write_json(out_dir / "report.json", report.to_dict())
    return report


def _mean_rate_fn(base: ScenarioSpec, mode: str, horizon_ms: float = 40_000.0,
                  root_seed: int = 23):
    def rate(n: int) -> float:
        trace = run_scenario(base.with_(mode=mode, num_devices=n,
                                        horizon_ms=horizon_ms,
                                        root_seed=root_seed))
        return statistics.mean(per_device_rates(trace))

    return rate


def capacity_for(base: ScenarioSpec, mode: str, target_rate: float,
                 n_max: int = 128) -> float:
    try:
        return capacity_search(_mean_rate_fn(base, mode), target_rate, n_max)
    except Unsupportable:
        return 0.0


def sweep_gamma(base: ScenarioSpec, values, out_dir: Path,
                target_rate: float = cal.DEFAULT_TARGET_RATE) -> Path:
    """Speculative-length tradeoff: single-device throughput vs. capacity."""
    rows = []
    for gamma in values:
        spec = base.with_(gamma=int(gamma))
        solo = run_scenario(spec.with_(num_devices=1))
        throughput = per_device_rates(solo)[0]
        capacity = capacity_for(spec, MODE_SLED, target_rate)
        rows.append({
            "gamma": int(gamma),
            "per_device_throughput_tokens_per_s": throughput,
            "capacity_devices": capacity,
        })
    return write_csv(out_dir / "fig5_tradeoff.csv",
                     ["gamma", "per_device_throughput_tokens_per_s",
                      "capacity_devices"], rows)


def sweep_batch(base: ScenarioSpec, values, out_dir: Path) -> Path:
    """WSTGR vs. batch size: SLED against the centralized baseline."""
    rows = []
    for batch in values:
        spec = base.with_(batch_size=int(batch))
        sled = measure_wstgr(run_scenario(spec.with_(mode=MODE_SLED)))
        central = measure_wstgr(run_scenario(spec.with_(mode=MODE_CENTRALIZED)))
        rows.append({
            "batch_size": int(batch),
            "wstgr_sled_tokens_per_s": sled,
            "wstgr_centralized_tokens_per_s": central,
        })
    return write_csv(out_dir / "fig4_wstgr.csv",
                     ["batch_size", "wstgr_sled_tokens_per_s",
                      "wstgr_centralized_tokens_per_s"], rows)


def sweep_devices(base: ScenarioSpec, values, out_dir: Path) -> Path:
    rows = []
    for n in values:
        spec = base.with_(num_devices=int(n))
        sled = measure_wstgr(run_scenario(spec.with_(mode=MODE_SLED)))
        central = measure_wstgr(run_scenario(spec.with_(mode=MODE_CENTRALIZED)))
        edge = measure_wstgr(run_scenario(spec.with_(mode=MODE_EDGE_ONLY)))
        rows.append({
            "num_devices": int(n),
            "wstgr_sled_tokens_per_s": sled,
            "wstgr_centralized_tokens_per_s": central,
            "wstgr_edge_only_tokens_per_s": edge,
        })
    return write_csv(out_dir / "devices_wstgr.csv",
                     ["num_devices", "wstgr_sled_tokens_per_s",
                      "wstgr_centralized_tokens_per_s",
                      "wstgr_edge_only_tokens_per_s"], rows)


def loss_sweep(loss_rates, out_dir: Path,
               throughput_horizon_ms: float = 240_000.0,
               quality_horizon_ms: float = 300_000.0) -> tuple[Path, Path, list[dict]]:
    """Per loss rate: edge committed throughput (prototype workload) and the
    TV-distance quality proxy (n-gram eval pair)."""
    target, draft, registry = quality_models()
    thr_rows = []
    q_rows = []
    for loss in loss_rates:
        trace = run_scenario(loss_throughput_spec(loss, throughput_horizon_ms))
        throughput = edge_committed_rate(trace)
        thr_rows.append({
            "loss_rate": loss,
            "edge_throughput_tokens_per_s": throughput,
            "relative_to_lossless": None,
        })
        qcfg = build_run_config(quality_spec(loss, quality_horizon_ms),
                                target=target, registry=registry)
        qtrace = run_simulation(qcfg)
        seqs = committed_sequences(qtrace, warmup_fraction=0.1)
        tv, samples = empirical_tv_to_model(seqs, target)
        ref = expected_tv_between(seqs, draft, target)
        q_rows.append({
            "loss_rate": loss,
            "tv_distance_to_target": tv,
            "tv_draft_vs_target": ref,
            "samples": samples,
        })
    baseline = next((r["edge_throughput_tokens_per_s"] for r in thr_rows
                     if r["loss_rate"] == 0), None)
    if baseline:
        for row in thr_rows:
            row["relative_to_lossless"] = (
                row["edge_throughput_tokens_per_s"] / baseline)
    p8 = write_csv(out_dir / "fig8_loss_throughput.csv",
                   ["loss_rate", "edge_throughput_tokens_per_s",
                    "relative_to_lossless"], thr_rows)
    p9 = write_csv(out_dir / "fig9_loss_quality.csv",
                   ["loss_rate", "tv_distance_to_target", "tv_draft_vs_target",
                    "samples"], q_rows)
    series = [
        {**t, **{k: v for k, v in q.items() if k != "loss_rate"}}
        for t, q in zip(thr_rows, q_rows)
    ]
    return p8, p9, series


def sweep_quant(base: ScenarioSpec, values, out_dir: Path,
                device_counts=(1, 2, 4, 8, 16)) -> Path:
    """Cost/throughput plane over strategy x quantization x device count, with
    the non-dominated front flagged."""
    points = []
    rows = []
    for quant in values:
        for mode in (MODE_SLED, MODE_CENTRALIZED, MODE_EDGE_ONLY):
            for n in device_counts:
                spec = base.with_(mode=mode, quant_bits=int(quant),
                                  num_devices=int(n))
                wstgr = measure_wstgr(run_scenario(spec))
                cost = scenario_cost_per_1k(spec, wstgr)
                label = f"{mode}/q{int(quant)}/n{int(n)}"
                points.append(ParetoPoint(cost, wstgr, label))
                rows.append({
                    "label": label, "strategy": mode, "quant_bits": int(quant),
                    "num_devices": int(n),
                    "wstgr_tokens_per_s": wstgr, "cost_per_1k_usd": cost,
                })
    front = {p.label for p in pareto_front(points)}
    for row in rows:
        row["on_pareto_front"] = row["label"] in front
    return write_csv(out_dir / "fig7_pareto.csv",
                     ["label", "strategy", "quant_bits", "num_devices",
                      "wstgr_tokens_per_s", "cost_per_1k_usd",
                      "on_pareto_front"], rows)


def confidence_report(trace, out_dir: Path) -> tuple[Path, float]:
    bins = confidence_acceptance_histogram(trace)
    rows = [
        {"bin_lo": b.lo, "bin_hi": b.hi, "count": b.count,
         "acceptance_rate": (b.acceptance_rate if b.count else None),
         "low_sample": b.low_sample}
        for b in bins
    ]
    path = write_csv(out_dir / "fig3_confidence_acceptance.csv",
                     ["bin_lo", "bin_hi", "count", "acceptance_rate",
                      "low_sample"], rows)
    populated = [b for b in bins if b.count >= 100]
    rho = spearman_rho([(b.lo + b.hi) / 2 for b in populated],
                       [b.acceptance_rate for b in populated])
    return path, rho
