"""Single executable: serve, device, simulate, sweep, cost, proxy.

Exit codes: 0 success, 2 config error, 3 connectivity error (with fallback
disabled), 4 domain error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import (
    BindError,
    ConfigError,
    ConnectError,
    DomainError,
    TransportFatal,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONNECTIVITY = 3
EXIT_DOMAIN = 4


def _split_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"endpoint must be HOST:PORT, got {text!r}")
    return host, int(port)


def _load(args) -> "Config":
    from .config import apply_overrides, load_config

    cfg = load_config(args.config)
    return apply_overrides(cfg, args.set or [])


def cmd_serve(args) -> int:
    from .config import config_to_spec
    from .scenarios import build_models
    from .server import ServerConfig, ServiceTimeModel, VerifyServer
    from .sockets import SocketVerifyServer

    cfg = _load(args)
    spec = config_to_spec(cfg)
    target, registry = build_models(spec)
    server = VerifyServer(
        ServerConfig(
            batch_size=spec.batch_size,
            batch_timeout_ms=spec.batch_timeout_ms,
            service=ServiceTimeModel(spec.service_base_ms,
                                     spec.service_per_sequence_ms,
                                     spec.service_per_token_ms),
        ),
        target, registry, spec.root_seed,
    )
    host, port = _split_endpoint(args.listen)
    front = SocketVerifyServer(server, host, port,
                               inject_service_delay=not args.no_service_delay)
    front.start()
    metrics_path = Path(cfg.experiment["out_dir"]) / "server_metrics.csv"
    print(f"edgedraft server on {front.host}:{front.port} "
          f"batch_size={spec.batch_size} target=seeded:{spec.target_seed} "
          f"vocab={spec.vocab_size}")
    print(f"metrics will be written to {metrics_path}")
    try:
        while True:
            import time

            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        front.shutdown()
        from .reports import write_csv
        from .server import METRICS_FIELDS

        write_csv(metrics_path, METRICS_FIELDS, server.metrics_rows)
        print(f"metrics: {metrics_path}")
    return EXIT_OK


def prompt_tokens_from_text(text: str, vocab_size: int,
                            eos: int | None) -> tuple[int, ...]:
    """Deterministic mock tokenization: hash each whitespace word into the
    vocabulary, avoiding the eos id."""
    from .rng import hash_labels

    tokens = []
    for word in text.split():
        tok = hash_labels(0x70726F6D, word) % vocab_size
        if eos is not None and tok == eos:
            tok = (tok + 1) % vocab_size
        tokens.append(tok)
    return tuple(tokens)


def cmd_device(args) -> int:
    from .config import config_to_spec
    from .device import (ConfidenceThreshold, FixedLength, ReliabilityPolicy,
                         SessionLimits)
    from .scenarios import build_models, DRAFT_MODEL_NAME
    from .sockets import SocketTransport, run_session

    cfg = _load(args)
    spec = config_to_spec(cfg)
    target, registry = build_models(spec)
    draft = registry.resolve(DRAFT_MODEL_NAME)
    eos = spec.vocab_size - 1 if spec.eos_enabled else None
    prompt = prompt_tokens_from_text(args.prompt, spec.vocab_size, eos)
    limits = SessionLimits(max_tokens=args.max_tokens, eos=eos)
    drafting = (FixedLength(spec.gamma) if spec.policy == "fixed"
                else ConfidenceThreshold(spec.c_th, spec.gamma_max))
    reliability = ReliabilityPolicy(
        timeout_ms=spec.timeout_ms or 4.0 * spec.rtt_ms,
        max_retries_per_request=spec.max_retries,
        fallback_failure_threshold=spec.fallback_threshold,
        fallback_enabled=spec.fallback_enabled,
    )

    def emit(token):
        print(f"{token.token}\t[{token.provenance}]", flush=True)

    host, port = _split_endpoint(args.connect)
    try:
        transport = SocketTransport(host, port)
    except ConnectError:
        if not spec.fallback_enabled:
            print("error: server unreachable and fallback disabled",
                  file=sys.stderr)
            return EXIT_CONNECTIVITY
        transcript = _draft_only(draft, prompt, limits, emit)
    else:
        transcript = run_session(prompt, draft, transport, drafting,
                                 reliability, limits, pace=not args.no_pace,
                                 on_emit=emit)
        transport.close()
        if transcript.stats.get("transport_fatal"):
            print("error: verification failed and fallback disabled",
                  file=sys.stderr)
            return EXIT_CONNECTIVITY
    out = Path(args.transcript)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(transcript.to_jsonl(), encoding="utf-8")
    print(f"transcript: {out}")
    return EXIT_OK


def _draft_only(draft, prompt, limits, emit):
    """Local generation when the server was never reachable."""
    from .device import EmittedToken, PROV_FALLBACK
    from .models import sample_from_state
    from .rng import RngStream
    from .sockets import SessionTranscript

    transcript = SessionTranscript(tuple(prompt))
    stream = RngStream.derive(0, "draft", 0, 0)
    state = draft.state_for(prompt)
    position = len(prompt)
    while len(transcript.emitted) < limits.max_tokens:
        token, _ = sample_from_state(draft, state, stream.uniform_at(position))
        state = draft.advance(state, token)
        position += 1
        emitted = EmittedToken(len(transcript.emitted), token, PROV_FALLBACK, 0.0)
        transcript.emitted.append(emitted)
        emit(emitted)
        if limits.eos is not None and token == limits.eos:
            break
    transcript.stats["fallback_only"] = True
    return transcript


def cmd_simulate(args) -> int:
    from .config import config_to_spec
    from .reports import simulate_report

    cfg = _load(args)
    spec = config_to_spec(cfg, mode=args.scenario)
    report = simulate_report(spec, Path(args.out or cfg.experiment["out_dir"]))
    print(f"mode={report.mode} devices={report.num_devices} "
          f"wstgr={report.wstgr:.3f} tokens/s "
          f"per_device={report.per_device_rate:.3f} tokens/s")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .config import config_to_spec
    from . import reports

    cfg = _load(args)
    out = Path(args.out or cfg.experiment["out_dir"])
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ConfigError("--values must list at least one value")
    try:
        [float(v) for v in values]
    except ValueError as exc:
        raise ConfigError(f"--values must be numeric: {exc}") from exc
    base = config_to_spec(cfg)
    if args.param == "gamma":
        path = reports.sweep_gamma(base, [int(v) for v in values], out,
                                   target_rate=float(
                                       cfg.experiment["target_rate"]))
        paths = [path]
    elif args.param == "batch":
        paths = [reports.sweep_batch(base, [int(v) for v in values], out)]
    elif args.param == "devices":
        paths = [reports.sweep_devices(base, [int(v) for v in values], out)]
    elif args.param == "loss":
        p8, p9, _ = reports.loss_sweep([float(v) for v in values], out)
        paths = [p8, p9]
    elif args.param == "quant":
        paths = [reports.sweep_quant(base, [int(v) for v in values], out)]
    else:
        raise ConfigError(f"unknown sweep parameter {args.param!r}")
    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_cost(args) -> int:
    from .experiments import CostParams, cost_per_1k_tokens

    if args.rate <= 0:
        raise DomainError("--rate must be > 0")
    cost = cost_per_1k_tokens(CostParams(args.rate, args.price, args.watts))
    print(f"{cost:.5e}")
    return EXIT_OK


def cmd_proxy(args) -> int:
    from .sockets import LossyProxy

    proxy = LossyProxy(_split_endpoint(args.listen),
                       _split_endpoint(args.forward),
                       loss=args.loss, rtt_ms=args.rtt_ms,
                       jitter_ms=args.jitter_ms, seed=args.seed)
    proxy.start()
    print(f"proxy {proxy.host}:{proxy.port} -> {args.forward} "
          f"loss={args.loss} rtt={args.rtt_ms}ms")
    try:
        while True:
            import time

            time.sleep(0.2)
    except KeyboardInterrupt:
        proxy.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgedraft",
        description="Distributed speculative decoding at the edge: serve, "
                    "run devices, simulate, sweep, and price it.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable; flags win)")

    p = sub.add_parser("serve", help="run the verification server on sockets")
    common(p)
    p.add_argument("--listen", default="127.0.0.1:7070", metavar="HOST:PORT")
    p.add_argument("--no-service-delay", action="store_true",
                   help="do not sleep for the simulated service time")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("device", help="run one device agent over sockets")
    common(p)
    p.add_argument("--connect", default="127.0.0.1:7070", metavar="HOST:PORT")
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--transcript", default="transcript.jsonl")
    p.add_argument("--no-pace", action="store_true",
                   help="draft at full speed instead of the profile rate")
    p.set_defaults(fn=cmd_device)

    p = sub.add_parser("simulate", help="run one deterministic simulation")
    common(p)
    p.add_argument("--scenario", choices=["sled", "centralized", "edge-only"],
                   default=None)
    p.add_argument("--out", help="output directory (default: experiment.out_dir)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("sweep", help="run a parameter sweep, emit figure CSVs")
    common(p)
    p.add_argument("--param", required=True,
                   choices=["loss", "gamma", "batch", "devices", "quant"])
    p.add_argument("--values", required=True, metavar="V1,V2,...")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("cost", help="evaluate dollars per 1k tokens")
    p.add_argument("--rate", type=float, required=True,
                   help="tokens per second")
    p.add_argument("--price", type=float, default=80.0,
                   help="device price in USD")
    p.add_argument("--watts", type=float, default=8.0,
                   help="average power draw")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("proxy", help="lossy forwarding proxy between endpoints")
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--forward", required=True, metavar="HOST:PORT")
    p.add_argument("--loss", type=float, default=0.0)
    p.add_argument("--rtt-ms", type=float, default=0.0)
    p.add_argument("--jitter-ms", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_proxy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BindError, ConnectError, TransportFatal) as exc:
        print(f"connectivity error: {exc}", file=sys.stderr)
        return EXIT_CONNECTIVITY
    except DomainError as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
