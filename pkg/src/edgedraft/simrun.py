"""Whole-system simulation harness: SLED, centralized, and edge-only modes.

Every run is a pure function of its :class:`SimRunConfig` (models, policies,
network, seeds): drivers are created in device order, all randomness flows
through named RngStreams, and the clock fires equal-time events in insertion
order.  The centralized baseline reuses the verification server's batch
planner and service-time model, but generates one token per request instead of
verifying blocks; it exchanges internal dataclasses (never byte-encoded) since
the wire protocol has no generation message.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .device import (
    ArmTimer,
    DeviceAgent,
    DraftingPolicy,
    EmittedToken,
    PROV_FALLBACK,
    PROV_VERIFIED,
    ReliabilityPolicy,
    ResponseArrived,
    SendRequest,
    SessionLimits,
    nominal_block_length,
)
from .errors import TransportFatal
from .models import LanguageModel, ModelRegistry, sample_from_state
from .netsim import NetworkConditions, SimClock, SimLink
from .protocol import (
    SessionClose,
    SessionInit,
    VerifyRequest,
    VerifyResponse,
    encode,
)
from .rng import RngStream
from .server import FifoBatchQueue, ServerConfig, VerifyServer

MODE_SLED = "sled"
MODE_CENTRALIZED = "centralized"
MODE_EDGE_ONLY = "edge-only"

_SESSION_STRIDE = 1_000_000


@dataclass(frozen=True)
class GenerateRequest:
    session_id: int
    request_id: int
    base_position: int


@dataclass(frozen=True)
class GenerateResponse:
    session_id: int
    request_id: int
    token: int


@dataclass(frozen=True)
class DeviceSpec:
    draft_model_name: str
    tokens_per_second: float
    drafting: DraftingPolicy
    reliability: ReliabilityPolicy
    draft_ahead_limit: int | None = None


@dataclass
class SimRunConfig:
    mode: str
    target: LanguageModel
    registry: ModelRegistry
    devices: list[DeviceSpec]
    network: NetworkConditions
    server: ServerConfig
    limits: SessionLimits
    prompt_len: int = 4
    horizon_ms: float = 60_000.0
    root_seed: int = 0
    restart_sessions: bool = True
    open_loop_lambda: float | None = None  # requests/s per device; None = closed loop


@dataclass
class SessionTrace:
    session_ordinal: int
    prompt: tuple[int, ...]
    emitted: list[EmittedToken] = field(default_factory=list)


@dataclass
class DeviceTrace:
    device_index: int
    sessions: list[SessionTrace] = field(default_factory=list)
    draft_conf: list[float] = field(default_factory=list)
    draft_verdict: list[int] = field(default_factory=list)
    request_log: list[dict] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    failed: str | None = None

    def emitted(self):
        for session in self.sessions:
            yield from session.emitted


@dataclass
class RunTrace:
    mode: str
    horizon_ms: float
    devices: list[DeviceTrace]
    server_metrics: list[dict]
    server_stats: dict
    server_sessions: dict[int, dict]
    final_time_ms: float


def _merge_stats(into: dict, stats: dict):
    for key, value in stats.items():
        into[key] = into.get(key, 0) + value


def _wire_size(msg) -> int:
    if isinstance(msg, (GenerateRequest, GenerateResponse)):
        return 29
    return len(encode(msg))


def derive_prompt(root_seed: int, index: int, prompt_len: int, vocab: int,
                  eos: int | None) -> tuple[int, ...]:
    """Deterministic per-device prompt (eos excluded)."""
    stream = RngStream.derive(root_seed, "prompt", index)
    prompt = []
    for _ in range(prompt_len):
        tok = min(int(stream.uniform() * vocab), vocab - 1)
        if eos is not None and tok == eos:
            tok = (tok + 1) % vocab
        prompt.append(tok)
    return tuple(prompt)


class _Harness:
    def __init__(self, cfg: SimRunConfig):
        self.cfg = cfg
        self.clock = SimClock()
        self.devices: list = []
        self.server_driver = None

    def prompt_for(self, index: int) -> tuple[int, ...]:
        return derive_prompt(self.cfg.root_seed, index, self.cfg.prompt_len,
                             self.cfg.target.vocab_size, self.cfg.limits.eos)

    def down_link_for(self, session_id: int) -> SimLink | None:
        index = session_id // _SESSION_STRIDE
        if 0 <= index < len(self.devices):
            return self.devices[index].link_down
        return None


class _SledServerDriver:
    def __init__(self, harness: _Harness, server: VerifyServer):
        self.h = harness
        self.server = server
        self.busy = False
        self._flush_at: float | None = None

    def on_message(self, msg):
        now = self.h.clock.now_ms
        if isinstance(msg, SessionInit):
            self.server.session_init(msg)
        elif isinstance(msg, VerifyRequest):
            reply = self.server.submit(msg, now)
            if reply is not None:
                self._send(reply)
        elif isinstance(msg, SessionClose):
            self.server.session_close(msg)
        self._kick()

    def _send(self, resp: VerifyResponse):
        link = self.h.down_link_for(resp.session_id)
        if link is not None:
            link.send(resp)

    def _kick(self):
        if self.busy:
            return
        now = self.h.clock.now_ms
        batch = self.server.take_batch(now)
        if batch:
            self.busy = True
            result = self.server.execute_batch(batch, now)
            self.h.clock.at(result.finished_ms, lambda r=result: self._finish(r))
            return
        self._maybe_schedule_flush()

    def _maybe_schedule_flush(self):
        cfg = self.server.config
        oldest = self.server.queue.oldest_arrival_ms()
        if oldest is None or cfg.batch_timeout_ms <= 0:
            return
        due = oldest + cfg.batch_timeout_ms
        if self._flush_at is not None and self._flush_at <= due:
            return
        self._flush_at = due
        self.h.clock.at(due, lambda t=due: self._flush(t))

    def _flush(self, due: float):
        if self._flush_at != due:
            return
        self._flush_at = None
        self._kick()

    def _finish(self, result):
        self.busy = False
        for resp in result.responses:
            self._send(resp)
        self._kick()


class _SledDevice:
    def __init__(self, harness: _Harness, index: int, spec: DeviceSpec):
        self.h = harness
        self.index = index
        self.spec = spec
        self.model = harness.cfg.registry.resolve(spec.draft_model_name)
        self.period_ms = 1000.0 / spec.tokens_per_second
        self.trace = DeviceTrace(index)
        self.next_session_seq = 0
        self.agent: DeviceAgent | None = None
        self.session_trace: SessionTrace | None = None
        self._draft_scheduled = False
        self.link_up: SimLink | None = None
        self.link_down: SimLink | None = None

    def start(self):
        self._new_agent()
        self._ensure()

    def _new_agent(self):
        prompt = self.h.prompt_for(self.index)
        ordinal = self.next_session_seq
        stream = RngStream.derive(self.h.cfg.root_seed, "draft", self.index, ordinal)
        self.agent = DeviceAgent(
            prompt,
            self.model,
            self.spec.drafting,
            self.spec.reliability,
            self.h.cfg.limits,
            stream,
            device_index=self.index,
            session_seq=ordinal,
            draft_model_name=self.spec.draft_model_name,
            draft_ahead_limit=self.spec.draft_ahead_limit,
        )
        self.session_trace = SessionTrace(ordinal, prompt,
                                          self.agent.state.emitted)

    def _finish_session(self):
        agent = self.agent
        self.trace.sessions.append(self.session_trace)
        self.trace.draft_conf.extend(agent.draft_conf)
        self.trace.draft_verdict.extend(agent.draft_verdict)
        self.trace.request_log.extend(agent.request_log)
        _merge_stats(self.trace.stats, agent.stats)
        self.next_session_seq = agent.session_seq
        self.agent = None
        self.session_trace = None

    def collect(self):
        if self.agent is not None:
            self._finish_session()

    def _ensure(self):
        if self.trace.failed:
            return
        if self.agent.state.done:
            self._finish_session()
            if not self.h.cfg.restart_sessions:
                return
            self._new_agent()
        if self.agent.wants_draft() and not self._draft_scheduled:
            self._draft_scheduled = True
            self.h.clock.after(self.period_ms, self._draft_fire)

    def _draft_fire(self):
        self._draft_scheduled = False
        if self.trace.failed or self.agent is None:
            return
        if not self.agent.state.done and self.agent.wants_draft():
            self._run(lambda: self.agent.draft_one(self.h.clock.now_ms))
        self._ensure()

    def _run(self, fn):
        try:
            actions = fn()
        except TransportFatal as exc:
            self.trace.failed = str(exc)
            return
        for action in actions:
            if isinstance(action, SendRequest):
                for msg in action.messages:
                    self.link_up.send(msg)
            elif isinstance(action, ArmTimer):
                agent = self.agent
                self.h.clock.at(
                    action.deadline_ms,
                    lambda a=agent, t=action.timer_id: self._timer(a, t),
                )

    def _timer(self, agent: DeviceAgent, timer_id: int):
        if self.trace.failed or agent is not self.agent:
            return
        from .device import TimeoutFired

        self._run(lambda: agent.step(TimeoutFired(timer_id), self.h.clock.now_ms))
        self._ensure()

    def on_message(self, msg):
        if self.trace.failed or self.agent is None:
            return
        if isinstance(msg, VerifyResponse):
            self._run(lambda: self.agent.step(ResponseArrived(msg),
                                              self.h.clock.now_ms))
            self._ensure()


class CentralizedServer:
    """Token-generation service behind the same FIFO batch planner."""

    def __init__(self, config: ServerConfig, target: LanguageModel, root_seed: int):
        self.config = config
        self.target = target
        self.root_seed = root_seed
        self.queue = FifoBatchQueue(config.batch_size, config.batch_timeout_ms)
        self.sessions: dict[int, dict] = {}
        self.metrics_rows: list[dict] = []
        self.stats = {"requests": 0, "batches": 0, "generated": 0,
                      "replayed": 0, "dropped": 0}

    def session_init(self, session_id: int, prompt: tuple[int, ...]):
        self.sessions[session_id] = {
            "length": len(prompt),
            "state": self.target.state_for(prompt),
            "rng": RngStream.derive(self.root_seed, "generate", session_id),
            "last_base": -1,
            "last_token": 0,
            "generated": 0,
        }

    def submit(self, req: GenerateRequest, arrival_ms: float) -> GenerateResponse | None:
        self.stats["requests"] += 1
        record = self.sessions.get(req.session_id)
        if record is None:
            self.stats["dropped"] += 1
            return None
        if req.base_position == record["length"]:
            self.queue.add(req, arrival_ms)
            return None
        if req.base_position == record["last_base"]:
            self.stats["replayed"] += 1
            return GenerateResponse(req.session_id, req.request_id,
                                    record["last_token"])
        self.stats["dropped"] += 1
        return None

    def execute_batch(self, batch: list[GenerateRequest], start_ms: float):
        finished = start_ms + self.config.service.batch_latency_ms(len(batch), 1)
        responses = []
        generated = 0
        for req in batch:
            record = self.sessions.get(req.session_id)
            if record is None or req.base_position != record["length"]:
                if record is not None and req.base_position == record["last_base"]:
                    responses.append(
                        GenerateResponse(req.session_id, req.request_id,
                                         record["last_token"]))
                    self.stats["replayed"] += 1
                continue
            token, _ = sample_from_state(self.target, record["state"],
                                         record["rng"].uniform())
            record["state"] = self.target.advance(record["state"], token)
            record["last_base"] = record["length"]
            record["last_token"] = token
            record["length"] += 1
            record["generated"] += 1
            generated += 1
            responses.append(GenerateResponse(req.session_id, req.request_id, token))
        self.stats["batches"] += 1
        self.stats["generated"] += generated
        self.metrics_rows.append({
            "time_ms": finished,
            "queue_depth": len(self.queue),
            "batch_size": len(batch),
            "tokens_verified": generated,
            "tokens_rejected": 0,
        })
        return responses, finished


class _CentralizedServerDriver:
    def __init__(self, harness: _Harness, server: CentralizedServer):
        self.h = harness
        self.server = server
        self.busy = False
        self._flush_at: float | None = None

    def on_message(self, msg):
        now = self.h.clock.now_ms
        if isinstance(msg, SessionInit):
            self.server.session_init(msg.session_id, msg.prompt_tokens)
        elif isinstance(msg, GenerateRequest):
            reply = self.server.submit(msg, now)
            if reply is not None:
                self._send(reply)
        self._kick()

    def _send(self, resp: GenerateResponse):
        link = self.h.down_link_for(resp.session_id)
        if link is not None:
            link.send(resp)

    def _kick(self):
        if self.busy:
            return
        now = self.h.clock.now_ms
        batch = self.server.queue.take(now)
        if batch:
            self.busy = True
            responses, finished = self.server.execute_batch(batch, now)
            self.h.clock.at(finished, lambda r=responses: self._finish(r))
            return
        cfg = self.server.config
        oldest = self.server.queue.oldest_arrival_ms()
        if oldest is None or cfg.batch_timeout_ms <= 0:
            return
        due = oldest + cfg.batch_timeout_ms
        if self._flush_at is not None and self._flush_at <= due:
            return
        self._flush_at = due
        self.h.clock.at(due, lambda t=due: self._flush(t))

    def _flush(self, due: float):
        if self._flush_at != due:
            return
        self._flush_at = None
        self._kick()

    def _finish(self, responses):
        self.busy = False
        for resp in responses:
            self._send(resp)
        self._kick()


class _CentralizedDevice:
    """Closed-loop client: one token request outstanding, no local compute."""

    def __init__(self, harness: _Harness, index: int, spec: DeviceSpec):
        self.h = harness
        self.index = index
        self.spec = spec
        self.trace = DeviceTrace(index)
        self.session_seq = 0
        self.session_trace: SessionTrace | None = None
        self.session_id = -1
        self.base = 0
        self.next_rid = 1
        self.pending_rid: int | None = None
        self.timer_seq = 0
        self.link_up: SimLink | None = None
        self.link_down: SimLink | None = None

    def start(self):
        self._new_session()

    def _new_session(self):
        prompt = self.h.prompt_for(self.index)
        self.session_id = self.index * _SESSION_STRIDE + self.session_seq
        self.session_seq += 1
        self.base = len(prompt)
        self.session_trace = SessionTrace(self.session_seq - 1, prompt)
        self.link_up.send(SessionInit(self.session_id, prompt, "none"))
        self._request()

    def _request(self):
        rid = (self.index << 40) | self.next_rid
        self.next_rid += 1
        self.pending_rid = rid
        self.link_up.send(GenerateRequest(self.session_id, rid, self.base))
        self.timer_seq += 1
        timeout = self.spec.reliability.timeout_ms
        self.h.clock.after(timeout, lambda t=self.timer_seq: self._timeout(t))

    def _timeout(self, timer_id: int):
        if self.pending_rid is None or timer_id != self.timer_seq:
            return
        self._request()  # same base; the server replays or supersedes

    def on_message(self, msg):
        if not isinstance(msg, GenerateResponse):
            return
        if msg.request_id != self.pending_rid or msg.session_id != self.session_id:
            return
        self.pending_rid = None
        limits = self.h.cfg.limits
        trace = self.session_trace
        trace.emitted.append(
            EmittedToken(len(trace.emitted), msg.token, PROV_VERIFIED,
                         self.h.clock.now_ms)
        )
        self.base += 1
        done = len(trace.emitted) >= limits.max_tokens or (
            limits.eos is not None and msg.token == limits.eos
        )
        if done:
            self.trace.sessions.append(trace)
            if self.h.cfg.restart_sessions:
                self._new_session()
            return
        self._request()

    def collect(self):
        if self.session_trace is not None and (
            not self.trace.sessions or self.trace.sessions[-1] is not self.session_trace
        ):
            self.trace.sessions.append(self.session_trace)
            self.session_trace = None


class _EdgeOnlyDevice:
    """Pure local drafting: every token is committed and emitted immediately."""

    def __init__(self, harness: _Harness, index: int, spec: DeviceSpec):
        self.h = harness
        self.index = index
        self.model = harness.cfg.registry.resolve(spec.draft_model_name)
        self.period_ms = 1000.0 / spec.tokens_per_second
        self.trace = DeviceTrace(index)
        self.session_seq = 0
        self.session_trace: SessionTrace | None = None
        self.state = None
        self.position = 0
        self.stream: RngStream | None = None
        self.link_up = None
        self.link_down = None

    def start(self):
        self._new_session()
        self.h.clock.after(self.period_ms, self._draft)

    def _new_session(self):
        prompt = self.h.prompt_for(self.index)
        self.stream = RngStream.derive(self.h.cfg.root_seed, "draft", self.index,
                                       self.session_seq)
        self.session_trace = SessionTrace(self.session_seq, prompt)
        self.session_seq += 1
        self.state = self.model.state_for(prompt)
        self.position = len(prompt)

    def _draft(self):
        limits = self.h.cfg.limits
        token, conf = sample_from_state(
            self.model, self.state, self.stream.uniform_at(self.position)
        )
        self.state = self.model.advance(self.state, token)
        self.position += 1
        trace = self.session_trace
        trace.emitted.append(
            EmittedToken(len(trace.emitted), token, PROV_FALLBACK,
                         self.h.clock.now_ms)
        )
        self.trace.draft_conf.append(conf)
        done = len(trace.emitted) >= limits.max_tokens or (
            limits.eos is not None and token == limits.eos
        )
        if done:
            self.trace.sessions.append(trace)
            if not self.h.cfg.restart_sessions:
                return
            self._new_session()
        self.h.clock.after(self.period_ms, self._draft)

    def collect(self):
        if self.session_trace is not None and (
            not self.trace.sessions or self.trace.sessions[-1] is not self.session_trace
        ):
            self.trace.sessions.append(self.session_trace)
            self.session_trace = None

    def on_message(self, msg):
        pass


class _OpenLoopDevice:
    """Poisson source of single-shot verification requests (server-side
    workload modeling; responses are not fed back)."""

    def __init__(self, harness: _Harness, index: int, spec: DeviceSpec,
                 lam_per_s: float):
        self.h = harness
        self.index = index
        self.spec = spec
        self.model = harness.cfg.registry.resolve(spec.draft_model_name)
        self.lam = lam_per_s
        self.trace = DeviceTrace(index)
        self.arrival_rng = RngStream.derive(harness.cfg.root_seed, "arrivals", index)
        self.count = 0
        self.link_up = None
        self.link_down = None

    def start(self):
        self._schedule_next()

    def _schedule_next(self):
        import math

        gap_ms = -math.log(1.0 - self.arrival_rng.uniform()) / self.lam * 1000.0
        self.h.clock.after(gap_ms, self._fire)

    def _fire(self):
        prompt = self.h.prompt_for(self.index)
        sid = self.index * _SESSION_STRIDE + self.count
        stream = RngStream.derive(self.h.cfg.root_seed, "draft", self.index,
                                  self.count)
        self.count += 1
        gamma = nominal_block_length(self.spec.drafting)
        state = self.model.state_for(prompt)
        tokens = []
        probs = []
        for pos in range(gamma):
            tok, conf = sample_from_state(self.model, state,
                                          stream.uniform_at(len(prompt) + pos))
            state = self.model.advance(state, tok)
            tokens.append(tok)
            probs.append(conf)
        self.link_up.send(
            SessionInit(sid, prompt, self.spec.draft_model_name))
        self.link_up.send(
            VerifyRequest(sid, (self.index << 40) | self.count, len(prompt),
                          tuple(tokens), tuple(probs)))
        self._schedule_next()

    def collect(self):
        pass

    def on_message(self, msg):
        pass


def run_simulation(cfg: SimRunConfig) -> RunTrace:
    harness = _Harness(cfg)
    clock = harness.clock

    if cfg.mode == MODE_SLED:
        server = VerifyServer(cfg.server, cfg.target, cfg.registry, cfg.root_seed)
        server_driver = _SledServerDriver(harness, server)
    elif cfg.mode == MODE_CENTRALIZED:
        server = CentralizedServer(cfg.server, cfg.target, cfg.root_seed)
        server_driver = _CentralizedServerDriver(harness, server)
    elif cfg.mode == MODE_EDGE_ONLY:
        server = None
        server_driver = None
    else:
        raise ValueError(f"unknown simulation mode {cfg.mode!r}")
    harness.server_driver = server_driver

    for index, spec in enumerate(cfg.devices):
        if cfg.mode == MODE_EDGE_ONLY:
            device = _EdgeOnlyDevice(harness, index, spec)
        elif cfg.mode == MODE_CENTRALIZED:
            device = _CentralizedDevice(harness, index, spec)
        elif cfg.open_loop_lambda is not None:
            device = _OpenLoopDevice(harness, index, spec, cfg.open_loop_lambda)
        else:
            device = _SledDevice(harness, index, spec)
        if server_driver is not None:
            device.link_up = SimLink(
                clock, cfg.network,
                RngStream.derive(cfg.root_seed, "link", index, "up"),
                server_driver.on_message, _wire_size,
            )
            device.link_down = SimLink(
                clock, cfg.network,
                RngStream.derive(cfg.root_seed, "link", index, "down"),
                device.on_message, _wire_size,
            )
        harness.devices.append(device)

    for device in harness.devices:
        clock.at(0.0, device.start)

    final = clock.run_until_idle(cfg.horizon_ms)

    traces = []
    for device in harness.devices:
        device.collect()
        traces.append(device.trace)

    if cfg.mode == MODE_SLED:
        sessions = {
            sid: {
                "requests": rec.requests,
                "accepted": rec.accepted_tokens,
                "corrective": rec.corrective_tokens,
                "committed_len": len(rec.committed),
                "committed": rec.committed,
            }
            for sid, rec in server.sessions.items()
        }
        return RunTrace(cfg.mode, cfg.horizon_ms, traces, server.metrics_rows,
                        dict(server.stats), sessions, final)
    if cfg.mode == MODE_CENTRALIZED:
        sessions = {
            sid: {"generated": rec["generated"], "committed_len": rec["length"]}
            for sid, rec in server.sessions.items()
        }
        return RunTrace(cfg.mode, cfg.horizon_ms, traces, server.metrics_rows,
                        dict(server.stats), sessions, final)
    return RunTrace(cfg.mode, cfg.horizon_ms, traces, [], {}, {}, final)
