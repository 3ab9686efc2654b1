"""Edge-device state machine: draft locally, verify remotely, survive loss.

The agent is a single-threaded event-driven machine.  Drivers (simulated or
socket) feed it TokenDrafted / ResponseArrived / TimeoutFired events and carry
out the actions it returns.  Drafting never blocks on the network: while a
request is in flight the device keeps drafting into ``draft_ahead`` (bounded by
``draft_ahead_limit``); a fully accepted block promotes that buffer into the
next request, a rejection discards it wholesale.

Reliability: a timeout re-sends the unacknowledged block with the draft-ahead
tokens concatenated under a fresh request id.  Once consecutive failures reach
the fallback threshold the pending tokens are released to the user unverified
and the device enters draft-only mode, probing connectivity with throwaway
sessions until some response arrives; it then re-syncs by opening a fresh
session whose prompt is the full committed context.  Fallback tokens are never
retro-verified.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import TransportFatal
from .models import LanguageModel, sample_from_state
from .protocol import Message, SessionClose, SessionInit, VerifyRequest, VerifyResponse
from .rng import RngStream

# Verdict codes for drafted tokens (confidence/acceptance analysis).
PENDING, ACCEPTED, REJECTED, DISCARDED, RELEASED = range(5)

PROV_VERIFIED = "verified"
PROV_FALLBACK = "fallback"


@dataclass(frozen=True)
class FixedLength:
    gamma: int

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")


@dataclass(frozen=True)
class ConfidenceThreshold:
    c_th: float
    gamma_max: int = 8

    def __post_init__(self):
        if not (0.0 <= self.c_th <= 1.0):
            raise ValueError("c_th must be in [0, 1]")
        if self.gamma_max < 1:
            raise ValueError("gamma_max must be >= 1")


DraftingPolicy = FixedLength | ConfidenceThreshold

CONTINUE = "continue"
REQUEST_VERIFICATION = "request_verification"


def drafting_decision(
    confidence: float, drafted_so_far: int, policy: DraftingPolicy
) -> str:
    """Continue drafting, or request verification now?

    Confidence mode requests when the latest confidence drops below the
    threshold or the block hits gamma_max; fixed mode requests at gamma.
    """
    if isinstance(policy, ConfidenceThreshold):
        if confidence < policy.c_th or drafted_so_far >= policy.gamma_max:
            return REQUEST_VERIFICATION
        return CONTINUE
    if drafted_so_far >= policy.gamma:
        return REQUEST_VERIFICATION
    return CONTINUE


def nominal_block_length(policy: DraftingPolicy) -> int:
    return policy.gamma if isinstance(policy, FixedLength) else policy.gamma_max


@dataclass(frozen=True)
class ReliabilityPolicy:
    timeout_ms: float
    max_retries_per_request: int = 2
    fallback_failure_threshold: int = 3
    fallback_enabled: bool = True

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries_per_request < 0:
            raise ValueError("max_retries_per_request must be >= 0")
        if self.fallback_failure_threshold < 1:
            raise ValueError("fallback_failure_threshold must be >= 1")


@dataclass(frozen=True)
class SessionLimits:
    max_tokens: int
    eos: int | None = None


# Events ---------------------------------------------------------------------


@dataclass(frozen=True)
class TokenDrafted:
    token: int
    confidence: float
    draft_seq: int = -1


@dataclass(frozen=True)
class ResponseArrived:
    response: VerifyResponse


@dataclass(frozen=True)
class TimeoutFired:
    timer_id: int


DeviceEvent = TokenDrafted | ResponseArrived | TimeoutFired


# Actions --------------------------------------------------------------------


@dataclass(frozen=True)
class EmittedToken:
    index: int
    token: int
    provenance: str
    time_ms: float


@dataclass(frozen=True)
class SendRequest:
    messages: tuple[Message, ...]


@dataclass(frozen=True)
class EmitTokens:
    tokens: tuple[EmittedToken, ...]


@dataclass(frozen=True)
class ArmTimer:
    timer_id: int
    deadline_ms: float


@dataclass(frozen=True)
class ReleaseFallback:
    count: int


Action = SendRequest | EmitTokens | ArmTimer | ReleaseFallback


@dataclass
class _Drafted:
    token: int
    confidence: float
    seq: int


@dataclass
class _InFlight:
    base: int
    entries: list[_Drafted]
    ids: set[int]
    latest_id: int
    first_send_ms: float
    retries: int = 0
    probe: bool = False
    timer_id: int = -1
    with_init: tuple[Message, ...] = ()


@dataclass
class DeviceState:
    """Externally observable agent state (the spec's DeviceState)."""

    committed: list[int]
    prompt_len: int
    buffer: list[_Drafted] = field(default_factory=list)
    in_flight: _InFlight | None = None
    draft_ahead: list[_Drafted] = field(default_factory=list)
    consecutive_failures: int = 0
    emitted: list[EmittedToken] = field(default_factory=list)
    fallback_mode: bool = False
    synced: bool = False
    done: bool = False


class DeviceAgent:
    """One user session on one edge device."""

    def __init__(
        self,
        prompt: Sequence[int],
        draft: LanguageModel,
        drafting: DraftingPolicy,
        reliability: ReliabilityPolicy,
        limits: SessionLimits,
        draft_stream: RngStream,
        device_index: int = 0,
        session_seq: int = 0,
        draft_model_name: str = "draft",
        draft_ahead_limit: int | None = None,
    ):
        self.draft = draft
        self.drafting = drafting
        self.reliability = reliability
        self.limits = limits
        self.draft_stream = draft_stream
        self.device_index = device_index
        self.session_seq = session_seq
        self.draft_model_name = draft_model_name
        self.draft_ahead_limit = (
            draft_ahead_limit
            if draft_ahead_limit is not None
            else 2 * nominal_block_length(drafting)
        )

        self.state = DeviceState(committed=list(prompt), prompt_len=len(prompt))
        self.session_id = self._new_session_id()
        # Model states for every chain prefix: _states[i] covers chain[:i].
        self._states = [draft.init_state()]
        for tok in prompt:
            self._states.append(draft.advance(self._states[-1], tok))
        self._probe_buffer: list[_Drafted] = []
        self._timer_seq = 0
        self._next_request_id = 1
        self._draft_seq = 0
        self.draft_conf: list[float] = []
        self.draft_verdict: list[int] = []
        self.request_log: list[dict] = []
        self.stats = {
            "drafted": 0,
            "requests": 0,
            "retries": 0,
            "timeouts": 0,
            "responses": 0,
            "stale_responses": 0,
            "fallback_releases": 0,
            "sessions": 1,
        }
        if limits.max_tokens <= 0:
            self.state.done = True

    # -- session/identity helpers -------------------------------------------

    def _new_session_id(self) -> int:
        sid = self.device_index * 1_000_000 + self.session_seq
        self.session_seq += 1
        return sid

    def _new_request_id(self) -> int:
        rid = (self.device_index << 40) | self._next_request_id
        self._next_request_id += 1
        return rid

    @property
    def output_len(self) -> int:
        return len(self.state.emitted)

    # -- drafting interface for drivers --------------------------------------

    def wants_draft(self) -> bool:
        st = self.state
        if st.done:
            return False
        if st.fallback_mode:
            return True
        if self._eos_pending():
            return False
        if st.in_flight is not None:
            return len(st.draft_ahead) < self.draft_ahead_limit
        return True

    def _eos_pending(self) -> bool:
        eos = self.limits.eos
        if eos is None:
            return False
        st = self.state
        pending = st.in_flight.entries if st.in_flight else st.buffer
        return any(d.token == eos for d in pending) or any(
            d.token == eos for d in st.draft_ahead
        )

    def draft_one(self, now_ms: float) -> list[Action]:
        """Sample the next token (keyed by absolute chain position) and feed it
        through the state machine."""
        pos = len(self._states) - 1
        u = self.draft_stream.uniform_at(pos)
        token, conf = sample_from_state(self.draft, self._states[-1], u)
        seq = self._draft_seq
        self._draft_seq += 1
        self.draft_conf.append(conf)
        self.draft_verdict.append(PENDING)
        self.stats["drafted"] += 1
        return self.step(TokenDrafted(token, conf, seq), now_ms)

    # -- chain/state maintenance ----------------------------------------------

    def _chain_push(self, token: int):
        self._states.append(self.draft.advance(self._states[-1], token))

    def _chain_rollback(self, length: int):
        del self._states[length + 1:]

    # -- emission --------------------------------------------------------------

    def _emit(self, tokens: list[int], provenance: str, now_ms: float,
              out: list[Action]):
        st = self.state
        batch: list[EmittedToken] = []
        for tok in tokens:
            if len(st.emitted) + len(batch) >= self.limits.max_tokens:
                st.done = True
                break
            batch.append(
                EmittedToken(len(st.emitted) + len(batch), tok, provenance, now_ms)
            )
            if self.limits.eos is not None and tok == self.limits.eos:
                st.done = True
                break
        st.emitted.extend(batch)
        if batch:
            out.append(EmitTokens(tuple(batch)))
        if len(st.emitted) >= self.limits.max_tokens:
            st.done = True

    # -- request construction ---------------------------------------------------

    def _send_block(self, entries: list[_Drafted], now_ms: float,
                    out: list[Action], probe: bool = False):
        st = self.state
        rid = self._new_request_id()
        base = len(st.committed) - (len(entries) if probe else 0)
        msgs: list[Message] = []
        init: tuple[Message, ...] = ()
        if probe or not st.synced:
            self.session_id = self._new_session_id()
            self.stats["sessions"] += 1
            init = (SessionInit(self.session_id, tuple(st.committed[:base]),
                                self.draft_model_name),)
            if not probe:
                st.synced = True
        msgs.extend(init)
        msgs.append(
            VerifyRequest(
                self.session_id,
                rid,
                base,
                tuple(d.token for d in entries),
                tuple(d.confidence for d in entries),
            )
        )
        self._timer_seq += 1
        st.in_flight = _InFlight(
            base=base,
            entries=list(entries),
            ids={rid},
            latest_id=rid,
            first_send_ms=now_ms,
            probe=probe,
            timer_id=self._timer_seq,
            with_init=init,
        )
        self.request_log.append({
            "base": base,
            "length": len(entries),
            "last_confidence": entries[-1].confidence,
            "last_token": entries[-1].token,
            "probe": probe,
        })
        self.stats["requests"] += 1
        out.append(SendRequest(tuple(msgs)))
        out.append(ArmTimer(self._timer_seq,
                            now_ms + self.reliability.timeout_ms))

    def _trigger_index(self, entries: list[_Drafted]) -> int | None:
        """Earliest 1-based index at which the drafting policy (or a drafted
        EOS) demands verification."""
        eos = self.limits.eos
        for i, d in enumerate(entries, start=1):
            if eos is not None and d.token == eos:
                return i
            if drafting_decision(d.confidence, i, self.drafting) == REQUEST_VERIFICATION:
                return i
        return None

    def _flush_buffer(self, now_ms: float, out: list[Action]):
        st = self.state
        if st.done or st.in_flight is not None or not st.buffer:
            return
        k = self._trigger_index(st.buffer)
        if k is None:
            return
        block, rest = st.buffer[:k], st.buffer[k:]
        st.buffer = []
        st.draft_ahead = rest
        self._send_block(block, now_ms, out)

    # -- the state machine -------------------------------------------------------

    def step(self, event: DeviceEvent, now_ms: float) -> list[Action]:
        out: list[Action] = []
        if self.state.done:
            return out
        if isinstance(event, TokenDrafted):
            self._on_drafted(event, now_ms, out)
        elif isinstance(event, ResponseArrived):
            self._on_response(event.response, now_ms, out)
        else:
            self._on_timeout(event, now_ms, out)
        return out

    def _on_drafted(self, ev: TokenDrafted, now_ms: float, out: list[Action]):
        st = self.state
        entry = _Drafted(ev.token, ev.confidence, ev.draft_seq)
        if st.fallback_mode:
            st.committed.append(ev.token)
            self._chain_push(ev.token)
            if ev.draft_seq >= 0:
                self.draft_verdict[ev.draft_seq] = RELEASED
            self._emit([ev.token], PROV_FALLBACK, now_ms, out)
            if st.done:
                return
            self._probe_buffer.append(entry)
            if self._trigger_index(self._probe_buffer) is not None:
                if st.in_flight is None:
                    self._send_block(self._probe_buffer, now_ms, out, probe=True)
                self._probe_buffer = []
            return
        self._chain_push(ev.token)
        if st.in_flight is not None:
            st.draft_ahead.append(entry)
            return
        st.buffer.append(entry)
        self._flush_buffer(now_ms, out)

    def _settle_verdicts(self, block: list[_Drafted], accepted: int,
                         rejected: bool, discards: list[_Drafted]):
        for i, d in enumerate(block):
            if d.seq < 0:
                continue
            if i < accepted:
                self.draft_verdict[d.seq] = ACCEPTED
            elif rejected and i == accepted:
                self.draft_verdict[d.seq] = REJECTED
        for d in discards:
            if d.seq >= 0 and self.draft_verdict[d.seq] == PENDING:
                self.draft_verdict[d.seq] = DISCARDED

    def _on_response(self, resp: VerifyResponse, now_ms: float, out: list[Action]):
        st = self.state
        flight = st.in_flight
        if (
            flight is None
            or resp.session_id != self.session_id
            or resp.request_id not in flight.ids
        ):
            self.stats["stale_responses"] += 1
            return
        self.stats["responses"] += 1
        if flight.probe:
            # Connectivity is back; leave draft-only mode and re-sync lazily.
            st.in_flight = None
            st.fallback_mode = False
            st.consecutive_failures = 0
            st.synced = False
            self._probe_buffer = []
            return
        n = len(flight.entries)
        j = resp.accepted_count
        if j > n or (resp.corrective_token is not None and j >= n):
            self.stats["stale_responses"] += 1
            return
        st.consecutive_failures = 0
        base_len = flight.base
        if resp.corrective_token is not None:
            committed_new = [d.token for d in flight.entries[:j]]
            committed_new.append(resp.corrective_token)
            self._settle_verdicts(flight.entries, j, True,
                                  flight.entries[j + 1:] + st.draft_ahead)
            st.committed[base_len:] = committed_new
            self._chain_rollback(base_len + j)
            self._chain_push(resp.corrective_token)
            st.draft_ahead = []
            st.in_flight = None
            self._emit(committed_new, PROV_VERIFIED, now_ms, out)
        elif j == n:
            self._settle_verdicts(flight.entries, j, False, [])
            st.committed.extend(d.token for d in flight.entries)
            st.buffer = st.draft_ahead
            st.draft_ahead = []
            st.in_flight = None
            self._emit([d.token for d in flight.entries], PROV_VERIFIED, now_ms, out)
        else:
            # Partial coverage without a rejection: a cached replay of a shorter
            # retry ancestor.  Commit the verified prefix and immediately
            # re-request the remainder (already policy-approved); draft-ahead
            # tokens keep extending it.
            self._settle_verdicts(flight.entries[:j], j, False, [])
            st.committed.extend(d.token for d in flight.entries[:j])
            remainder = flight.entries[j:]
            st.in_flight = None
            self._emit([d.token for d in flight.entries[:j]], PROV_VERIFIED,
                       now_ms, out)
            if not st.done:
                self._send_block(remainder, now_ms, out)
                return
        if st.done:
            if st.synced:
                out.append(SendRequest((SessionClose(self.session_id),)))
            return
        self._flush_buffer(now_ms, out)

    def _on_timeout(self, ev: TimeoutFired, now_ms: float, out: list[Action]):
        st = self.state
        flight = st.in_flight
        if flight is None or ev.timer_id != flight.timer_id:
            return
        self.stats["timeouts"] += 1
        st.consecutive_failures += 1
        rel = self.reliability
        if flight.probe:
            st.in_flight = None
            return
        if st.consecutive_failures >= rel.fallback_failure_threshold:
            if not rel.fallback_enabled:
                raise TransportFatal(
                    f"{st.consecutive_failures} consecutive verification failures"
                )
            released = flight.entries + st.draft_ahead
            for d in released:
                if d.seq >= 0:
                    self.draft_verdict[d.seq] = RELEASED
            st.committed[flight.base:] = [d.token for d in released]
            # Chain already covers these tokens; no state rebuild needed.
            st.in_flight = None
            st.draft_ahead = []
            st.buffer = []
            st.fallback_mode = True
            st.synced = False
            self._probe_buffer = []
            self.stats["fallback_releases"] += 1
            out.append(ReleaseFallback(len(released)))
            self._emit([d.token for d in released], PROV_FALLBACK, now_ms, out)
            return
        if flight.retries < rel.max_retries_per_request:
            flight.entries.extend(st.draft_ahead)
            st.draft_ahead = []
            flight.retries += 1
            rid = self._new_request_id()
            flight.ids.add(rid)
            flight.latest_id = rid
            self._timer_seq += 1
            flight.timer_id = self._timer_seq
            msgs = flight.with_init + (
                VerifyRequest(
                    self.session_id,
                    rid,
                    flight.base,
                    tuple(d.token for d in flight.entries),
                    tuple(d.confidence for d in flight.entries),
                ),
            )
            self.stats["retries"] += 1
            out.append(SendRequest(msgs))
            out.append(ArmTimer(flight.timer_id, now_ms + rel.timeout_ms))
            return
        # Retries exhausted below the fallback threshold: abandon this request
        # and immediately re-request the same tokens under a fresh id.
        st.buffer = flight.entries + st.draft_ahead
        st.draft_ahead = []
        st.in_flight = None
        self._flush_buffer(now_ms, out)
