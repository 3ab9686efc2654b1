"""Shared verification server: session store, FIFO queue, static batcher.

Transport-agnostic core.  The socket loop lives in ``sockets``; the simulated
driver in ``netsim``.  Retries are idempotent: a session has at most one queued
request (a newer request for the same base position replaces it in place), and
a request whose base position was already applied is answered from the
session's cached response instead of being re-verified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StaleRequest, UnknownModel, UnknownSession, VocabMismatch
from .models import LanguageModel, ModelRegistry
from .protocol import SessionClose, SessionInit, VerifyRequest, VerifyResponse
from .rng import RngStream
from .specdec import DraftBlock, verify_from_states

METRICS_FIELDS = ("time_ms", "queue_depth", "batch_size", "tokens_verified",
                  "tokens_rejected")


@dataclass(frozen=True)
class ServiceTimeModel:
    """Affine simulated latency of one batched verification pass."""

    base_ms: float = 140.0
    per_sequence_ms: float = 1.5
    per_token_ms: float = 0.2

    def __post_init__(self):
        if min(self.base_ms, self.per_sequence_ms, self.per_token_ms) < 0:
            raise ValueError("service-time parameters must be >= 0")

    def batch_latency_ms(self, sequences: int, padded_len: int) -> float:
        return (
            self.base_ms
            + self.per_sequence_ms * sequences
            + self.per_token_ms * padded_len * sequences
        )


@dataclass(frozen=True)
class ServerConfig:
    batch_size: int = 4
    batch_timeout_ms: float = 50.0  # 0 disables flushing: strict static batching
    service: ServiceTimeModel = ServiceTimeModel()

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.batch_timeout_ms < 0:
            raise ValueError("batch_timeout_ms must be >= 0")


@dataclass
class SessionRecord:
    session_id: int
    committed: list[int]
    draft_model_name: str
    draft_model: LanguageModel
    rng: RngStream
    state_t: object
    state_d: object
    requests: int = 0
    accepted_tokens: int = 0
    rejected_tokens: int = 0
    corrective_tokens: int = 0
    last_applied_base: int = -1
    last_response: VerifyResponse | None = None
    closed: bool = False


@dataclass
class _QueueEntry:
    arrival_ms: float
    seq: int
    request: object


class FifoBatchQueue:
    """FIFO by arrival time, ties broken by (session_id, request_id); at most
    one queued request per session (newer ones supersede in place)."""

    def __init__(self, batch_size: int, batch_timeout_ms: float):
        self.batch_size = batch_size
        self.batch_timeout_ms = batch_timeout_ms
        self.entries: list[_QueueEntry] = []
        self._seq = 0
        self.superseded = 0

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, request, arrival_ms: float) -> int:
        for pos, entry in enumerate(self.entries):
            if entry.request.session_id == request.session_id:
                entry.request = request
                self.superseded += 1
                return pos
        self._seq += 1
        self.entries.append(_QueueEntry(arrival_ms, self._seq, request))
        self.entries.sort(
            key=lambda e: (e.arrival_ms, e.request.session_id, e.request.request_id)
        )
        return len(self.entries) - 1

    def drop_session(self, session_id: int):
        self.entries = [e for e in self.entries
                        if e.request.session_id != session_id]

    def oldest_arrival_ms(self) -> float | None:
        return self.entries[0].arrival_ms if self.entries else None

    def plan(self, now_ms: float) -> list:
        """First min(B, len) requests once the queue holds a full batch, or
        once the oldest entry has waited past batch_timeout; else empty.
        batch_timeout == 0 means strict static batching (never flush)."""
        if not self.entries:
            return []
        # Compare against arrival+timeout computed exactly as schedulers do,
        # so a flush event firing at that instant always passes this test.
        flush = (
            self.batch_timeout_ms > 0
            and now_ms >= self.entries[0].arrival_ms + self.batch_timeout_ms
        )
        if len(self.entries) < self.batch_size and not flush:
            return []
        return [e.request for e in self.entries[: self.batch_size]]

    def take(self, now_ms: float) -> list:
        batch = self.plan(now_ms)
        if batch:
            del self.entries[: len(batch)]
        return batch


@dataclass
class BatchResult:
    responses: list[VerifyResponse]
    started_ms: float
    finished_ms: float
    sequences: int
    padded_len: int


class VerifyServer:
    def __init__(
        self,
        config: ServerConfig,
        target: LanguageModel,
        registry: ModelRegistry,
        root_seed: int,
    ):
        self.config = config
        self.target = target
        self.registry = registry
        self.root_seed = root_seed
        self.pad_token = target.vocab_size  # reserved id one past the vocabulary
        self.sessions: dict[int, SessionRecord] = {}
        self.queue = FifoBatchQueue(config.batch_size, config.batch_timeout_ms)
        self.metrics_rows: list[dict] = []
        self.stats = {
            "requests": 0,
            "replayed": 0,
            "dropped_unknown_session": 0,
            "dropped_unknown_model": 0,
            "dropped_desync": 0,
            "dropped_stale": 0,
            "dropped_vocab": 0,
            "batches": 0,
            "superseded": 0,
        }

    # -- session management ----------------------------------------------------

    def session_init(self, msg: SessionInit):
        record = self.sessions.get(msg.session_id)
        prompt = list(msg.prompt_tokens)
        if record is not None and record.committed[: len(prompt)] == prompt and not (
            record.closed
        ):
            # Idempotent re-init: the same prompt keeps any applied progress.
            return
        try:
            draft = self.registry.resolve(msg.draft_model_name)
        except UnknownModel:
            self.stats["dropped_unknown_model"] += 1
            return
        self.sessions[msg.session_id] = SessionRecord(
            session_id=msg.session_id,
            committed=prompt,
            draft_model_name=msg.draft_model_name,
            draft_model=draft,
            rng=RngStream.derive(self.root_seed, "verify", msg.session_id),
            state_t=self.target.state_for(prompt),
            state_d=draft.state_for(prompt),
        )

    def session_close(self, msg: SessionClose):
        record = self.sessions.get(msg.session_id)
        if record is not None:
            record.closed = True
        self.queue.drop_session(msg.session_id)

    # -- queueing ---------------------------------------------------------------

    def enqueue(self, request: VerifyRequest, arrival_ms: float) -> int:
        """FIFO insert; raises on unknown sessions and stale base positions.

        Returns the queue position.  A queued request from the same session is
        superseded in place (retries carry the same base with more tokens).
        """
        record = self.sessions.get(request.session_id)
        if record is None or record.closed:
            raise UnknownSession(f"session {request.session_id}")
        if request.base_position != len(record.committed):
            raise StaleRequest(
                f"base {request.base_position} != committed {len(record.committed)}"
            )
        pos = self.queue.add(request, arrival_ms)
        self.stats["superseded"] = self.queue.superseded
        return pos

    def submit(self, request: VerifyRequest, arrival_ms: float) -> VerifyResponse | None:
        """Loop-facing enqueue: replays or drops instead of raising.

        Returns a response to send immediately when the request was already
        answered (cached replay), else None.
        """
        self.stats["requests"] += 1
        record = self.sessions.get(request.session_id)
        if record is None or record.closed:
            self.stats["dropped_unknown_session"] += 1
            return None
        base = request.base_position
        if base == len(record.committed):
            self.enqueue(request, arrival_ms)
            return None
        if base == record.last_applied_base and record.last_response is not None:
            self.stats["replayed"] += 1
            prior = record.last_response
            return VerifyResponse(request.session_id, request.request_id,
                                  prior.accepted_count, prior.corrective_token)
        if base > len(record.committed):
            self.stats["dropped_desync"] += 1
        else:
            self.stats["dropped_stale"] += 1
        return None

    def plan_batch(self, now_ms: float) -> list[VerifyRequest]:
        return self.queue.plan(now_ms)

    def take_batch(self, now_ms: float) -> list[VerifyRequest]:
        return self.queue.take(now_ms)

    # -- execution ----------------------------------------------------------------

    def execute_batch(self, batch: list[VerifyRequest], start_ms: float) -> BatchResult:
        """Verify each request independently with its session's RngStream.

        Blocks are padded to the batch maximum with the reserved pad token and
        the padded positions are masked out of verification, so outcomes are
        bit-identical to solo runs.  Simulated completion time advances by the
        ServiceTimeModel on the padded shape.
        """
        cfg = self.config
        n = len(batch)
        padded_len = max(len(r.tokens) for r in batch) if batch else 0
        tokens_mat = np.full((n, padded_len), self.pad_token, dtype=np.int64)
        probs_mat = np.ones((n, padded_len), dtype=np.float64)
        lengths = np.zeros(n, dtype=np.int64)
        for i, req in enumerate(batch):
            k = len(req.tokens)
            lengths[i] = k
            tokens_mat[i, :k] = req.tokens
            probs_mat[i, :k] = req.draft_probs

        finished = start_ms + cfg.service.batch_latency_ms(n, padded_len)
        responses: list[VerifyResponse] = []
        verified = 0
        rejected = 0
        for i, req in enumerate(batch):
            record = self.sessions.get(req.session_id)
            if record is None or record.closed:
                self.stats["dropped_unknown_session"] += 1
                continue
            if req.base_position != len(record.committed):
                resp = self.submit_stale_at_execute(record, req)
                if resp is not None:
                    responses.append(resp)
                continue
            k = int(lengths[i])
            row_tokens = tokens_mat[i, :k]
            if np.any(row_tokens >= self.target.vocab_size) or np.any(row_tokens < 0):
                self.stats["dropped_vocab"] += 1
                continue
            block = DraftBlock(tuple(int(t) for t in row_tokens),
                               tuple(float(p) for p in probs_mat[i, :k]))
            try:
                outcome, state_t, state_d = verify_from_states(
                    block, self.target, record.state_t,
                    record.draft_model, record.state_d, record.rng,
                )
            except VocabMismatch:
                self.stats["dropped_vocab"] += 1
                continue
            commit = list(block.tokens[: outcome.accepted_count])
            if outcome.corrective_token is not None:
                commit.append(outcome.corrective_token)
            base = len(record.committed)
            record.committed.extend(commit)
            record.state_t = state_t
            record.state_d = state_d
            record.requests += 1
            record.accepted_tokens += outcome.accepted_count
            if outcome.corrective_token is not None:
                record.rejected_tokens += 1
                record.corrective_tokens += 1
                rejected += 1
            verified += outcome.accepted_count
            resp = VerifyResponse(req.session_id, req.request_id,
                                  outcome.accepted_count, outcome.corrective_token)
            record.last_applied_base = base
            record.last_response = resp
            responses.append(resp)
        self.stats["batches"] += 1
        self.metrics_rows.append({
            "time_ms": finished,
            "queue_depth": len(self.queue),
            "batch_size": n,
            "tokens_verified": verified,
            "tokens_rejected": rejected,
        })
        return BatchResult(responses, start_ms, finished, n, padded_len)

    def submit_stale_at_execute(self, record: SessionRecord,
                                req: VerifyRequest) -> VerifyResponse | None:
        if (req.base_position == record.last_applied_base
                and record.last_response is not None):
            self.stats["replayed"] += 1
            prior = record.last_response
            return VerifyResponse(req.session_id, req.request_id,
                                  prior.accepted_count, prior.corrective_token)
        self.stats["dropped_stale"] += 1
        return None
