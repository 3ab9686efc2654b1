"""Token distributions and the speculative accept/resample mechanism.

The committed output of draft-then-verify decoding follows the target model's
distribution exactly: a drafted token x with draft probability q is accepted
with min(1, p(x)/q), and on the first rejection a corrective token is drawn
from the normalized positive part of (target - draft).  ``lossless_oracle``
checks that claim by exhaustive path enumeration on small vocabularies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import DomainError, NoResidual, TooLarge, VocabMismatch
from .rng import RngStream

# Probability vectors must sum to 1 within SUM_TOL; construction renormalizes
# anything within RENORM_TOL and rejects the rest (absorbs float drift without
# hiding real bugs).
SUM_TOL = 1e-9
RENORM_TOL = 1e-6
# Entrywise tolerance under which target == draft and the residual is undefined.
RESIDUAL_TOL = 1e-12


class ProbVector:
    """A distribution over a finite token vocabulary."""

    __slots__ = ("probs",)

    def __init__(self, probs: Iterable[float]):
        arr = np.asarray(list(probs) if not isinstance(probs, np.ndarray) else probs,
                         dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] == 0:
            raise DomainError("probability vector must be 1-D and non-empty")
        if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
            raise DomainError("probabilities must be finite and non-negative")
        total = float(arr.sum())
        if abs(total - 1.0) > RENORM_TOL:
            raise DomainError(f"probabilities sum to {total!r}, not 1")
        arr = arr / total
        arr.flags.writeable = False
        self.probs = arr

    @classmethod
    def _trusted(cls, arr: np.ndarray) -> "ProbVector":
        """Wrap an already-normalized array without copying or checks."""
        vec = cls.__new__(cls)
        vec.probs = arr
        return vec

    def __len__(self) -> int:
        return self.probs.shape[0]

    def __getitem__(self, token: int) -> float:
        return float(self.probs[token])

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"ProbVector({self.probs.tolist()!r})"


@dataclass(frozen=True)
class DraftBlock:
    """An ordered run of drafted tokens with the draft probability of each.

    ``draft_probs[i]`` is the draft model's probability of ``tokens[i]`` given
    the committed context plus ``tokens[:i]``.
    """

    tokens: tuple[int, ...]
    draft_probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.tokens) == 0 or len(self.tokens) != len(self.draft_probs):
            raise DomainError("tokens and draft_probs must have equal nonzero length")
        for q in self.draft_probs:
            if not (0.0 < q <= 1.0):
                raise DomainError(f"draft probability {q!r} outside (0, 1]")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class VerifyOutcome:
    """Result of verifying one block: accepted prefix length, then a corrective
    token exactly when some draft position was rejected."""

    accepted_count: int
    corrective_token: int | None = None


def accept_probability(p_target_tok: float, p_draft_tok: float) -> float:
    """min(1, p_target/p_draft) — the acceptance test for one drafted token."""
    if not (0.0 <= p_target_tok <= 1.0):
        raise DomainError(f"target probability {p_target_tok!r} outside [0, 1]")
    if not (0.0 < p_draft_tok <= 1.0):
        raise DomainError(f"draft probability {p_draft_tok!r} outside (0, 1]")
    return min(1.0, p_target_tok / p_draft_tok)


def _residual_raw(p_target: np.ndarray, p_draft: np.ndarray) -> np.ndarray:
    if np.max(np.abs(p_target - p_draft)) <= RESIDUAL_TOL:
        raise NoResidual("target equals draft; rejection has probability 0")
    pos = np.clip(p_target - p_draft, 0.0, None)
    return pos / pos.sum()


def residual_distribution(p_target: ProbVector, p_draft: ProbVector) -> ProbVector:
    """Normalized positive part of (target - draft); the corrective-token law."""
    if len(p_target) != len(p_draft):
        raise VocabMismatch("distributions have different vocabulary sizes")
    return ProbVector._trusted(_residual_raw(p_target.probs, p_draft.probs))


def expected_acceptance_rate(p_target: ProbVector, p_draft: ProbVector) -> float:
    """Probability a draft sample is accepted: sum of min(target, draft)."""
    if len(p_target) != len(p_draft):
        raise VocabMismatch("distributions have different vocabulary sizes")
    return float(np.minimum(p_target.probs, p_draft.probs).sum())


def verify_block(
    block: DraftBlock,
    target,
    context: Sequence[int],
    rng: RngStream,
    draft,
) -> VerifyOutcome:
    """Sequentially accept/reject a drafted block against the target model.

    Consumes one uniform draw per draft position, plus one categorical draw at
    the first rejection (corrective token from the residual at that position).
    The acceptance test uses the block's transported draft probabilities; the
    residual consults the draft model's full distribution.
    """
    vocab = target.vocab_size
    if draft.vocab_size != vocab:
        raise VocabMismatch("draft and target vocabulary sizes differ")
    for tok in context:
        if not (0 <= tok < vocab):
            raise VocabMismatch(f"context token {tok} outside vocabulary of {vocab}")
    for tok in block.tokens:
        if not (0 <= tok < vocab):
            raise VocabMismatch(f"draft token {tok} outside vocabulary of {vocab}")
    state_t = target.state_for(context)
    state_d = draft.state_for(context)
    outcome, _, _ = verify_from_states(block, target, state_t, draft, state_d, rng)
    return outcome


def verify_from_states(
    block: DraftBlock,
    target,
    state_t,
    draft,
    state_d,
    rng: RngStream,
) -> tuple[VerifyOutcome, object, object]:
    """verify_block core working on incremental model states.

    Returns the outcome plus the advanced (target, draft) states covering the
    committed prefix (and corrective token, if any), so callers can keep
    per-session states without replaying contexts.
    """
    accepted = 0
    for tok, q in zip(block.tokens, block.draft_probs):
        p_t = target.probs_from_state(state_t)
        u = rng.uniform()
        if u < accept_probability(float(p_t[tok]), q):
            accepted += 1
            state_t = target.advance(state_t, tok)
            state_d = draft.advance(state_d, tok)
            continue
        p_d = draft.probs_from_state(state_d)
        try:
            res = _residual_raw(p_t, p_d)
        except NoResidual:
            # Unreachable with honest transported probabilities; degrade to the
            # target distribution, which is the residual's limit.
            res = p_t
        corrective = kernels.sample_index(res, rng.uniform())
        state_t = target.advance(state_t, corrective)
        state_d = draft.advance(state_d, corrective)
        return VerifyOutcome(accepted, corrective), state_t, state_d
    return VerifyOutcome(accepted, None), state_t, state_d


def autoregressive_distribution(
    model, prompt: Sequence[int], horizon: int
) -> dict[tuple[int, ...], float]:
    """Exact probability of each length-`horizon` continuation under `model`."""
    vocab = model.vocab_size
    frontier: dict[tuple[int, ...], float] = {(): 1.0}
    for _ in range(horizon):
        grown: dict[tuple[int, ...], float] = {}
        for prefix, prob in frontier.items():
            dist = model.next_distribution(tuple(prompt) + prefix).probs
            for tok in range(vocab):
                p = prob * float(dist[tok])
                if p > 0.0:
                    grown[prefix + (tok,)] = grown.get(prefix + (tok,), 0.0) + p
        frontier = grown
    return frontier


def lossless_oracle(
    draft,
    target,
    prompt: Sequence[int],
    horizon: int,
    gamma: int = 1,
    max_sequences: int = 65536,
) -> dict[tuple[int, ...], float]:
    """Exact committed-output distribution of draft/verify decoding.

    Enumerates every drafting path, acceptance pattern, and corrective choice
    for blocks of fixed speculative length `gamma`, and marginalizes onto the
    first `horizon` committed tokens.  Tractable only for tiny vocabularies;
    the losslessness property says the result equals
    ``autoregressive_distribution(target, prompt, horizon)``.
    """
    vocab = target.vocab_size
    if draft.vocab_size != vocab:
        raise VocabMismatch("draft and target vocabulary sizes differ")
    if gamma < 1:
        raise DomainError("speculative length must be >= 1")
    if horizon < 1:
        raise DomainError("horizon must be >= 1")
    if vocab > 8 or horizon > 4 or vocab**horizon > max_sequences:
        raise TooLarge(
            f"enumeration of {vocab}^{horizon} sequences exceeds the cap"
        )

    prompt = tuple(prompt)
    dist_cache: dict[tuple[int, tuple[int, ...]], np.ndarray] = {}

    def cached_dist(model, which: int, ctx: tuple[int, ...]) -> np.ndarray:
        key = (which, ctx)
        arr = dist_cache.get(key)
        if arr is None:
            arr = model.next_distribution(ctx).probs
            dist_cache[key] = arr
        return arr

    round_cache: dict[tuple[int, ...], dict[tuple[int, ...], float]] = {}

    def round_distribution(prefix: tuple[int, ...]) -> dict[tuple[int, ...], float]:
        """Distribution over the chunk committed by one verification round."""
        cached = round_cache.get(prefix)
        if cached is not None:
            return cached
        out: dict[tuple[int, ...], float] = {}

        def walk(ctx: tuple[int, ...], chunk: tuple[int, ...], weight: float):
            if len(chunk) == gamma:
                out[chunk] = out.get(chunk, 0.0) + weight
                return
            p_d = cached_dist(draft, 0, ctx)
            p_t = cached_dist(target, 1, ctx)
            overlap = np.minimum(p_t, p_d)
            reject_mass = 1.0 - float(overlap.sum())
            if reject_mass > 1e-15:
                res = np.clip(p_t - p_d, 0.0, None)
                res = res / res.sum()
                for y in range(vocab):
                    w = weight * reject_mass * float(res[y])
                    if w > 0.0:
                        key = chunk + (y,)
                        out[key] = out.get(key, 0.0) + w
            for x in range(vocab):
                # draft prob q times acceptance min(1, p/q) collapses to min(p, q)
                w_acc = weight * float(overlap[x])
                if w_acc > 0.0:
                    walk(ctx + (x,), chunk + (x,), w_acc)

        walk(prompt + prefix, (), 1.0)
        round_cache[prefix] = out
        return out

    result: dict[tuple[int, ...], float] = {}
    frontier: dict[tuple[int, ...], float] = {(): 1.0}
    while frontier:
        grown: dict[tuple[int, ...], float] = {}
        for prefix, prob in frontier.items():
            for chunk, chunk_prob in round_distribution(prefix).items():
                seq = (prefix + chunk)[:horizon]
                mass = prob * chunk_prob
                if len(seq) == horizon:
                    result[seq] = result.get(seq, 0.0) + mass
                else:
                    grown[seq] = grown.get(seq, 0.0) + mass
        frontier = grown
    return result
