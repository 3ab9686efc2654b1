"""Language-model capability plus the two desk-scale model families.

Models are immutable and deterministic in context; all sampling randomness
comes from caller-supplied RngStreams.  The incremental state API
(``init_state``/``advance``/``probs_from_state``) lets agents extend contexts
token by token without rehashing whole histories.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DomainError, EmptyCorpus, VocabMismatch
from .rng import RngStream, hash_labels, splitmix64
from .specdec import ProbVector
from .tokenizer import Tokenizer

_CTX_ROOT = hash_labels(0x45444744, "context")


@dataclass(frozen=True)
class ModelProfile:
    """Simulated performance profile: standalone autoregressive rate on its
    host plus average power draw.  Calibration input, not a measurement."""

    name: str
    tokens_per_second: float
    watts_avg: float = 0.0
    quant_bits: int = 16

    def __post_init__(self):
        if self.tokens_per_second <= 0:
            raise DomainError("tokens_per_second must be > 0")
        if self.watts_avg < 0:
            raise DomainError("watts_avg must be >= 0")
        if self.quant_bits not in (16, 8, 4):
            raise DomainError("quant_bits must be one of 16, 8, 4")


DEFAULT_PROFILE = ModelProfile(name="mock", tokens_per_second=10.0)


class LanguageModel:
    """Shared capability of drafters and verifiers."""

    vocab_size: int
    profile: ModelProfile
    tokenizer: Tokenizer | None = None

    def init_state(self):
        raise NotImplementedError

    def advance(self, state, token: int):
        raise NotImplementedError

    def probs_from_state(self, state) -> np.ndarray:
        raise NotImplementedError

    def state_for(self, context: Sequence[int]):
        state = self.init_state()
        for tok in context:
            state = self.advance(state, tok)
        return state

    def _check_context(self, context: Sequence[int]):
        for tok in context:
            if not (0 <= tok < self.vocab_size):
                raise VocabMismatch(
                    f"context token {tok} outside vocabulary of {self.vocab_size}"
                )

    def next_distribution(self, context: Sequence[int]) -> ProbVector:
        self._check_context(context)
        return ProbVector._trusted(self.probs_from_state(self.state_for(context)))


class SeededCategoricalModel(LanguageModel):
    """Hash-seeded categorical mock model.

    Each context gets a reproducible distribution whose peakedness grows with
    `concentration` and which reserves `eos_floor` mass for `eos_token`.  An
    optional `anchor` model blends in: probs = (1-drift)·anchor + drift·own,
    giving a dialable draft/target quality gap (drift=0 clones the anchor).
    """

    def __init__(
        self,
        vocab_size: int,
        seed: int,
        concentration: float = 4.0,
        eos_token: int | None = None,
        eos_floor: float = 0.0005,
        anchor: "SeededCategoricalModel | None" = None,
        drift: float = 1.0,
        profile: ModelProfile = DEFAULT_PROFILE,
    ):
        if vocab_size < 2:
            raise DomainError("vocab_size must be >= 2")
        if concentration < 0:
            raise DomainError("concentration must be >= 0")
        if not (0.0 <= eos_floor < 1.0):
            raise DomainError("eos_floor must be in [0, 1)")
        if not (0.0 <= drift <= 1.0):
            raise DomainError("drift must be in [0, 1]")
        if anchor is not None and anchor.vocab_size != vocab_size:
            raise VocabMismatch("anchor vocabulary size differs")
        self.vocab_size = vocab_size
        self.seed = seed
        self.concentration = concentration
        self.eos_token = eos_token if eos_token is not None else vocab_size - 1
        self.eos_floor = eos_floor
        self.anchor = anchor
        self.drift = drift
        self.profile = profile
        self._seed_mix = hash_labels(seed, "scm")

    def init_state(self) -> int:
        return _CTX_ROOT

    def advance(self, state: int, token: int) -> int:
        return splitmix64(state ^ (token + 1))

    def probs_from_state(self, state: int) -> np.ndarray:
        own = kernels.categorical_probs(
            splitmix64(state ^ self._seed_mix),
            self.vocab_size,
            self.concentration,
            self.eos_token,
            self.eos_floor,
        )
        if self.anchor is None or self.drift >= 1.0:
            return own
        base = self.anchor.probs_from_state(state)
        return kernels.blend(base, own, self.drift)


class ConstantModel(LanguageModel):
    """Context-free model returning one fixed distribution (test workhorse)."""

    def __init__(self, probs, profile: ModelProfile = DEFAULT_PROFILE,
                 eos_token: int | None = None):
        vec = probs if isinstance(probs, ProbVector) else ProbVector(probs)
        self._probs = vec.probs
        self.vocab_size = len(vec)
        self.eos_token = eos_token if eos_token is not None else self.vocab_size - 1
        self.profile = profile

    def init_state(self):
        return None

    def advance(self, state, token: int):
        return None

    def probs_from_state(self, state) -> np.ndarray:
        return self._probs


class NgramModel(LanguageModel):
    """Additively smoothed n-gram model trained from a token stream.

    p(x | ctx) = (count(ctx, x) + delta) / (total(ctx) + delta·V), with ctx the
    last (order-1) tokens; unseen contexts fall back to the uniform smoothing
    mass, so every distribution has full support.
    """

    def __init__(
        self,
        order: int,
        vocab_size: int,
        counts: dict[tuple[int, ...], np.ndarray],
        delta: float,
        tokenizer: Tokenizer | None = None,
        eos_token: int | None = None,
        profile: ModelProfile = DEFAULT_PROFILE,
    ):
        if order < 1:
            raise DomainError("order must be >= 1")
        if delta <= 0:
            raise DomainError("smoothing delta must be > 0")
        self.order = order
        self.vocab_size = vocab_size
        self.counts = counts
        self.delta = delta
        self.tokenizer = tokenizer
        self.eos_token = eos_token if eos_token is not None else vocab_size - 1
        self.profile = profile
        self._row_cache: dict[tuple[int, ...], np.ndarray] = {}
        self._uniform = np.full(vocab_size, 1.0 / vocab_size)

    def init_state(self) -> tuple[int, ...]:
        return ()

    def advance(self, state: tuple[int, ...], token: int) -> tuple[int, ...]:
        if self.order == 1:
            return ()
        return (state + (token,))[-(self.order - 1):]

    def probs_from_state(self, state: tuple[int, ...]) -> np.ndarray:
        cached = self._row_cache.get(state)
        if cached is not None:
            return cached
        row = self.counts.get(state)
        if row is None:
            probs = self._uniform
        else:
            total = float(row.sum())
            probs = (row + self.delta) / (total + self.delta * self.vocab_size)
        self._row_cache[state] = probs
        return probs


def train_ngram(
    corpus_path: str | Path,
    order: int,
    delta: float,
    tokenizer: Tokenizer,
    profile: ModelProfile = DEFAULT_PROFILE,
) -> NgramModel:
    """Single-pass n-gram counter over a UTF-8 corpus, shared-tokenizer encoded."""
    if order < 1:
        raise DomainError("order must be >= 1")
    text = Path(corpus_path).read_text(encoding="utf-8")
    stream = tokenizer.encode(text)
    if not stream:
        raise EmptyCorpus(f"corpus {corpus_path} has no tokens")
    vocab = tokenizer.vocab_size
    counts: dict[tuple[int, ...], np.ndarray] = {}
    k = order - 1
    for i in range(k, len(stream)):
        ctx = tuple(stream[i - k:i])
        row = counts.get(ctx)
        if row is None:
            row = np.zeros(vocab, dtype=np.float64)
            counts[ctx] = row
        row[stream[i]] += 1.0
    return NgramModel(order, vocab, counts, delta, tokenizer=tokenizer,
                      profile=profile)


def sample_token(
    model: LanguageModel, context: Sequence[int], rng: RngStream
) -> tuple[int, float]:
    """Draw one token by inverse CDF over ascending ids; confidence is the
    distribution's probability of the returned token."""
    dist = model.next_distribution(context)
    token = kernels.sample_index(dist.probs, rng.uniform())
    return token, float(dist.probs[token])


def sample_from_state(model: LanguageModel, state, u: float) -> tuple[int, float]:
    probs = model.probs_from_state(state)
    token = kernels.sample_index(probs, u)
    return token, float(probs[token])


def check_pairing(draft: LanguageModel, target: LanguageModel):
    """Enforce the shared-tokenizer constraint for a draft/target pairing."""
    if draft.vocab_size != target.vocab_size:
        raise ConfigError(
            f"draft vocab {draft.vocab_size} != target vocab {target.vocab_size}"
        )
    dh = draft.tokenizer.content_hash if draft.tokenizer else None
    th = target.tokenizer.content_hash if target.tokenizer else None
    if dh != th:
        raise ConfigError("draft and target tokenizers are not byte-identical")


class ModelRegistry:
    """Named models the verification server can resolve for residual sampling."""

    def __init__(self, target: LanguageModel):
        self.target = target
        self._models: dict[str, LanguageModel] = {}

    def register(self, name: str, model: LanguageModel):
        check_pairing(model, self.target)
        self._models[name] = model

    def resolve(self, name: str) -> LanguageModel:
        model = self._models.get(name)
        if model is None:
            from .errors import UnknownModel

            raise UnknownModel(f"no registered draft model named {name!r}")
        return model

    def names(self) -> list[str]:
        return sorted(self._models)
