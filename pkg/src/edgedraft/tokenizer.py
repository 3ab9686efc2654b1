"""Whitespace tokenizer over a line-per-token vocabulary file.

Token id = line number (from 0).  Identity is the SHA-256 of the file bytes;
device and server models may only be paired when their vocabulary hashes are
byte-identical.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ConfigError, VocabMismatch

UNK = "<unk>"


class Tokenizer:
    def __init__(self, tokens: list[str], content_hash: str):
        if len(tokens) != len(set(tokens)):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.content_hash = content_hash
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def from_file(cls, path: str | Path) -> "Tokenizer":
        data = Path(path).read_bytes()
        tokens = data.decode("utf-8").splitlines()
        if not tokens:
            raise ConfigError(f"vocabulary file {path} is empty")
        return cls(tokens, hashlib.sha256(data).hexdigest())

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        unk = self._ids.get(UNK)
        out = []
        for word in text.split():
            tok = self._ids.get(word)
            if tok is None:
                if unk is None:
                    raise VocabMismatch(f"word {word!r} not in vocabulary")
                tok = unk
            out.append(tok)
        return out

    def decode(self, ids: list[int]) -> str:
        for i in ids:
            if not (0 <= i < len(self.tokens)):
                raise VocabMismatch(f"token id {i} outside vocabulary")
        return " ".join(self.tokens[i] for i in ids)
