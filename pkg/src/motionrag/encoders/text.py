"""Whitespace vocabulary and the embedding-bag text encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import DomainError, uniform_init
from . import layers as L
from .base import Encoder

CONTEXT_CAP = 77
UNK = "<unk>"
# distinct init streams so channels never share parameters at a common seed
_CHANNEL_STREAM = {"predicate": 1, "argument": 2, "context": 3, "evaluator": 4}


class Vocabulary:
    """Token list with ``<unk>`` at index 0; file format is one token per line."""

    def __init__(self, tokens):
        toks = [UNK] + [t for t in dict.fromkeys(tokens) if t != UNK]
        self.tokens = toks
        self.index = {t: i for i, t in enumerate(toks)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        return cls(sorted({w for t in texts for w in t.split()}))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(t + "\n" for t in self.tokens)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])

    def tokenize(self, text: str, cap: int = CONTEXT_CAP) -> "TokenizedText":
        words = text.split()
        if not words:
            raise DomainError("cannot tokenize empty text")
        return TokenizedText(np.array([self.index.get(w, 0) for w in words[:cap]], dtype=np.int64),
                             vocab_size=len(self))


@dataclass(frozen=True)
class TokenizedText:
    ids: np.ndarray
    vocab_size: int
    cap: int = CONTEXT_CAP

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise DomainError("text must contain at least one token")
        if ids.size > self.cap:
            raise DomainError(f"text has {ids.size} tokens, cap is {self.cap}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise DomainError("token id outside vocabulary")
        object.__setattr__(self, "ids", ids)


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    width: int = 32
    d_emb: int = 32
    channel: str = "predicate"
    seed: int = 0


class TextEncoder(Encoder):
    """Embedding lookup, mean over positions, linear projection, L2 norm."""

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        if config.channel not in _CHANNEL_STREAM:
            raise ValueError(f"unknown text channel {config.channel!r}")
        self.config = config
        rng = np.random.default_rng([config.seed, _CHANNEL_STREAM[config.channel]])
        self.params = {
            "embed": rng.normal(0.0, 1.0, size=(config.vocab_size, config.width)),
            "proj.w": uniform_init(rng, config.width, (config.width, config.d_emb)),
            "proj.b": np.zeros(config.d_emb),
        }

    def forward(self, texts) -> np.ndarray:
        if isinstance(texts, TokenizedText):
            texts = [texts]
        if not texts:
            raise DomainError("empty text batch")
        for t in texts:
            if t.ids.max() >= self.config.vocab_size:
                raise DomainError("token id outside this encoder's vocabulary")
        emb = self.params["embed"]
        pooled = np.stack([emb[t.ids].mean(axis=0) for t in texts])
        z, _ = L.linear(pooled, self.params["proj.w"], self.params["proj.b"])
        y, c_norm = L.l2_normalize(z)
        self._cache = (texts, pooled, c_norm)
        return y

    def encode(self, text: TokenizedText) -> np.ndarray:
        y = self.forward([text])[0]
        self._cache = None
        return y

    def backward(self, dy) -> dict[str, np.ndarray]:
        texts, pooled, c_norm = self._take_cache()
        grads = self.zero_grads()
        dz = L.l2_normalize_backward(np.asarray(dy, dtype=np.float64), c_norm)
        dpooled, grads["proj.w"], grads["proj.b"] = L.linear_backward(dz, pooled, self.params["proj.w"])
        for t, dp in zip(texts, dpooled):
            np.add.at(grads["embed"], t.ids, dp / t.ids.size)
        return grads
