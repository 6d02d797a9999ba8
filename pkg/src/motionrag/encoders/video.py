"""Object-level video encoder over precomputed per-frame features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import DomainError, uniform_init
from . import layers as L
from .base import Encoder


@dataclass(frozen=True)
class FrameFeatureSequence:
    features: np.ndarray  # (frames, d_frame)

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise DomainError(f"frame features must be (frames, dim), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise DomainError("frame features contain non-finite values")
        object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class ObjectEncoderConfig:
    d_frame: int
    d_emb: int = 32
    seed: int = 0


class ObjectEncoder(Encoder):
    """Mean over frames, linear projection, L2 norm.

    Also used as the motion branch of the evaluation co-embedder, where the
    "frames" are motion feature frames.
    """

    def __init__(self, config: ObjectEncoderConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng([config.seed, 5])
        self.params = {
            "proj.w": uniform_init(rng, config.d_frame, (config.d_frame, config.d_emb)),
            "proj.b": np.zeros(config.d_emb),
        }

    def forward(self, batch) -> np.ndarray:
        if isinstance(batch, FrameFeatureSequence):
            batch = [batch]
        if isinstance(batch, np.ndarray) and batch.ndim == 3:
            pooled = batch.mean(axis=1)
        else:
            if not len(batch):
                raise DomainError("empty frame batch")
            pooled = np.stack([np.asarray(getattr(b, "features", b), dtype=np.float64).mean(axis=0)
                               for b in batch])
        if pooled.shape[1] != self.config.d_frame:
            raise DomainError(f"frame dim {pooled.shape[1]} != {self.config.d_frame}")
        z, _ = L.linear(pooled, self.params["proj.w"], self.params["proj.b"])
        y, c_norm = L.l2_normalize(z)
        self._cache = (pooled, c_norm)
        return y

    def encode(self, frames) -> np.ndarray:
        y = self.forward([frames])[0]
        self._cache = None
        return y

    def backward(self, dy) -> dict[str, np.ndarray]:
        pooled, c_norm = self._take_cache()
        grads = self.zero_grads()
        dz = L.l2_normalize_backward(np.asarray(dy, dtype=np.float64), c_norm)
        _, grads["proj.w"], grads["proj.b"] = L.linear_backward(dz, pooled, self.params["proj.w"])
        return grads
