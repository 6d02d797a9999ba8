"""Keypoint-sequence action encoder: per-frame projection, learnable frame
position embeddings, a pre-norm transformer stack with residuals, mean
pooling over frames and a final projection to a unit-norm embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import DomainError, uniform_init
from . import layers as L
from .base import Encoder


@dataclass(frozen=True)
class KeypointSequence:
    coords: np.ndarray                    # (frames, joints, 2) in [-1, 1]
    confidence: np.ndarray | None = None  # (frames, joints) in [0, 1]

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 3 or c.shape[2] != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise DomainError(f"keypoints must have shape (frames, joints, 2), got {c.shape}")
        if not np.all(np.isfinite(c)) or np.abs(c).max() > 1.0:
            raise DomainError("keypoint coordinates must be finite and within [-1, 1]")
        object.__setattr__(self, "coords", c)
        if self.confidence is not None:
            conf = np.asarray(self.confidence, dtype=np.float64)
            if conf.shape != c.shape[:2] or conf.min() < 0 or conf.max() > 1:
                raise DomainError("confidence must be (frames, joints) within [0, 1]")
            object.__setattr__(self, "confidence", conf)

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    def features(self) -> np.ndarray:
        """Flattened per-frame input; coordinates are confidence-weighted."""
        c = self.coords if self.confidence is None else self.coords * self.confidence[..., None]
        return c.reshape(c.shape[0], -1)


@dataclass(frozen=True)
class ActionEncoderConfig:
    n_joints: int = 17
    width: int = 64
    heads: int = 4
    layers: int = 2
    d_emb: int = 32
    max_frames: int = 16
    ffn_mult: int = 4
    whole_skip: bool = False
    seed: int = 0

    @classmethod
    def full_scale(cls, **kw) -> "ActionEncoderConfig":
        base = dict(width=768, heads=12, layers=4, d_emb=768, max_frames=77)
        base.update(kw)
        return cls(**base)


class ActionEncoder(Encoder):
    def __init__(self, config: ActionEncoderConfig = ActionEncoderConfig()):
        super().__init__()
        if config.width % config.heads:
            raise ValueError(f"heads ({config.heads}) must divide width ({config.width})")
        self.config = config
        rng = np.random.default_rng(config.seed)
        w, d_in, hid = config.width, 2 * config.n_joints, config.ffn_mult * config.width
        p = {
            "frame_proj.w": uniform_init(rng, d_in, (d_in, w)),
            "frame_proj.b": np.zeros(w),
            "pos_embed": uniform_init(rng, w, (config.max_frames, w)),
        }
        for i in range(config.layers):
            pre = f"blocks.{i}."
            p[pre + "ln1.g"] = np.ones(w)
            p[pre + "ln1.b"] = np.zeros(w)
            for n in ("q", "k", "v", "o"):
                p[pre + "attn.w" + n] = uniform_init(rng, w, (w, w))
                if n != "k":
                    p[pre + "attn.b" + n] = np.zeros(w)
            p[pre + "ln2.g"] = np.ones(w)
            p[pre + "ln2.b"] = np.zeros(w)
            p[pre + "ffn.w1"] = uniform_init(rng, w, (w, hid))
            p[pre + "ffn.b1"] = np.zeros(hid)
            p[pre + "ffn.w2"] = uniform_init(rng, hid, (hid, w))
            p[pre + "ffn.b2"] = np.zeros(w)
        p["out_proj.w"] = uniform_init(rng, w, (w, config.d_emb))
        p["out_proj.b"] = np.zeros(config.d_emb)
        self.params = p

    def _as_batch(self, batch) -> np.ndarray:
        if isinstance(batch, KeypointSequence):
            batch = [batch]
        if isinstance(batch, (list, tuple)):
            lengths = {s.frames for s in batch}
            if len(lengths) != 1:
                raise DomainError("all sequences in a batch must have the same frame count")
            x = np.stack([s.features() for s in batch])
        else:
            x = np.asarray(batch, dtype=np.float64)
            if x.ndim == 4:
                x = x.reshape(x.shape[0], x.shape[1], -1)
        if x.ndim != 3 or x.shape[2] != 2 * self.config.n_joints:
            raise DomainError(f"expected (batch, frames, {2 * self.config.n_joints}) input, got {x.shape}")
        if x.shape[1] > self.config.max_frames:
            raise DomainError(
                f"{x.shape[1]} frames exceed the position table of {self.config.max_frames}")
        return x

    def forward(self, batch) -> np.ndarray:
        """Encode a batch of equal-length sequences to ``(batch, d_emb)``."""
        p, cfg = self.params, self.config
        x = self._as_batch(batch)
        m = x.shape[1]
        h, _ = L.linear(x, p["frame_proj.w"], p["frame_proj.b"])
        h = h + p["pos_embed"][:m]
        h0 = h
        block_caches = []
        for i in range(cfg.layers):
            pre = f"blocks.{i}."
            n1, c_ln1 = L.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            att, c_att = L.self_attention(n1, p, pre + "attn.", cfg.heads)
            h = h + att
            n2, c_ln2 = L.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            f1, _ = L.linear(n2, p[pre + "ffn.w1"], p[pre + "ffn.b1"])
            g, c_gelu = L.gelu(f1)
            f2, _ = L.linear(g, p[pre + "ffn.w2"], p[pre + "ffn.b2"])
            h = h + f2
            block_caches.append((c_ln1, c_att, c_ln2, n2, c_gelu, g))
        if cfg.whole_skip:
            h = h + h0
        pooled = h.mean(axis=1)
        z, _ = L.linear(pooled, p["out_proj.w"], p["out_proj.b"])
        y, c_norm = L.l2_normalize(z)
        self._cache = (x, m, block_caches, pooled, c_norm)
        return y

    def encode(self, seq: KeypointSequence) -> np.ndarray:
        y = self.forward([seq])[0]
        self._cache = None
        return y

    def backward(self, dy) -> dict[str, np.ndarray]:
        x, m, block_caches, pooled, c_norm = self._take_cache()
        p, cfg = self.params, self.config
        grads = self.zero_grads()
        dz = L.l2_normalize_backward(np.asarray(dy, dtype=np.float64), c_norm)
        dpooled, grads["out_proj.w"], grads["out_proj.b"] = L.linear_backward(dz, pooled, p["out_proj.w"])
        dh = np.repeat(dpooled[:, None, :] / m, m, axis=1)
        dh0 = dh.copy() if cfg.whole_skip else 0.0
        for i in reversed(range(cfg.layers)):
            pre = f"blocks.{i}."
            c_ln1, c_att, c_ln2, n2, c_gelu, g = block_caches[i]
            dg, grads[pre + "ffn.w2"], grads[pre + "ffn.b2"] = L.linear_backward(dh, g, p[pre + "ffn.w2"])
            df1 = L.gelu_backward(dg, c_gelu)
            dn2, grads[pre + "ffn.w1"], grads[pre + "ffn.b1"] = L.linear_backward(df1, n2, p[pre + "ffn.w1"])
            dln2, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = L.layer_norm_backward(dn2, c_ln2)
            dh = dh + dln2
            dn1 = L.self_attention_backward(dh, c_att, p, pre + "attn.", cfg.heads, grads)
            dln1, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = L.layer_norm_backward(dn1, c_ln1)
            dh = dh + dln1
        dh = dh + dh0
        grads["pos_embed"][:m] = dh.sum(axis=0)
        _, grads["frame_proj.w"], grads["frame_proj.b"] = L.linear_backward(dh, x, p["frame_proj.w"])
        return grads
