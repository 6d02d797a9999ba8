"""Toy text/motion co-embedder standing in for a pretrained motion evaluator.

Both branches map into one unit-norm space and are trained jointly with the
symmetric contrastive loss on (text, motion) pairs.
"""

from __future__ import annotations

import numpy as np

from ..encoders import ObjectEncoder, ObjectEncoderConfig, TextEncoder, TextEncoderConfig, load_tensors, save_tensors
from ..fusion import _batches, contrastive_loss
from ..optim import Adam


class MotionEvaluator:
    def __init__(self, vocab_size: int, motion_dim: int, d_emb: int = 8, width: int = 32, seed: int = 0):
        self.text = TextEncoder(TextEncoderConfig(vocab_size, width, d_emb, "evaluator", seed))
        self.motion = ObjectEncoder(ObjectEncoderConfig(motion_dim, d_emb, seed + 1))

    def text_features(self, texts) -> np.ndarray:
        y = self.text.forward(list(texts))
        self.text._cache = None
        return y

    def motion_features(self, motions) -> np.ndarray:
        y = self.motion.forward([np.asarray(m, dtype=np.float64) for m in motions])
        self.motion._cache = None
        return y

    def fit(self, texts, motions, epochs: int = 30, batch_size: int = 32, lr: float = 1e-2,
            temperature: float = 0.1, seed: int = 0) -> list[float]:
        texts = list(texts)
        motions = [np.asarray(m, dtype=np.float64) for m in motions]
        opt = Adam({**{"t." + k: v for k, v in self.text.params.items()},
                    **{"m." + k: v for k, v in self.motion.params.items()}}, lr=lr)
        rng = np.random.default_rng([seed, 43])
        trace = []
        for _ in range(epochs):
            losses = []
            for b in _batches(len(texts), batch_size, rng):
                t = self.text.forward([texts[i] for i in b])
                m = self.motion.forward([motions[i] for i in b])
                loss, ds = contrastive_loss(t @ m.T, "both", temperature)
                gt = self.text.backward(ds @ m)
                gm = self.motion.backward(ds.T @ t)
                opt.step({**{"t." + k: v for k, v in gt.items()}, **{"m." + k: v for k, v in gm.items()}})
                losses.append(loss)
            trace.append(float(np.mean(losses)))
        return trace

    def save(self, path) -> None:
        save_tensors(path, {**{"text." + k: v for k, v in self.text.params.items()},
                            **{"motion." + k: v for k, v in self.motion.params.items()}})

    def load(self, path) -> None:
        t = load_tensors(path)
        self.text.load_params({k[5:]: v for k, v in t.items() if k.startswith("text.")})
        self.motion.load_params({k[7:]: v for k, v in t.items() if k.startswith("motion.")})
