"""VQ motion tokenizer with temporal downsampling.

Each run of ``rate`` consecutive frames is averaged, mapped by a linear
encoder to code space and assigned to the Euclidean-nearest code. Decoding
looks codes up, applies a linear decoder and repeats each frame ``rate``
times. Codes are trained with EMA cluster means and dead-code re-seeding.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoders.checkpoint import load_tensors, save_tensors
from .numerics import DomainError, uniform_init
from .optim import Adam

log = logging.getLogger(__name__)

DOWNSAMPLE_RATE = 3


@dataclass(frozen=True)
class MotionFeatureSequence:
    features: np.ndarray  # (frames, dims)

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise DomainError(f"motion must be (frames, dims) with frames >= 1, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise DomainError("motion features contain non-finite values")
        object.__setattr__(self, "features", f)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class MotionCodec:
    codebook: np.ndarray   # (C, code_dim)
    enc_w: np.ndarray      # (D, code_dim)
    enc_b: np.ndarray      # (code_dim,)
    dec_w: np.ndarray      # (code_dim, D)
    dec_b: np.ndarray      # (D,)
    rate: int = DOWNSAMPLE_RATE

    @property
    def n_codes(self) -> int:
        return self.codebook.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.enc_w.shape[0]

    @classmethod
    def init(cls, feature_dim: int, n_codes: int = 512, code_dim: int = 512,
             rate: int = DOWNSAMPLE_RATE, seed: int = 0) -> "MotionCodec":
        rng = np.random.default_rng([seed, 17])
        return cls(rng.normal(0.0, 1.0, size=(n_codes, code_dim)),
                   uniform_init(rng, feature_dim, (feature_dim, code_dim)), np.zeros(code_dim),
                   uniform_init(rng, code_dim, (code_dim, feature_dim)), np.zeros(feature_dim), rate)

    @classmethod
    def identity(cls, codebook, rate: int = DOWNSAMPLE_RATE) -> "MotionCodec":
        """Identity encoder/decoder maps; the codebook lives in feature space."""
        cb = np.asarray(codebook, dtype=np.float64)
        d = cb.shape[1]
        return cls(cb.copy(), np.eye(d), np.zeros(d), np.eye(d), np.zeros(d), rate)

    def copy(self) -> "MotionCodec":
        return MotionCodec(self.codebook.copy(), self.enc_w.copy(), self.enc_b.copy(),
                           self.dec_w.copy(), self.dec_b.copy(), self.rate)

    # -- io -----------------------------------------------------------------

    def tensors(self) -> dict[str, np.ndarray]:
        return {"codebook": self.codebook, "enc.w": self.enc_w, "enc.b": self.enc_b,
                "dec.w": self.dec_w, "dec.b": self.dec_b, "rate": np.array([float(self.rate)])}

    def save(self, path) -> None:
        save_tensors(path, self.tensors())

    @classmethod
    def load(cls, path) -> "MotionCodec":
        t = load_tensors(path)
        return cls(t["codebook"], t["enc.w"], t["enc.b"], t["dec.w"], t["dec.b"], int(t["rate"][0]))

    # -- tokenization ---------------------------------------------------------

    def windows(self, features: np.ndarray) -> np.ndarray:
        """Average consecutive ``rate``-frame blocks; a short tail block is
        averaged over the frames it has."""
        x = np.asarray(features, dtype=np.float64)
        n = math.ceil(x.shape[0] / self.rate)
        out = np.empty((n, x.shape[1]))
        for i in range(n):
            out[i] = x[i * self.rate:(i + 1) * self.rate].mean(axis=0)
        return out

    def project(self, windows: np.ndarray) -> np.ndarray:
        return windows @ self.enc_w + self.enc_b

    def assign(self, z: np.ndarray) -> np.ndarray:
        """Nearest code per row; ties resolve to the lowest index (argmin)."""
        d2 = ((z ** 2).sum(axis=1)[:, None] - 2.0 * z @ self.codebook.T
              + (self.codebook ** 2).sum(axis=1)[None, :])
        return np.argmin(d2, axis=1)

    def encode(self, seq) -> np.ndarray:
        x = seq.features if isinstance(seq, MotionFeatureSequence) else np.asarray(seq, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DomainError("cannot encode an empty motion sequence")
        if x.shape[1] != self.feature_dim:
            raise DomainError(f"motion dim {x.shape[1]} != codec dim {self.feature_dim}")
        return self.assign(self.project(self.windows(x))).astype(np.int64)

    def decode(self, tokens) -> np.ndarray:
        t = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if t.size and (t.min() < 0 or t.max() >= self.n_codes):
            raise DomainError(f"token outside codebook range [0, {self.n_codes})")
        frames = self.codebook[t] @ self.dec_w + self.dec_b
        return np.repeat(frames, self.rate, axis=0)

    def reconstruction_mse(self, sequences) -> float:
        errs, n = 0.0, 0
        for s in sequences:
            x = s.features if isinstance(s, MotionFeatureSequence) else np.asarray(s)
            y = self.decode(self.encode(x))[: x.shape[0]]
            errs += float(((y - x) ** 2).sum())
            n += x.size
        return errs / n


@dataclass
class CodecTrainConfig:
    n_codes: int = 64
    code_dim: int = 16
    rate: int = DOWNSAMPLE_RATE
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-2
    decay: float = 0.99
    commitment: float = 0.25
    seed: int = 0


@dataclass
class CodecTrainResult:
    codec: MotionCodec
    loss_trace: list[float] = field(default_factory=list)
    usage: float = 0.0


def _windows_of(codec, dataset):
    return np.concatenate([codec.windows(getattr(s, "features", s)) for s in dataset])


def train_codebook(dataset, config: CodecTrainConfig = CodecTrainConfig(),
                   codec: MotionCodec | None = None) -> CodecTrainResult:
    """Train encoder/decoder maps by gradient descent on the reconstruction
    loss (straight-through through the quantizer, plus a commitment term)
    and the codebook by EMA cluster means.

    ``lr == 0`` freezes the codec entirely, including the EMA codebook.
    """
    dataset = list(dataset)
    if not dataset:
        raise DomainError("empty motion dataset")
    feature_dim = np.asarray(getattr(dataset[0], "features", dataset[0])).shape[1]
    rng = np.random.default_rng([config.seed, 19])
    if codec is None:
        codec = MotionCodec.init(feature_dim, config.n_codes, config.code_dim, config.rate, config.seed)
    else:
        codec = codec.copy()
    x = _windows_of(codec, dataset)
    n = x.shape[0]
    if n < codec.n_codes:
        warnings.warn(f"{n} training windows for {codec.n_codes} codes; some codes will stay unused")
    frozen = config.lr == 0.0
    if not frozen:
        # data-dependent codebook init from encoder outputs
        z0 = codec.project(x)
        pick = rng.choice(n, size=codec.n_codes, replace=n < codec.n_codes)
        codec.codebook = z0[pick] + 1e-3 * rng.normal(size=(codec.n_codes, z0.shape[1]))
    ema_count = np.ones(codec.n_codes)
    ema_sum = codec.codebook.copy()
    params = {"enc_w": codec.enc_w, "enc_b": codec.enc_b, "dec_w": codec.dec_w, "dec_b": codec.dec_b}
    opt = Adam(params, lr=config.lr)
    result = CodecTrainResult(codec)

    def full_loss():
        z = codec.project(x)
        q = codec.codebook[codec.assign(z)]
        return float(((q @ codec.dec_w + codec.dec_b - x) ** 2).mean())

    result.loss_trace.append(full_loss())
    for _ in range(config.epochs):
        used = np.zeros(codec.n_codes, dtype=bool)
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            xb = x[order[s:s + config.batch_size]]
            z = codec.project(xb)
            idx = codec.assign(z)
            used[idx] = True
            q = codec.codebook[idx]
            recon = q @ codec.dec_w + codec.dec_b
            m = xb.shape[0] * xb.shape[1]
            drecon = 2.0 * (recon - xb) / m
            grads = {"dec_w": q.T @ drecon, "dec_b": drecon.sum(axis=0)}
            # straight-through: dL/dz := dL/dq, plus commitment pulling z to q
            dz = drecon @ codec.dec_w.T + config.commitment * 2.0 * (z - q) / (xb.shape[0] * z.shape[1])
            grads["enc_w"] = xb.T @ dz
            grads["enc_b"] = dz.sum(axis=0)
            if frozen:
                continue
            opt.step(grads)
            onehot = np.zeros((xb.shape[0], codec.n_codes))
            onehot[np.arange(xb.shape[0]), idx] = 1.0
            ema_count = config.decay * ema_count + (1 - config.decay) * onehot.sum(axis=0)
            ema_sum = config.decay * ema_sum + (1 - config.decay) * onehot.T @ z
            total = ema_count.sum()
            smoothed = (ema_count + 1e-5) / (total + codec.n_codes * 1e-5) * total
            codec.codebook = ema_sum / smoothed[:, None]
        if not frozen:
            dead = np.flatnonzero(~used)
            if dead.size:
                z = codec.project(x[rng.choice(n, size=dead.size, replace=n < dead.size)])
                codec.codebook[dead] = z + 1e-3 * rng.normal(size=z.shape)
                ema_sum[dead] = codec.codebook[dead]
                ema_count[dead] = 1.0
        result.loss_trace.append(full_loss())
    result.usage = code_usage(codec, dataset)
    return result


def code_usage(codec: MotionCodec, dataset) -> float:
    """Fraction of codes assigned to at least one window of ``dataset``."""
    idx = codec.assign(codec.project(_windows_of(codec, dataset)))
    return float(np.unique(idx).size / codec.n_codes)


def write_tokens(path, records) -> None:
    """``id<TAB>space-separated token ints`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rid, toks in records:
            fh.write(f"{rid}\t{' '.join(str(int(t)) for t in toks)}\n")


def read_tokens(path) -> list[tuple[str, np.ndarray]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rid, _, toks = line.rstrip("\n").partition("\t")
            out.append((rid, np.array([int(t) for t in toks.split()], dtype=np.int64)))
    return out
