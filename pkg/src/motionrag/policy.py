"""Prompt-context assembly and a small autoregressive token policy.

The policy predicts the next motion token from an assembled context vector
and a bounded window of previous tokens::

    h_t = tanh(ctx @ Wc + bc + sum_j E[y_{t-j}] @ H_j + P[t])
    logits_t = h_t @ Wo + bo          # C codebook tokens + END

Sequence positions before the window start read a BEGIN marker.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .encoders.checkpoint import load_tensors, save_tensors
from .numerics import DomainError, log_softmax, uniform_init
from .optim import Adam

SYSTEM_PROMPT = "You are a helpful AI assistant."
INSTRUCTION_TEMPLATE = (
    "Generate a sequence of motion tokens matching the following human motion description. "
    "You can use the video as a reference. Video information: {video} Motion description: {text}"
)
NO_VIDEO_TEMPLATE = (
    "Generate a sequence of motion tokens matching the following human motion description. "
    "Motion description: {text}"
)
DEFAULT_TEMPERATURE = 0.9
DEFAULT_SEGMENTS = 4


# ---------------------------------------------------------------------------
# context


@dataclass(frozen=True)
class PromptContext:
    system_id: int
    template_id: int
    text_embedding: np.ndarray
    segments: np.ndarray   # (k, d_seg); k == 0 means no video
    vector: np.ndarray
    prompt: str


@dataclass(frozen=True)
class ContextConfig:
    text_dim: int
    segment_dim: int
    context_dim: int = 64
    tag_dim: int = 8
    n_templates: int = 2
    max_segments: int = 16
    seed: int = 0


class ContextAssembler:
    """Fixed (untrained) assembly of system, template, text and video-segment
    embeddings into one context vector.

    Segments are pooled with a distinct positional mixing vector per slot, so
    their order matters.
    """

    def __init__(self, config: ContextConfig):
        self.config = config
        c = config
        rng = np.random.default_rng([c.seed, 23])
        self.system_table = rng.normal(0.0, 1.0, size=(1, c.tag_dim))
        self.template_table = rng.normal(0.0, 1.0, size=(c.n_templates, c.tag_dim))
        self.segment_positions = rng.uniform(0.5, 1.5, size=(c.max_segments, c.segment_dim))
        d_in = 2 * c.tag_dim + c.text_dim + c.segment_dim
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, c.context_dim))

    @property
    def dim(self) -> int:
        return self.config.context_dim

    def build(self, text_embedding, segments=None, text: str = "", video_id: str = "",
              template_id: int | None = None) -> PromptContext:
        c = self.config
        if not text and text_embedding is None:
            raise DomainError("context needs a non-empty text")
        t = np.asarray(text_embedding, dtype=np.float64).reshape(-1)
        if t.shape[0] != c.text_dim:
            raise DomainError(f"text embedding dim {t.shape[0]} != {c.text_dim}")
        seg = np.zeros((0, c.segment_dim)) if segments is None else np.asarray(segments, dtype=np.float64)
        if seg.ndim != 2 or (seg.shape[0] and seg.shape[1] != c.segment_dim):
            raise DomainError(f"segment embeddings must be (k, {c.segment_dim}), got {seg.shape}")
        k = seg.shape[0]
        if k > c.max_segments:
            raise DomainError(f"{k} segments exceed the configured maximum {c.max_segments}")
        if template_id is None:
            template_id = 0 if k else 1
        pooled = (seg * self.segment_positions[:k]).mean(axis=0) if k else np.zeros(c.segment_dim)
        raw = np.concatenate([self.system_table[0], self.template_table[template_id], t, pooled])
        if k:
            prompt = INSTRUCTION_TEMPLATE.format(video=f"<video:{video_id or 'retrieved'}|{k} segments>",
                                                 text=text)
        else:
            prompt = NO_VIDEO_TEMPLATE.format(text=text)
        return PromptContext(0, template_id, t, seg, raw @ self.projection,
                             f"{SYSTEM_PROMPT}\n<|user|>\n{prompt}\n<|assistant|>")


def video_segments(keypoints: np.ndarray, frames: np.ndarray, k: int = DEFAULT_SEGMENTS) -> np.ndarray:
    """Split a video into ``k`` contiguous temporal segments and embed each as
    its mean flattened keypoints concatenated with its mean frame features."""
    kp = np.asarray(keypoints, dtype=np.float64)
    kp = kp.reshape(kp.shape[0], -1)
    fr = np.asarray(frames, dtype=np.float64)
    if k == 0:
        return np.zeros((0, kp.shape[1] + fr.shape[1]))
    bounds = np.linspace(0, kp.shape[0], k + 1).round().astype(int)
    fb = np.linspace(0, fr.shape[0], k + 1).round().astype(int)
    out = []
    for i in range(k):
        a, b = bounds[i], max(bounds[i + 1], bounds[i] + 1)
        c, d = fb[i], max(fb[i + 1], fb[i] + 1)
        out.append(np.concatenate([kp[a:b].mean(axis=0), fr[c:d].mean(axis=0)]))
    return np.stack(out)


# ---------------------------------------------------------------------------
# policy


@dataclass(frozen=True)
class PolicyConfig:
    n_codes: int
    context_dim: int
    embed_dim: int = 8
    hidden: int = 32
    window: int = 2
    max_len: int = 64
    min_length: int = 1
    seed: int = 0


class TokenPolicy:
    """Bounded-window MLP policy over ``n_codes`` tokens plus END."""

    def __init__(self, config: PolicyConfig):
        self.config = config
        c = config
        rng = np.random.default_rng([c.seed, 29])
        self.params = {
            "tok_embed": rng.normal(0.0, 1.0, size=(c.n_codes + 2, c.embed_dim)),
            "ctx.w": uniform_init(rng, c.context_dim, (c.context_dim, c.hidden)),
            "ctx.b": np.zeros(c.hidden),
            "hist.w": uniform_init(rng, c.embed_dim * c.window, (c.window, c.embed_dim, c.hidden)),
            "pos_embed": rng.normal(0.0, 0.1, size=(c.max_len, c.hidden)),
            "out.w": uniform_init(rng, c.hidden, (c.hidden, c.n_codes + 1)),
            "out.b": np.zeros(c.n_codes + 1),
        }

    @property
    def begin(self) -> int:
        return self.config.n_codes

    @property
    def end(self) -> int:
        """END index in the output layer (and ``end + 1`` in the embedding table)."""
        return self.config.n_codes

    def copy(self) -> "TokenPolicy":
        return copy.deepcopy(self)

    def save(self, path) -> None:
        save_tensors(path, self.params)

    def load(self, path) -> None:
        t = load_tensors(path)
        for k in self.params:
            self.params[k] = t[k].copy()

    # -- core -----------------------------------------------------------------

    def _prepare(self, tokens_list):
        c = self.config
        n = len(tokens_list)
        lens = np.array([len(t) for t in tokens_list], dtype=np.int64)
        if n and lens.max() > c.max_len:
            raise DomainError(f"sequence of {lens.max()} tokens exceeds cap {c.max_len}")
        steps = np.where(lens < c.max_len, lens + 1, lens)
        s = int(steps.max()) if n else 0
        targets = np.full((n, s), self.end, dtype=np.int64)
        hist = np.full((n, s, c.window), self.begin, dtype=np.int64)
        for i, t in enumerate(tokens_list):
            t = np.asarray(t, dtype=np.int64)
            if t.size and (t.min() < 0 or t.max() >= c.n_codes):
                raise DomainError("token outside codebook range")
            targets[i, :t.size] = t
            for j in range(1, c.window + 1):
                stop = min(t.size + j, s)
                if stop > j:
                    hist[i, j:stop, j - 1] = t[:stop - j]
        mask = np.arange(s)[None, :] < steps[:, None]
        return targets, hist, mask

    def _logits(self, ctx, hist):
        p, c = self.params, self.config
        s = hist.shape[1]
        pre = (ctx @ p["ctx.w"] + p["ctx.b"])[:, None, :] + p["pos_embed"][:s][None]
        emb = p["tok_embed"][hist]  # (n, s, window, e)
        pre = pre + np.einsum("nswe,weh->nsh", emb, p["hist.w"])
        h = np.tanh(pre)
        logits = h @ p["out.w"] + p["out.b"]
        if c.min_length > 0:
            logits[:, :c.min_length, self.end] = -np.inf
        return logits, h, emb

    def step_distribution(self, ctx: np.ndarray, hist: np.ndarray, t: int, temperature: float = 1.0):
        """Next-token probabilities for a batch at position ``t``."""
        p, c = self.params, self.config
        pre = ctx @ p["ctx.w"] + p["ctx.b"] + p["pos_embed"][t]
        pre = pre + np.einsum("nwe,weh->nh", p["tok_embed"][hist], p["hist.w"])
        logits = np.tanh(pre) @ p["out.w"] + p["out.b"]
        if t < c.min_length:
            logits[:, self.end] = -np.inf
        return np.exp(log_softmax(logits / temperature, axis=-1))

    def logprobs(self, contexts, tokens_list) -> np.ndarray:
        ctx = _ctx_matrix(contexts)
        targets, hist, mask = self._prepare(tokens_list)
        logits, _, _ = self._logits(ctx, hist)
        lp = log_softmax(logits, axis=-1)
        picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
        return np.where(mask, picked, 0.0).sum(axis=1)

    def logprobs_and_grads(self, contexts, tokens_list, weights):
        """Sequence log-probs and the gradient of ``sum_i weights[i] * logp_i``."""
        p, c = self.params, self.config
        ctx = _ctx_matrix(contexts)
        targets, hist, mask = self._prepare(tokens_list)
        logits, h, emb = self._logits(ctx, hist)
        lp = log_softmax(logits, axis=-1)
        picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
        logp = np.where(mask, picked, 0.0).sum(axis=1)
        w = np.asarray(weights, dtype=np.float64)[:, None] * mask
        onehot = np.zeros_like(lp)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        dlogits = w[..., None] * (onehot - np.exp(lp))
        grads = {"out.w": np.einsum("nsh,nsv->hv", h, dlogits), "out.b": dlogits.sum(axis=(0, 1))}
        dpre = (dlogits @ p["out.w"].T) * (1.0 - h * h)
        dsum = dpre.sum(axis=1)
        grads["ctx.w"] = ctx.T @ dsum
        grads["ctx.b"] = dsum.sum(axis=0)
        grads["pos_embed"] = np.zeros_like(p["pos_embed"])
        grads["pos_embed"][:dpre.shape[1]] = dpre.sum(axis=0)
        grads["hist.w"] = np.einsum("nswe,nsh->weh", emb, dpre)
        demb = np.einsum("nsh,weh->nswe", dpre, p["hist.w"])
        grads["tok_embed"] = np.zeros_like(p["tok_embed"])
        np.add.at(grads["tok_embed"], hist.reshape(-1), demb.reshape(-1, c.embed_dim))
        return logp, grads


def _ctx_matrix(contexts) -> np.ndarray:
    if isinstance(contexts, np.ndarray):
        return np.atleast_2d(contexts).astype(np.float64)
    return np.stack([getattr(c, "vector", c) for c in contexts]).astype(np.float64)


def sequence_logprob(policy: TokenPolicy, context, tokens) -> float:
    """Log-probability of ``tokens`` followed by END (omitted at the length cap)."""
    return float(policy.logprobs([context], [np.asarray(tokens, dtype=np.int64)])[0])


def conditional_logprob(policy: TokenPolicy, context, prefix, suffix) -> float:
    """log p(suffix, END | prefix, context)."""
    full = np.concatenate([np.asarray(prefix, dtype=np.int64), np.asarray(suffix, dtype=np.int64)])
    ctx = _ctx_matrix([context])
    targets, hist, mask = policy._prepare([full])
    logits, _, _ = policy._logits(ctx, hist)
    lp = np.take_along_axis(log_softmax(logits, axis=-1), targets[..., None], axis=-1)[0, :, 0]
    return float(lp[len(prefix):][mask[0, len(prefix):]].sum())


def sft_loss(policy: TokenPolicy, batch):
    """Mean negative sequence log-likelihood and its parameter gradients.

    ``batch`` is a sequence of ``(context, tokens)``.
    """
    if not batch:
        raise DomainError("empty SFT batch")
    contexts = [b[0] for b in batch]
    tokens = [np.asarray(b[1], dtype=np.int64) for b in batch]
    n = len(batch)
    logp, grads = policy.logprobs_and_grads(contexts, tokens, np.full(n, -1.0 / n))
    return float(-logp.mean()), grads


def sample_many(policy: TokenPolicy, contexts, temperature: float = DEFAULT_TEMPERATURE,
                seeds=None, greedy: bool = False) -> list[np.ndarray]:
    """Ancestral sampling for a batch; each example draws from its own seed."""
    if not greedy and temperature <= 0:
        raise DomainError("temperature must be positive")
    c = policy.config
    ctx = _ctx_matrix(contexts)
    n = ctx.shape[0]
    rngs = [np.random.default_rng(s) for s in (seeds if seeds is not None else range(n))]
    out = [[] for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    hist = np.full((n, c.window), policy.begin, dtype=np.int64)
    for t in range(c.max_len):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        probs = policy.step_distribution(ctx[idx], hist[idx], t, 1.0 if greedy else temperature)
        for row, i in enumerate(idx):
            if greedy:
                tok = int(np.argmax(probs[row]))
            else:
                cdf = np.cumsum(probs[row])
                tok = int(min(np.searchsorted(cdf, rngs[i].random() * cdf[-1], side="right"),
                              probs.shape[1] - 1))
            if tok == policy.end:
                alive[i] = False
            else:
                out[i].append(tok)
        nxt = np.array([o[-1] if o else policy.begin for o in out])
        hist = np.concatenate([nxt[:, None], hist[:, :-1]], axis=1) if c.window > 1 else nxt[:, None]
        hist[~alive] = policy.begin
    return [np.array(o, dtype=np.int64) for o in out]


def sample(policy: TokenPolicy, context, temperature: float = DEFAULT_TEMPERATURE,
           seed: int = 0) -> np.ndarray:
    return sample_many(policy, [context], temperature, [seed])[0]


def greedy_decode(policy: TokenPolicy, context) -> np.ndarray:
    return sample_many(policy, [context], greedy=True)[0]


@dataclass
class SFTConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 1e-2
    seed: int = 0


@dataclass
class SFTResult:
    loss_trace: list[float] = field(default_factory=list)


def train_sft(policy: TokenPolicy, data, config: SFTConfig = SFTConfig()) -> SFTResult:
    """Minibatch Adam on :func:`sft_loss`; ``data`` is ``[(context, tokens)]``."""
    if not data:
        raise DomainError("empty SFT dataset")
    rng = np.random.default_rng([config.seed, 31])
    opt = Adam(policy.params, lr=config.lr)
    result = SFTResult()
    for _ in range(config.steps):
        idx = rng.choice(len(data), size=min(config.batch_size, len(data)), replace=False)
        loss, grads = sft_loss(policy, [data[i] for i in idx])
        result.loss_trace.append(loss)
        opt.step(grads)
    return result
