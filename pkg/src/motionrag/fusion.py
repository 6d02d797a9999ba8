"""Dual-channel retrieval: contrastive losses, the action-aware similarity
integrator (router), two-stage training and fused ranking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .embedstore import Store
from .encoders import (ActionEncoder, ActionEncoderConfig, KeypointSequence, ObjectEncoder,
                       ObjectEncoderConfig, TextEncoder, TextEncoderConfig, TokenizedText,
                       checksum, load_tensors, save_tensors)
from .encoders.video import FrameFeatureSequence
from .numerics import DomainError, log_softmax, softmax, uniform_init
from .optim import Adam

log = logging.getLogger(__name__)

GATE_MODES = ("softmax", "literal")
LITERAL_EPS = 1e-9


# ---------------------------------------------------------------------------
# losses


def contrastive_loss(sim, direction: str = "both", temperature: float = 1.0):
    """Softmax cross-entropy on the diagonal of a ``B x B`` similarity matrix.

    ``sim[i, j]`` scores text ``i`` against video ``j``. ``"p2a"`` normalizes
    over rows (text to video), ``"a2p"`` over columns, ``"both"`` sums the two.
    Returns ``(loss, dloss/dsim)``.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise DomainError(f"similarity matrix must be square, got {sim.shape}")
    b = sim.shape[0]
    if b < 2:
        raise DomainError("contrastive loss needs a batch of at least 2")
    if direction not in ("p2a", "a2p", "both"):
        raise ValueError(f"unknown direction {direction!r}")
    logits = sim / temperature
    eye = np.eye(b)
    loss, grad = 0.0, np.zeros_like(sim)
    if direction in ("p2a", "both"):
        lp = log_softmax(logits, axis=1)
        loss -= np.trace(lp) / b
        grad += (np.exp(lp) - eye) / (b * temperature)
    if direction in ("a2p", "both"):
        lp = log_softmax(logits, axis=0)
        loss -= np.trace(lp) / b
        grad += (np.exp(lp) - eye) / (b * temperature)
    return float(loss), grad


# ---------------------------------------------------------------------------
# router


@dataclass
class RouterParams:
    weight: np.ndarray  # (d_emb, 2)
    bias: np.ndarray    # (2,)
    mode: str = "softmax"

    def __post_init__(self):
        if self.mode not in GATE_MODES:
            raise ValueError(f"gate mode must be one of {GATE_MODES}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[1] != 2 or self.bias.shape != (2,):
            raise DomainError("router maps d_emb -> 2 logits")

    @classmethod
    def init(cls, d_emb: int, seed: int = 0, mode: str = "softmax", scale: float = 1e-2):
        rng = np.random.default_rng([seed, 7])
        return cls(rng.uniform(-scale, scale, size=(d_emb, 2)), np.zeros(2), mode)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"router.w": self.weight, "router.b": self.bias}

    def copy(self) -> "RouterParams":
        return RouterParams(self.weight.copy(), self.bias.copy(), self.mode)

    def save(self, path) -> None:
        save_tensors(path, {"router.w": self.weight, "router.b": self.bias,
                            "router.mode": np.array([GATE_MODES.index(self.mode)], dtype=float)})

    @classmethod
    def load(cls, path) -> "RouterParams":
        t = load_tensors(path)
        return cls(t["router.w"], t["router.b"], GATE_MODES[int(t["router.mode"][0])])

    def logits(self, a):
        return np.asarray(a, dtype=np.float64) @ self.weight + self.bias

    def gate(self, a):
        """Channel weights ``(w_action, w_object)`` for action embeddings ``a``."""
        return _gate(self.logits(a), self.mode)

    def gate_backward(self, a, weights, dweights):
        """Gradients of router params and of ``a`` given ``dL/dweights``."""
        a = np.asarray(a, dtype=np.float64)
        if self.mode == "softmax":
            dl = weights * (dweights - (weights * dweights).sum(axis=-1, keepdims=True))
        else:
            total = self.logits(a).sum(axis=-1, keepdims=True)
            dl = (dweights - (weights * dweights).sum(axis=-1, keepdims=True)) / total
        a2 = a.reshape(-1, a.shape[-1])
        dl2 = dl.reshape(-1, 2)
        grads = {"router.w": a2.T @ dl2, "router.b": dl2.sum(axis=0)}
        return grads, dl @ self.weight.T


def _gate(logits, mode):
    if mode == "softmax":
        return softmax(logits, axis=-1)
    total = logits.sum(axis=-1, keepdims=True)
    if np.any(np.abs(total) < LITERAL_EPS):
        raise DomainError("literal-ratio gate is undefined when I0 + I1 = 0")
    return logits / total


@dataclass(frozen=True)
class SimilarityQuadruple:
    s_pa: float
    s_go: float
    action: np.ndarray
    text_id: str = ""
    video_id: str = ""

    def __post_init__(self):
        for s in (self.s_pa, self.s_go):
            if not -1.0 - 1e-12 <= s <= 1.0 + 1e-12:
                raise DomainError(f"similarity {s} outside [-1, 1]")


def combine(w_action, w_object, s_pa, s_go, mode: str = "softmax"):
    """``w_action * s_pa + w_object * s_go``. Softmax weights form a convex
    combination, so the result is clamped to the channel range to drop
    round-off."""
    s = w_action * s_pa + w_object * s_go
    if mode == "softmax":
        s = np.clip(s, np.minimum(s_pa, s_go), np.maximum(s_pa, s_go))
    return s


def fused_similarity(q: SimilarityQuadruple, router: RouterParams) -> float:
    w = router.gate(q.action)
    return float(combine(w[0], w[1], q.s_pa, q.s_go, router.mode))


def fused_matrix(s_pa, s_go, actions, router: RouterParams):
    """Fused scores ``S[i, j]`` for texts ``i`` and videos ``j``; the gate
    depends on the video's action embedding only. Returns ``(S, weights)``."""
    w = router.gate(actions)
    return combine(w[None, :, 0], w[None, :, 1], s_pa, s_go, router.mode), w


def fused_matrix_backward(ds, s_pa, s_go, actions, weights, router: RouterParams):
    dw = np.stack([(ds * s_pa).sum(axis=0), (ds * s_go).sum(axis=0)], axis=1)
    return router.gate_backward(actions, weights, dw)


# ---------------------------------------------------------------------------
# retriever


@dataclass
class RetrievalSample:
    text: TokenizedText
    keypoints: KeypointSequence
    frames: FrameFeatureSequence
    text_id: str = ""
    video_id: str = ""


@dataclass
class RetrieverConfig:
    vocab_size: int
    n_joints: int = 17
    d_frame: int = 32
    width: int = 64
    heads: int = 4
    layers: int = 2
    d_emb: int = 32
    text_width: int = 32
    max_frames: int = 16
    whole_skip: bool = False
    gate_mode: str = "softmax"
    seed: int = 0


class DualRetriever:
    """Action-level (predicate text + keypoints) and object-level (argument
    text + frame features) retrievers joined by a router."""

    def __init__(self, config: RetrieverConfig):
        c = config
        self.config = c
        self.predicate = TextEncoder(TextEncoderConfig(c.vocab_size, c.text_width, c.d_emb, "predicate", c.seed))
        self.argument = TextEncoder(TextEncoderConfig(c.vocab_size, c.text_width, c.d_emb, "argument", c.seed))
        self.action = ActionEncoder(ActionEncoderConfig(c.n_joints, c.width, c.heads, c.layers, c.d_emb,
                                                        c.max_frames, whole_skip=c.whole_skip, seed=c.seed))
        self.object = ObjectEncoder(ObjectEncoderConfig(c.d_frame, c.d_emb, c.seed))
        self.router = RouterParams.init(c.d_emb, c.seed, c.gate_mode)

    @property
    def encoders(self) -> dict[str, object]:
        return {"predicate": self.predicate, "argument": self.argument,
                "action": self.action, "object": self.object}

    def encoder_tensors(self) -> dict[str, np.ndarray]:
        return {f"{k}.{n}": v for k, e in self.encoders.items() for n, v in e.params.items()}

    def load_encoder_tensors(self, tensors) -> None:
        for k, e in self.encoders.items():
            pre = k + "."
            e.load_params({n[len(pre):]: v for n, v in tensors.items() if n.startswith(pre)})

    def save_encoders(self, path) -> None:
        save_tensors(path, self.encoder_tensors())

    def load_encoders(self, path) -> None:
        self.load_encoder_tensors(load_tensors(path))

    def embed_texts(self, texts):
        p = self.predicate.forward(texts)
        g = self.argument.forward(texts)
        self.predicate._cache = self.argument._cache = None
        return p, g

    def embed_videos(self, keypoints, frames, batch_size: int = 256):
        a_parts, o_parts = [], []
        for s in range(0, len(keypoints), batch_size):
            a_parts.append(self.action.forward(keypoints[s:s + batch_size]))
            o_parts.append(self.object.forward(frames[s:s + batch_size]))
        self.action._cache = self.object._cache = None
        return np.concatenate(a_parts), np.concatenate(o_parts)

    def score_matrix(self, texts, keypoints, frames, channel: str = "fused"):
        p, g = self.embed_texts(texts)
        a, o = self.embed_videos(keypoints, frames)
        s_pa, s_go = p @ a.T, g @ o.T
        if channel == "action":
            return s_pa
        if channel == "object":
            return s_go
        return fused_matrix(s_pa, s_go, a, self.router)[0]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    temperature: float = 1.0
    warmup_epochs: int = 0
    seed: int = 0


@dataclass
class TrainResult:
    action_trace: list[float] = field(default_factory=list)
    object_trace: list[float] = field(default_factory=list)
    integ_trace: list[float] = field(default_factory=list)


def _batches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    out = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def _channel_step(text_enc, video_enc, texts, videos, temperature):
    t = text_enc.forward(texts)
    v = video_enc.forward(videos)
    loss, dsim = contrastive_loss(t @ v.T, "both", temperature)
    gt = text_enc.backward(dsim @ v)
    gv = video_enc.backward(dsim.T @ t)
    return loss, gt, gv


def _channel_eval(text_enc, video_enc, texts, videos, batch_size, temperature):
    losses = []
    for b in _batches(len(texts), batch_size):
        t = text_enc.forward([texts[i] for i in b])
        v = video_enc.forward([videos[i] for i in b])
        losses.append(contrastive_loss(t @ v.T, "both", temperature)[0])
    text_enc._cache = video_enc._cache = None
    return float(np.mean(losses))


def train_stage1(corpus: list[RetrievalSample], retriever: DualRetriever,
                 config: TrainConfig = TrainConfig()) -> TrainResult:
    """Fine-tune both channels independently with their symmetric contrastive
    losses. Traces hold the full-corpus loss (fixed batch order) before
    training and after every epoch."""
    if len(corpus) < config.batch_size:
        raise DomainError(f"corpus of {len(corpus)} is smaller than batch size {config.batch_size}")
    texts = [s.text for s in corpus]
    kps = [s.keypoints for s in corpus]
    frames = [s.frames for s in corpus]
    rng = np.random.default_rng([config.seed, 11])
    r = retriever
    opt_action = Adam({**{"p." + k: v for k, v in r.predicate.params.items()},
                       **{"a." + k: v for k, v in r.action.params.items()}}, lr=config.lr)
    opt_object = Adam({**{"g." + k: v for k, v in r.argument.params.items()},
                       **{"o." + k: v for k, v in r.object.params.items()}}, lr=config.lr)
    result = TrainResult()

    def record():
        result.action_trace.append(_channel_eval(r.predicate, r.action, texts, kps,
                                                 config.batch_size, config.temperature))
        result.object_trace.append(_channel_eval(r.argument, r.object, texts, frames,
                                                 config.batch_size, config.temperature))

    def action_epoch():
        for b in _batches(len(corpus), config.batch_size, rng):
            _, gp, ga = _channel_step(r.predicate, r.action, [texts[i] for i in b],
                                      [kps[i] for i in b], config.temperature)
            opt_action.step({**{"p." + k: v for k, v in gp.items()}, **{"a." + k: v for k, v in ga.items()}})

    # optional warm start of the from-scratch action channel
    for _ in range(config.warmup_epochs):
        action_epoch()
    record()
    for epoch in range(config.epochs):
        action_epoch()
        for b in _batches(len(corpus), config.batch_size, rng):
            _, gg, go = _channel_step(r.argument, r.object, [texts[i] for i in b],
                                      [frames[i] for i in b], config.temperature)
            opt_object.step({**{"g." + k: v for k, v in gg.items()}, **{"o." + k: v for k, v in go.items()}})
        record()
        log.debug("stage1 epoch %d: action %.4f object %.4f", epoch,
                  result.action_trace[-1], result.object_trace[-1])
    return result


def integrator_loss(s_pa, s_go, actions, router: RouterParams, temperature: float = 1.0):
    """``L_t2v + L_v2t`` over fused scores; returns ``(loss, router grads)``."""
    s, w = fused_matrix(s_pa, s_go, actions, router)
    loss, ds = contrastive_loss(s, "both", temperature)
    grads, _ = fused_matrix_backward(ds, s_pa, s_go, actions, w, router)
    return loss, grads


def train_stage2(corpus: list[RetrievalSample], retriever: DualRetriever,
                 config: TrainConfig = TrainConfig()) -> TrainResult:
    """Optimize only the router on fused similarities; encoders stay frozen."""
    if len(corpus) < config.batch_size:
        raise DomainError(f"corpus of {len(corpus)} is smaller than batch size {config.batch_size}")
    before = checksum(retriever.encoder_tensors())
    p, g = retriever.embed_texts([s.text for s in corpus])
    a, o = retriever.embed_videos([s.keypoints for s in corpus], [s.frames for s in corpus])
    router = retriever.router
    opt = Adam(router.params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 13])
    result = TrainResult()

    def record():
        losses = [integrator_loss(p[b] @ a[b].T, g[b] @ o[b].T, a[b], router, config.temperature)[0]
                  for b in _batches(len(corpus), config.batch_size)]
        result.integ_trace.append(float(np.mean(losses)))

    record()
    for _ in range(config.epochs):
        for b in _batches(len(corpus), config.batch_size, rng):
            _, grads = integrator_loss(p[b] @ a[b].T, g[b] @ o[b].T, a[b], router, config.temperature)
            opt.step(grads)
        record()
    if checksum(retriever.encoder_tensors()) != before:
        raise RuntimeError("stage 2 mutated encoder parameters")
    return result


# ---------------------------------------------------------------------------
# ranking


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    rank: int
    video_id: str
    score: float

    def line(self) -> str:
        return f"{self.query_id}\t{self.rank}\t{self.video_id}\t{self.score:.9g}"


def fused_scorer(g: np.ndarray, object_store: Store, router: RouterParams,
                 channel: str = "fused"):
    """Scorer for :meth:`Store.top_k` over an action-channel store; looks up
    each row's object embedding by id."""
    obj_index = {rid: i for i, rid in enumerate(object_store.ids)}
    obj_vectors = object_store.vectors

    def score(p, a_rows, ids):
        missing = [rid for rid in ids if rid not in obj_index]
        if missing:
            raise KeyError(f"video {missing[0]!r} has no object-channel embedding")
        o_rows = obj_vectors[[obj_index[rid] for rid in ids]].astype(np.float64)
        s_pa = a_rows @ p
        s_go = o_rows @ g
        if channel == "action":
            return s_pa
        if channel == "object":
            return s_go
        w = router.gate(a_rows)
        return combine(w[:, 0], w[:, 1], s_pa, s_go, router.mode)

    return score


def rank(text: TokenizedText, action_store: Store, object_store: Store,
         retriever: DualRetriever, k: int, query_id: str = "q",
         channel: str = "fused") -> list[RetrievalResult]:
    """Top-k videos for a query text by fused (or single-channel) score."""
    extra = set(object_store.ids) - set(action_store.ids)
    if extra:
        raise KeyError(f"video {sorted(extra)[0]!r} has no action-channel embedding")
    p, g = retriever.embed_texts([text])
    hits = action_store.top_k(p[0], k, scorer=fused_scorer(g[0], object_store, retriever.router, channel))
    return [RetrievalResult(query_id, i + 1, vid, s) for i, (vid, s) in enumerate(hits)]


def write_rankings(path, results) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(r.line() + "\n")


def read_rankings(path) -> list[RetrievalResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            q, r, v, s = line.rstrip("\n").split("\t")
            out.append(RetrievalResult(q, int(r), v, float(s)))
    return out


def rankings_from_scores(scores: np.ndarray, video_ids: list[str]) -> list[list[str]]:
    """Full per-row rankings of a ``queries x videos`` score matrix, ties by id."""
    ids = np.array(video_ids, dtype=str)
    return [[video_ids[j] for j in np.lexsort((ids, -row))] for row in np.asarray(scores)]


def retrieval_metrics(rankings: dict[str, list[str]], ground_truth: dict[str, str]) -> dict[str, float]:
    """R@1/5/10 (percent), median and mean rank (1-based) of the relevant id."""
    ranks = []
    for q, relevant in ground_truth.items():
        order = rankings[q]
        try:
            ranks.append(order.index(relevant) + 1)
        except ValueError:
            raise KeyError(f"relevant video {relevant!r} for query {q!r} is not in the ranking") from None
    if not ranks:
        raise DomainError("no queries to evaluate")
    ranks = np.array(ranks, dtype=np.float64)
    out = {f"R@{k}": float(100.0 * np.mean(ranks <= k)) for k in (1, 5, 10)}
    out["MdR"] = float(np.median(ranks))
    out["MnR"] = float(np.mean(ranks))
    return out
