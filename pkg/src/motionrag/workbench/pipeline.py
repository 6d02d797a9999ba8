"""End-to-end driver: retrieve -> assemble context -> sample tokens ->
decode -> evaluate, plus the training steps that produce each checkpoint."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from ..codec import CodecTrainConfig, MotionCodec, train_codebook, write_tokens
from ..embedstore import EmbeddingRecord, Store
from ..encoders import (CheckpointError, KeypointSequence, TextEncoder, TextEncoderConfig,
                        FrameFeatureSequence, load_tensors, save_tensors)
from ..fusion import (DualRetriever, RetrieverConfig, RouterParams, TrainConfig, rank, rankings_from_scores,
                      retrieval_metrics, train_stage1, train_stage2, write_rankings)
from ..mcdpo import (DPOConfig, DPOExample, RewardConfig, build_preference_set, train_mcdpo)
from ..metrics import EvalRun, MetricReport, evaluate_runs
from ..numerics import substream
from ..policy import (ContextAssembler, ContextConfig, PolicyConfig, SFTConfig, TokenPolicy,
                      sample_many, train_sft, video_segments)
from .evaluator import MotionEvaluator
from .synthetic import Corpus

log = logging.getLogger(__name__)

RETRIEVER_MODES = ("fused", "object", "action", "random", "none")


@dataclass
class PipelineConfig:
    # paths
    data_dir: str = "data"
    store_dir: str = "store"
    checkpoint_dir: str = "checkpoints"
    out_dir: str = "out"
    # retriever
    width: int = 64
    heads: int = 4
    layers: int = 2
    d_emb: int = 32
    gate_mode: str = "softmax"
    retriever_epochs: int = 15
    retriever_lr: float = 3e-3
    retriever_batch: int = 32
    integrator_epochs: int = 15
    integrator_lr: float = 1e-2
    temperature_contrastive: float = 1.0
    warmup_epochs: int = 0
    # codec
    n_codes: int = 32
    code_dim: int = 8
    rate: int = 3
    vq_epochs: int = 30
    vq_lr: float = 1e-2
    # evaluator
    eval_dim: int = 8
    eval_epochs: int = 40
    # policy
    context_text_dim: int = 16
    context_dim: int = 64
    segments: int = 4
    policy_hidden: int = 32
    policy_embed: int = 8
    policy_window: int = 2
    max_len: int = 64
    sft_steps: int = 300
    sft_lr: float = 1e-2
    sft_batch: int = 32
    # preference optimization
    kappa: int = 3
    w_dist: float = 0.9
    w_text: float = 0.1
    gamma: float = 0.1
    subset_fraction: float = 0.25
    dpo_rounds: int = 1
    dpo_epochs: int = 1
    dpo_lr: float = 2e-4
    dpo_batch: int = 8
    # inference / evaluation
    temperature: float = 0.9
    top_k: int = 1
    retriever: str = "fused"
    eval_runs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.retriever not in RETRIEVER_MODES:
            raise ValueError(f"retriever must be one of {RETRIEVER_MODES}")
        if self.kappa < 2:
            raise ValueError("kappa must be >= 2")
        if self.temperature <= 0 or self.gamma <= 0:
            raise ValueError("temperature and gamma must be positive")
        if self.top_k < 1 or self.segments < 0 or self.eval_runs < 1:
            raise ValueError("top_k >= 1, segments >= 0 and eval_runs >= 1 required")


def eval_protocol(n: int) -> tuple[int, int]:
    """R-precision pool size and Diversity pair count for ``n`` test items."""
    return min(32, n), min(300, n // 2)


class Workbench:
    """Holds every trained component for one corpus and one root seed."""

    def __init__(self, corpus: Corpus, cfg: PipelineConfig):
        self.corpus = corpus
        self.cfg = cfg
        cc = corpus.config
        v = len(corpus.vocab)
        self.retriever = DualRetriever(RetrieverConfig(
            vocab_size=v, n_joints=cc.n_joints, d_frame=cc.frame_dim, width=cfg.width, heads=cfg.heads,
            layers=cfg.layers, d_emb=cfg.d_emb, max_frames=max(16, cc.video_frames),
            gate_mode=cfg.gate_mode, seed=cfg.seed))
        self.context_text = TextEncoder(TextEncoderConfig(v, 16, cfg.context_text_dim, "context", cfg.seed))
        seg_dim = 2 * cc.n_joints + cc.frame_dim
        self.assembler = ContextAssembler(ContextConfig(cfg.context_text_dim, seg_dim, cfg.context_dim,
                                                        seed=cfg.seed))
        self.codec: MotionCodec | None = None
        self.evaluator: MotionEvaluator | None = None
        self.sft_policy: TokenPolicy | None = None
        self.policy: TokenPolicy | None = None
        self.action_store: Store | None = None
        self.object_store: Store | None = None

    # -- retrieval --------------------------------------------------------------

    def train_retriever_stage1(self):
        cfg = self.cfg
        tc = TrainConfig(cfg.retriever_epochs, cfg.retriever_batch, cfg.retriever_lr,
                         cfg.temperature_contrastive, cfg.warmup_epochs, cfg.seed)
        return train_stage1(self.corpus.retrieval_samples("train"), self.retriever, tc)

    def train_retriever(self):
        return self.train_retriever_stage1(), self.train_integrator()

    def train_integrator(self):
        cfg = self.cfg
        ic = TrainConfig(cfg.integrator_epochs, cfg.retriever_batch, cfg.integrator_lr,
                         cfg.temperature_contrastive, 0, cfg.seed)
        return train_stage2(self.corpus.retrieval_samples("train"), self.retriever, ic)

    def retrieval_eval(self, split: str = "test", channel: str = "fused") -> dict[str, float]:
        """Recall metrics of held-out captions against the held-out video pool."""
        samples = self.corpus.retrieval_samples(split)
        scores = self.retriever.score_matrix([s.text for s in samples], [s.keypoints for s in samples],
                                             [s.frames for s in samples], channel)
        vids = [s.video_id for s in samples]
        ranked = rankings_from_scores(scores, vids)
        return retrieval_metrics({s.text_id: r for s, r in zip(samples, ranked)},
                                 {s.text_id: s.video_id for s in samples})

    def ingest(self, store_dir) -> tuple[Store, Store]:
        """Embed every database video into an action and an object store."""
        os.makedirs(store_dir, exist_ok=True)
        vids = self.corpus.video_ids
        kps = [KeypointSequence(self.corpus.videos_kp[v]) for v in vids]
        frs = [FrameFeatureSequence(self.corpus.videos_fr[v]) for v in vids]
        a, o = self.retriever.embed_videos(kps, frs)
        for name in ("action.store", "object.store"):
            for suffix in ("", ".ids"):
                path = os.path.join(store_dir, name + suffix)
                if os.path.exists(path):
                    os.remove(path)
        self.action_store = Store.create(os.path.join(store_dir, "action.store"), a.shape[1])
        self.action_store.extend(EmbeddingRecord(v, "action", x) for v, x in zip(vids, a))
        self.object_store = Store.create(os.path.join(store_dir, "object.store"), o.shape[1])
        self.object_store.extend(EmbeddingRecord(v, "object", x) for v, x in zip(vids, o))
        return self.action_store, self.object_store

    def open_stores(self, store_dir) -> None:
        self.action_store = Store.open(os.path.join(store_dir, "action.store"))
        self.object_store = Store.open(os.path.join(store_dir, "object.store"))

    def retrieve(self, queries, mode: str | None = None, k: int = 1, stream: str = "retrieval"):
        """Top-``k`` results per ``(query_id, text)``; ``random`` draws videos
        uniformly from a seeded stream."""
        mode = mode or self.cfg.retriever
        if mode == "none":
            return {q: [] for q, _ in queries}
        if self.action_store is None:
            raise RuntimeError("retrieval requires ingested stores")
        out = {}
        if mode == "random":
            rng = substream(self.cfg.seed, stream)
            ids = self.action_store.ids
            for q, _ in queries:
                pick = rng.choice(len(ids), size=min(k, len(ids)), replace=False)
                out[q] = [(ids[i], 0.0) for i in pick]
            return out
        for q, text in queries:
            res = rank(self.corpus.vocab.tokenize(text), self.action_store, self.object_store,
                       self.retriever, k, q, mode)
            out[q] = [(r.video_id, r.score) for r in res]
        return out

    # -- generation -------------------------------------------------------------

    def build_contexts(self, queries, retrieved):
        """``queries`` is ``[(query_id, text)]``; ``retrieved`` maps query id
        to its ranked ``(video_id, score)`` list (rank 1 is used)."""
        texts = [self.corpus.vocab.tokenize(t) for _, t in queries]
        temb = self.context_text.forward(texts)
        self.context_text._cache = None
        out = []
        for (q, text), te in zip(queries, temb):
            hits = retrieved.get(q, [])
            if hits and self.cfg.segments:
                vid = hits[0][0]
                seg = video_segments(self.corpus.videos_kp[vid], self.corpus.videos_fr[vid], self.cfg.segments)
                out.append(self.assembler.build(te, seg, text=text, video_id=vid))
            else:
                out.append(self.assembler.build(te, None, text=text))
        return out

    def train_codec(self):
        cfg = self.cfg
        motions = [self.corpus.motions[m] for _, m, _ in self.corpus.query_split("train")]
        res = train_codebook(motions, CodecTrainConfig(cfg.n_codes, cfg.code_dim, cfg.rate, cfg.vq_epochs,
                                                       lr=cfg.vq_lr, seed=cfg.seed))
        self.codec = res.codec
        return res

    def train_evaluator(self):
        cfg = self.cfg
        train = self.corpus.query_split("train")
        self.evaluator = MotionEvaluator(len(self.corpus.vocab), self.corpus.config.motion_dim,
                                         cfg.eval_dim, seed=cfg.seed)
        return self.evaluator.fit([self.corpus.vocab.tokenize(t) for _, _, t in train],
                                  [self.corpus.motions[m] for _, m, _ in train],
                                  epochs=cfg.eval_epochs, seed=cfg.seed)

    def new_policy(self) -> TokenPolicy:
        cfg = self.cfg
        return TokenPolicy(PolicyConfig(self.codec.n_codes, cfg.context_dim, cfg.policy_embed,
                                        cfg.policy_hidden, cfg.policy_window, cfg.max_len, 1, cfg.seed))

    def _train_items(self):
        train = self.corpus.query_split("train")
        queries = [(q, t) for q, _, t in train]
        retrieved = self.retrieve(queries, stream="retrieval-train")
        contexts = self.build_contexts(queries, retrieved)
        tokens = [self.codec.encode(self.corpus.motions[m])[: self.cfg.max_len] for _, m, _ in train]
        return train, contexts, tokens

    def train_sft(self):
        _, contexts, tokens = self._train_items()
        self.sft_policy = self.new_policy()
        res = train_sft(self.sft_policy, list(zip(contexts, tokens)),
                        SFTConfig(self.cfg.sft_steps, self.cfg.sft_batch, self.cfg.sft_lr, self.cfg.seed))
        self.policy = self.sft_policy
        return res

    def reward_config(self) -> RewardConfig:
        ev, codec = self.evaluator, self.codec
        return RewardConfig(
            self.cfg.kappa, self.cfg.w_dist, self.cfg.w_text,
            frame_features=lambda toks: codec.decode(toks),
            pooled_feature=lambda toks: ev.motion_features([codec.decode(toks)])[0],
            text_feature=lambda text: ev.text_features([self.corpus.vocab.tokenize(text)])[0])

    def build_dpo(self, policy: TokenPolicy | None = None, round_: int = 0):
        train, contexts, tokens = self._train_items()
        data = [DPOExample(q, c, t, y) for (q, _, t), c, y in zip(train, contexts, tokens)]
        return build_preference_set(policy or self.sft_policy, data, self.reward_config(),
                                    seed=self.cfg.seed * 7919 + round_,
                                    subset_fraction=self.cfg.subset_fraction,
                                    temperature=self.cfg.temperature)

    def train_contexts(self) -> dict:
        """Query id -> context for the training split, built as in SFT."""
        train, contexts, _ = self._train_items()
        return {q: c for (q, _, _), c in zip(train, contexts)}

    def train_dpo(self, pairs=None):
        cfg = self.cfg
        policy, results = self.sft_policy, []
        for r in range(cfg.dpo_rounds):
            prefs = pairs if (pairs is not None and r == 0) else self.build_dpo(policy, r).pairs
            steps = cfg.dpo_epochs * -(-len(prefs) // cfg.dpo_batch)
            res = train_mcdpo(policy, prefs, DPOConfig(steps, cfg.dpo_batch, cfg.dpo_lr,
                                                       cfg.gamma, cfg.seed + r))
            policy = res.policy
            results.append(res)
        self.policy = policy
        return results

    def train_all(self, store_dir):
        self.train_retriever()
        self.ingest(store_dir)
        self.train_codec()
        self.train_evaluator()
        self.train_sft()
        self.train_dpo()
        return self

    # -- inference --------------------------------------------------------------

    def generate(self, contexts, policy: TokenPolicy | None = None, run: int = 0,
                 query_ids=None) -> list[np.ndarray]:
        policy = policy or self.policy
        ids = query_ids or [str(i) for i in range(len(contexts))]
        seeds = [[self.cfg.seed, run, int(q[1:]) if q[1:].isdigit() else i] for i, q in enumerate(ids)]
        return sample_many(policy, contexts, self.cfg.temperature, seeds)

    def evaluate(self, queries_split: str = "test", policy: TokenPolicy | None = None,
                 mode: str | None = None, runs: int | None = None, artifacts_dir=None):
        """Generate for every query of a split ``runs`` times and report
        metrics over runs. Returns ``(report, per-run EvalRuns, artifacts)``."""
        items = self.corpus.query_split(queries_split)
        queries = [(q, t) for q, _, t in items]
        retrieved = self.retrieve(queries, mode, k=max(1, self.cfg.top_k))
        contexts = self.build_contexts(queries, retrieved)
        texts = [self.corpus.vocab.tokenize(t) for _, t in queries]
        text_feat = self.evaluator.text_features(texts)
        ref_feat = self.evaluator.motion_features([self.corpus.motions[m] for _, m, _ in items])
        eval_runs, generated = [], []
        for run in range(runs or self.cfg.eval_runs):
            toks = self.generate(contexts, policy, run, [q for q, _ in queries])
            motions = [self.codec.decode(t) if len(t) else np.zeros((self.codec.rate, self.codec.feature_dim))
                       for t in toks]
            gen_feat = self.evaluator.motion_features(motions)
            eval_runs.append(EvalRun(gen_feat, ref_feat, text_feat, seed=self.cfg.seed * 100 + run))
            generated.append((toks, motions))
        report = evaluate_runs(eval_runs, *eval_protocol(len(items)))
        artifacts = {"retrieved": retrieved, "contexts": contexts, "generated": generated}
        if artifacts_dir is not None:
            write_artifacts(artifacts_dir, queries, retrieved, contexts, generated, eval_runs, report)
        return report, eval_runs, artifacts

    # -- checkpoints ------------------------------------------------------------

    def save(self, ckpt_dir) -> None:
        os.makedirs(ckpt_dir, exist_ok=True)
        j = lambda n: os.path.join(ckpt_dir, n)  # noqa: E731
        self.retriever.save_encoders(j("encoders.tensors"))
        self.retriever.router.save(j("router.tensors"))
        if self.codec is not None:
            self.codec.save(j("codebook.tensors"))
        if self.evaluator is not None:
            self.evaluator.save(j("evaluator.tensors"))
        if self.sft_policy is not None:
            self.sft_policy.save(j("policy_sft.tensors"))
        if self.policy is not None:
            self.policy.save(j("policy.tensors"))

    def load(self, ckpt_dir, stages=("encoders", "router", "codebook", "evaluator", "policy")) -> None:
        j = lambda n: os.path.join(ckpt_dir, n)  # noqa: E731
        for stage in stages:
            path = j(f"{stage}.tensors")
            if not os.path.exists(path):
                raise CheckpointError(f"missing {stage} checkpoint: {path}")
            if stage == "encoders":
                self.retriever.load_encoders(path)
            elif stage == "router":
                self.retriever.router = RouterParams.load(path)
            elif stage == "codebook":
                self.codec = MotionCodec.load(path)
            elif stage == "evaluator":
                self.evaluator = MotionEvaluator(len(self.corpus.vocab), self.corpus.config.motion_dim,
                                                 self.cfg.eval_dim, seed=self.cfg.seed)
                self.evaluator.load(path)
            elif stage in ("policy", "policy_sft"):
                pol = self.new_policy()
                pol.load(path)
                if stage == "policy":
                    self.policy = pol
                else:
                    self.sft_policy = pol


def write_artifacts(out_dir, queries, retrieved, contexts, generated, eval_runs, report: MetricReport):
    from ..fusion import RetrievalResult
    os.makedirs(out_dir, exist_ok=True)
    j = lambda n: os.path.join(out_dir, n)  # noqa: E731
    write_rankings(j("retrieved.tsv"), [RetrievalResult(q, i + 1, v, s)
                                        for q, _ in queries for i, (v, s) in enumerate(retrieved[q])])
    with open(j("prompts.txt"), "w", encoding="utf-8") as fh:
        for (q, _), c in zip(queries, contexts):
            fh.write(f"### {q}\n{c.prompt}\n")
    for run, (toks, motions) in enumerate(generated):
        write_tokens(j(f"tokens.run{run}.tsv"), [(q, t) for (q, _), t in zip(queries, toks)])
        if run == 0:
            save_tensors(j("motions.run0.tensors"), {q: m for (q, _), m in zip(queries, motions)})
    feats = {}
    for i, r in enumerate(eval_runs):
        feats[f"generated.{i}"] = r.generated
    feats["reference"] = eval_runs[0].reference
    feats["text"] = eval_runs[0].text
    feats["seeds"] = np.array([r.seed for r in eval_runs], dtype=np.float64)
    save_tensors(j("eval_features.tensors"), feats)
    report.write(j("report"))


def run_pipeline(cfg: PipelineConfig, corpus: Corpus | None = None, train: bool = False,
                 split: str = "test"):
    """Inference and evaluation over one query split with trained checkpoints
    (or train them first). Ground-truth pairings are never read unless
    training is requested. Returns ``(report, artifacts)``."""
    if corpus is None:
        corpus = Corpus.read(cfg.data_dir, with_ground_truth=train)
    wb = Workbench(corpus, cfg)
    if train:
        wb.train_all(cfg.store_dir)
        wb.save(cfg.checkpoint_dir)
    else:
        wb.load(cfg.checkpoint_dir)
        wb.open_stores(cfg.store_dir)
    report, _, artifacts = wb.evaluate(split, artifacts_dir=cfg.out_dir)
    return report, artifacts
