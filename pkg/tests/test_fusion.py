import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases
from motionrag.embedstore import EmbeddingRecord, Store
from motionrag.encoders import checksum
from motionrag.fusion import (DualRetriever, RetrievalResult, RetrieverConfig, RouterParams,
                              SimilarityQuadruple, TrainConfig, contrastive_loss, fused_matrix,
                              fused_similarity, rank, rankings_from_scores, read_rankings,
                              retrieval_metrics, train_stage1, train_stage2, write_rankings)
from motionrag.numerics import DomainError
from motionrag.workbench.synthetic import SyntheticCorpusConfig, gen_synthetic

# values frozen from tests/oracles/derive_constants.py
IDENTITY_B2 = 0.31326168751822283405
LN2 = 0.69314718055994530942


def small_corpus(seed=0, **kw):
    args = dict(n_classes=4, samples_per_class=100, video_fraction=1.0, test_fraction=0.2,
                video_class_coverage=1.0, seed=seed)
    args.update(kw)
    return gen_synthetic(SyntheticCorpusConfig(**args))


def retriever_for(corpus, seed=0, **kw):
    cfg = corpus.config
    return DualRetriever(RetrieverConfig(len(corpus.vocab), n_joints=cfg.n_joints, d_frame=cfg.frame_dim,
                                         width=16, heads=2, layers=1, d_emb=16, text_width=16,
                                         max_frames=cfg.video_frames, seed=seed, **kw))


def constant_router(w_action, w_object, d_emb):
    # literal mode with zero weights gives exactly the bias ratio
    return RouterParams(np.zeros((d_emb, 2)), np.array([w_action, w_object], dtype=float), "literal")


def build_stores(tmp_path, retriever, samples):
    a, o = retriever.embed_videos([s.keypoints for s in samples], [s.frames for s in samples])
    sa = Store.create(tmp_path / "a.store", a.shape[1])
    so = Store.create(tmp_path / "o.store", o.shape[1])
    sa.extend(EmbeddingRecord(s.video_id, "action", v) for s, v in zip(samples, a))
    so.extend(EmbeddingRecord(s.video_id, "object", v) for s, v in zip(samples, o))
    return sa, so


class TestContrastiveLoss:
    @pytest.mark.parametrize("direction", ["p2a", "a2p"])
    def test_uniform(self, direction):
        loss, _ = contrastive_loss(np.full((2, 2), 0.3), direction)
        assert loss == pytest.approx(LN2, abs=1e-12)

    def test_uniform_both_sums(self):
        assert contrastive_loss(np.zeros((2, 2)), "both")[0] == pytest.approx(2 * LN2, abs=1e-12)

    @pytest.mark.parametrize("direction", ["p2a", "a2p"])
    def test_identity(self, direction):
        assert contrastive_loss(np.eye(2), direction)[0] == pytest.approx(IDENTITY_B2, abs=1e-12)

    def test_batch_of_one(self):
        with pytest.raises(DomainError):
            contrastive_loss(np.ones((1, 1)))

    def test_not_square(self):
        with pytest.raises(DomainError):
            contrastive_loss(np.ones((2, 3)))

    def test_unknown_direction(self):
        with pytest.raises(ValueError):
            contrastive_loss(np.eye(2), "sideways")

    @pytest.mark.parametrize("direction", ["p2a", "a2p", "both"])
    def test_gradient_central_difference(self, direction):
        rng = np.random.default_rng(3)
        sim = rng.uniform(-1, 1, size=(4, 4))
        _, grad = contrastive_loss(sim, direction)
        h = 1e-6
        for i in range(4):
            for j in range(4):
                e = np.zeros_like(sim)
                e[i, j] = h
                num = (contrastive_loss(sim + e, direction)[0] - contrastive_loss(sim - e, direction)[0]) / (2 * h)
                assert abs(num - grad[i, j]) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_strictly_positive_for_bounded_cosines(self, b, seed):
        sim = np.random.default_rng(seed).uniform(-1, 1, size=(b, b))
        assert contrastive_loss(sim)[0] > 0


class TestFusedSimilarity:
    def test_equal_logits(self):
        router = RouterParams(np.zeros((4, 2)), np.zeros(2))
        q = SimilarityQuadruple(0.8, 0.2, np.ones(4))
        assert fused_similarity(q, router) == pytest.approx(0.5, abs=1e-15)

    def test_softmax_ln3(self):
        router = RouterParams(np.zeros((4, 2)), np.array([math.log(3), 0.0]))
        np.testing.assert_allclose(router.gate(np.ones(4)), [0.75, 0.25], atol=1e-15)
        assert fused_similarity(SimilarityQuadruple(0.8, 0.2, np.ones(4)), router) == pytest.approx(0.65, abs=1e-14)

    def test_literal_zero_object_logit(self):
        router = constant_router(2.5, 0.0, 4)
        q = SimilarityQuadruple(0.37, -0.9, np.ones(4))
        assert fused_similarity(q, router) == 0.37

    def test_literal_degenerate_sum(self):
        router = RouterParams(np.zeros((4, 2)), np.array([1.0, -1.0]), "literal")
        with pytest.raises(DomainError):
            fused_similarity(SimilarityQuadruple(0.1, 0.2, np.ones(4)), router)

    def test_quadruple_range(self):
        with pytest.raises(DomainError):
            SimilarityQuadruple(1.5, 0.0, np.ones(2))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            RouterParams(np.zeros((2, 2)), np.zeros(2), "tanh")

    def test_initial_weights_near_equal(self):
        w = RouterParams.init(32, seed=1).gate(np.random.default_rng(0).normal(size=(10, 32)))
        assert np.all(np.abs(w - 0.5) < 0.05)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 2**31 - 1))
    def test_softmax_convex_combination(self, s_pa, s_go, seed):
        rng = np.random.default_rng(seed)
        router = RouterParams(rng.normal(0, 3, size=(6, 2)), rng.normal(0, 3, size=2))
        w = router.gate(rng.normal(size=6))
        assert np.all(w > 0) and w.sum() == pytest.approx(1.0, abs=1e-12)
        s = fused_similarity(SimilarityQuadruple(s_pa, s_go, rng.normal(size=6)), router)
        assert min(s_pa, s_go) <= s <= max(s_pa, s_go)

    def test_router_roundtrip(self, tmp_path):
        r = RouterParams.init(5, seed=2, mode="literal")
        r.save(tmp_path / "router.tensors")
        back = RouterParams.load(tmp_path / "router.tensors")
        assert back.mode == "literal"
        np.testing.assert_array_equal(back.weight, r.weight)

    @pytest.mark.parametrize("name", ["fused similarity via router (softmax)", "fused similarity via router (literal)"])
    def test_matrix_gradients(self, name):
        for seed in range(3):
            assert gradcases.CASES[name](seed) < 1e-6


class TestGateDegeneracy:
    @pytest.mark.parametrize("weights,channel", [((1.0, 0.0), 0), ((0.0, 1.0), 1)])
    def test_argsort_equality(self, weights, channel):
        rng = np.random.default_rng(5)
        n, d = 500, 8
        s_pa = rng.uniform(-1, 1, size=(1, n))
        s_go = rng.uniform(-1, 1, size=(1, n))
        ids = [f"v{i:04d}" for i in range(n)]
        fused, _ = fused_matrix(s_pa, s_go, rng.normal(size=(n, d)), constant_router(*weights, d))
        single = (s_pa, s_go)[channel]
        assert rankings_from_scores(fused, ids) == rankings_from_scores(single, ids)


class TestStage1:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_action_loss_decreases(self, seed):
        corpus = small_corpus(seed, n_classes=4, samples_per_class=50, test_fraction=0.0)
        samples = corpus.retrieval_samples("train")
        assert len(samples) == 200
        r = retriever_for(corpus, seed)
        res = train_stage1(samples, r, TrainConfig(epochs=10, batch_size=32, lr=3e-3, seed=seed))
        assert len(res.action_trace) == 11
        assert res.action_trace[-1] < res.action_trace[0]
        assert res.object_trace[-1] < res.object_trace[0]

    def test_zero_lr_constant_trace(self):
        corpus = small_corpus(0, samples_per_class=20, test_fraction=0.0)
        samples = corpus.retrieval_samples("train")
        r = retriever_for(corpus)
        before = checksum(r.encoder_tensors())
        res = train_stage1(samples, r, TrainConfig(epochs=3, batch_size=16, lr=0.0))
        assert len(set(res.action_trace)) == 1 and len(set(res.object_trace)) == 1
        assert checksum(r.encoder_tensors()) == before

    def test_tiled_single_sample(self):
        corpus = small_corpus(samples_per_class=5)
        one = corpus.retrieval_samples("train")[0]
        b = 4
        res = train_stage1([one] * b, retriever_for(corpus), TrainConfig(epochs=2, batch_size=b, lr=1e-2))
        for trace in (res.action_trace, res.object_trace):
            np.testing.assert_allclose(trace, 2 * math.log(b), atol=1e-12)

    def test_corpus_smaller_than_batch(self):
        corpus = small_corpus(samples_per_class=5)
        with pytest.raises(DomainError):
            train_stage1(corpus.retrieval_samples("train")[:3], retriever_for(corpus),
                         TrainConfig(batch_size=8))

    def test_channels_have_independent_parameters(self):
        r = retriever_for(small_corpus(samples_per_class=5))
        assert not set(map(id, r.predicate.params.values())) & set(map(id, r.argument.params.values()))


@pytest.fixture(scope="module")
def action_only_setup():
    # every video is action-only: frame features are pure noise
    corpus = small_corpus(1, n_classes=4, samples_per_class=60, action_only_fraction=1.0)
    r = retriever_for(corpus, 1)
    train = corpus.retrieval_samples("train")
    train_stage1(train, r, TrainConfig(epochs=8, batch_size=32, lr=3e-3, seed=1))
    return corpus, r, train


class TestStage2:
    def test_freeze_and_router_change(self, action_only_setup):
        corpus, r, train = action_only_setup
        router0 = r.router.copy()
        before = checksum(r.encoder_tensors())
        res = train_stage2(train, r, TrainConfig(epochs=10, batch_size=32, lr=1e-2, seed=1))
        assert checksum(r.encoder_tensors()) == before
        assert not np.array_equal(r.router.weight, router0.weight)
        assert res.integ_trace[-1] < res.integ_trace[0]
        test = corpus.retrieval_samples("test")
        a, _ = r.embed_videos([s.keypoints for s in test], [s.frames for s in test])
        w = r.router.gate(a)
        assert w[:, 0].mean() > w[:, 1].mean()

    def test_zero_lr_router_unchanged(self, action_only_setup):
        _, r, train = action_only_setup
        router0 = r.router.copy()
        res = train_stage2(train, r, TrainConfig(epochs=2, batch_size=32, lr=0.0))
        np.testing.assert_array_equal(r.router.weight, router0.weight)
        np.testing.assert_array_equal(r.router.bias, router0.bias)
        assert len(set(res.integ_trace)) == 1

    def test_mutation_detected(self, action_only_setup, monkeypatch):
        _, r, train = action_only_setup
        real = r.embed_videos

        def tamper(*a, **kw):
            out = real(*a, **kw)
            r.object.params[next(iter(r.object.params))] += 1.0
            return out

        monkeypatch.setattr(r, "embed_videos", tamper)
        with pytest.raises(RuntimeError, match="stage 2 mutated"):
            train_stage2(train, r, TrainConfig(epochs=1, batch_size=32, lr=0.0))
        r.object.params[next(iter(r.object.params))] -= 1.0

    def test_corpus_smaller_than_batch(self, action_only_setup):
        _, r, train = action_only_setup
        with pytest.raises(DomainError):
            train_stage2(train[:4], r, TrainConfig(batch_size=8))


class TestRank:
    def test_single_video(self, tmp_path):
        corpus = small_corpus(samples_per_class=5)
        r = retriever_for(corpus)
        s = corpus.retrieval_samples("train")[0]
        sa, so = build_stores(tmp_path, r, [s])
        out = rank(s.text, sa, so, r, k=5, query_id="q1")
        assert [(x.rank, x.video_id) for x in out] == [(1, s.video_id)]

    @pytest.mark.parametrize("mode", ["softmax", "literal"])
    def test_exhaustive_oracle(self, tmp_path, mode):
        corpus = small_corpus(2, n_classes=5, samples_per_class=100)
        r = retriever_for(corpus, 2, gate_mode=mode)
        if mode == "literal":
            r.router.bias[:] = [0.6, 0.4]
        samples = corpus.retrieval_samples("train") + corpus.retrieval_samples("test")
        assert len(samples) == 500
        sa, so = build_stores(tmp_path, r, samples)
        q = samples[17].text
        p, g = r.embed_texts([q])
        a = sa.vectors.astype(np.float64)
        o = so.vectors.astype(np.float64)
        w = r.router.gate(a)
        scores = w[:, 0] * (a @ p[0]) + w[:, 1] * (o @ g[0])
        order = sorted(range(500), key=lambda i: (-scores[i], sa.ids[i]))[:20]
        out = rank(q, sa, so, r, k=20)
        assert [x.video_id for x in out] == [sa.ids[i] for i in order]
        np.testing.assert_allclose([x.score for x in out], scores[order], rtol=0, atol=1e-12)

    def test_object_gated_matches_object_ranking(self, tmp_path):
        corpus = small_corpus(samples_per_class=25)
        r = retriever_for(corpus)
        r.router = constant_router(0.0, 1.0, r.config.d_emb)
        samples = corpus.retrieval_samples("train")
        sa, so = build_stores(tmp_path, r, samples)
        q = samples[0].text
        fused = [x.video_id for x in rank(q, sa, so, r, k=len(samples))]
        obj = [x.video_id for x in rank(q, sa, so, r, k=len(samples), channel="object")]
        assert fused == obj

    def test_missing_object_channel(self, tmp_path):
        corpus = small_corpus(samples_per_class=5)
        r = retriever_for(corpus)
        samples = corpus.retrieval_samples("train")
        sa, _ = build_stores(tmp_path, r, samples)
        so = Store.create(tmp_path / "partial.store", r.config.d_emb)
        _, o = r.embed_videos([s.keypoints for s in samples[1:]], [s.frames for s in samples[1:]])
        so.extend(EmbeddingRecord(s.video_id, "object", v) for s, v in zip(samples[1:], o))
        with pytest.raises(KeyError, match=samples[0].video_id):
            rank(samples[0].text, sa, so, r, k=3)

    def test_ranking_lines_roundtrip(self, tmp_path):
        res = [RetrievalResult("q7", 1, "v00003", 0.8125), RetrievalResult("q7", 2, "v00001", -0.25)]
        assert res[0].line() == "q7\t1\tv00003\t0.8125"
        write_rankings(tmp_path / "r.tsv", res)
        assert read_rankings(tmp_path / "r.tsv") == res


class TestRetrievalMetrics:
    def test_perfect(self):
        m = retrieval_metrics({"a": ["x", "y"], "b": ["y", "x"]}, {"a": "x", "b": "y"})
        assert m["R@1"] == 100.0 and m["MnR"] == 1.0 and m["MdR"] == 1.0

    def test_always_third(self):
        ids = [f"v{i}" for i in range(10)]
        rankings = {f"q{j}": ids for j in range(5)}
        m = retrieval_metrics(rankings, {f"q{j}": "v2" for j in range(5)})
        assert (m["R@1"], m["R@5"], m["R@10"], m["MdR"], m["MnR"]) == (0.0, 100.0, 100.0, 3.0, 3.0)

    def test_absent_relevant(self):
        with pytest.raises(KeyError):
            retrieval_metrics({"q": ["a", "b"]}, {"q": "c"})

    def test_no_queries(self):
        with pytest.raises(DomainError):
            retrieval_metrics({}, {})

    def test_rankings_from_scores_ties_by_id(self):
        assert rankings_from_scores(np.array([[0.5, 0.9, 0.5]]), ["c", "b", "a"]) == [["b", "a", "c"]]
