"""Randomized finite-difference cases shared by the unit tests and the
acceptance gradient suite. Each case returns the worst relative error over
all checked coordinates for one seed."""

import numpy as np

from motionrag.encoders import (ActionEncoder, ActionEncoderConfig, ObjectEncoder, ObjectEncoderConfig,
                                TextEncoder, TextEncoderConfig, TokenizedText)
from motionrag.fusion import RouterParams, contrastive_loss, fused_matrix, fused_matrix_backward, integrator_loss
from motionrag.mcdpo import PreferencePair, dpo_loss
from motionrag.numerics import check_named_grads, finite_diff_grad_check
from motionrag.policy import PolicyConfig, TokenPolicy, sft_loss

PER_TENSOR = 12


def _encoder_case(enc, batch, rng):
    c = rng.normal(size=(len(batch) if isinstance(batch, list) else batch.shape[0], enc.forward(batch).shape[1]))

    def loss():
        return float(np.sum(enc.forward(batch) * c))

    loss()
    grads = enc.backward(c)
    errs = check_named_grads(loss, enc.params, grads, max_per_tensor=PER_TENSOR, rng=rng)
    return max(errs.values())


def action_encoder(seed, whole_skip=False):
    rng = np.random.default_rng(seed)
    enc = ActionEncoder(ActionEncoderConfig(n_joints=3, width=16, heads=2, layers=2, d_emb=6,
                                            max_frames=6, whole_skip=whole_skip, seed=seed))
    for v in enc.params.values():  # move off the zero/one init so every term is exercised
        v += rng.normal(0.0, 0.1, size=v.shape)
    batch = rng.uniform(-1, 1, size=(2, 4, 6))
    return _encoder_case(enc, batch, rng)


def action_encoder_skip(seed):
    return action_encoder(seed, whole_skip=True)


def text_encoder(seed):
    rng = np.random.default_rng(seed)
    enc = TextEncoder(TextEncoderConfig(vocab_size=9, width=5, d_emb=4, channel="argument", seed=seed))
    enc.params["proj.b"] += rng.normal(0.0, 0.1, size=4)
    texts = [TokenizedText(rng.integers(0, 9, size=n), 9) for n in (1, 3, 5)]
    return _encoder_case(enc, texts, rng)


def object_encoder(seed):
    rng = np.random.default_rng(seed)
    enc = ObjectEncoder(ObjectEncoderConfig(d_frame=7, d_emb=4, seed=seed))
    enc.params["proj.b"] += rng.normal(0.0, 0.1, size=4)
    return _encoder_case(enc, rng.normal(size=(3, 4, 7)), rng)


def contrastive(seed):
    rng = np.random.default_rng(seed)
    b = int(rng.integers(2, 6))
    s = rng.uniform(-1, 1, size=(b, b))
    worst = 0.0
    for direction in ("p2a", "a2p", "both"):
        t = float(rng.uniform(0.3, 2.0))
        _, g = contrastive_loss(s, direction, t)
        worst = max(worst, finite_diff_grad_check(lambda x: contrastive_loss(x, direction, t)[0], s, g))
    return worst


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def fused_router(seed, mode="softmax"):
    """Integrator loss through the fused matrix: router params and every input."""
    rng = np.random.default_rng(seed)
    b, d = 4, 5
    s_pa, s_go = rng.uniform(-1, 1, size=(b, b)), rng.uniform(-1, 1, size=(b, b))
    a = _unit(rng, b, d)
    router = RouterParams(rng.normal(0, 0.5, size=(d, 2)), rng.normal(0, 0.5, size=2), mode)
    if mode == "literal":  # keep I0 + I1 well away from zero
        router.bias[:] = [2.0, 1.5]
        router.weight *= 0.2

    def full(sp, sg, aa):
        return integrator_loss(sp, sg, aa, router)

    s, w = fused_matrix(s_pa, s_go, a, router)
    _, ds = contrastive_loss(s, "both")
    grads, da = fused_matrix_backward(ds, s_pa, s_go, a, w, router)
    dsp, dsg = ds * w[None, :, 0], ds * w[None, :, 1]
    np.testing.assert_allclose(grads["router.w"], full(s_pa, s_go, a)[1]["router.w"], rtol=1e-12)
    errs = check_named_grads(lambda: full(s_pa, s_go, a)[0], router.params, grads)
    worst = max(errs.values())
    worst = max(worst, finite_diff_grad_check(lambda x: full(x, s_go, a)[0], s_pa, dsp))
    worst = max(worst, finite_diff_grad_check(lambda x: full(s_pa, x, a)[0], s_go, dsg))
    worst = max(worst, finite_diff_grad_check(lambda x: full(s_pa, s_go, x)[0], a, da))
    return worst


def fused_router_literal(seed):
    return fused_router(seed, "literal")


def _policy(seed, n_codes=5, ctx_dim=4, min_length=1):
    rng = np.random.default_rng(seed)
    pol = TokenPolicy(PolicyConfig(n_codes, ctx_dim, embed_dim=3, hidden=6, window=2, max_len=7,
                                   min_length=min_length, seed=seed))
    for v in pol.params.values():
        v += rng.normal(0.0, 0.2, size=v.shape)
    return pol, rng


def sft(seed):
    pol, rng = _policy(seed)
    batch = [(rng.normal(size=4), rng.integers(0, 5, size=int(n))) for n in (1, 3, 7, 4)]
    _, grads = sft_loss(pol, batch)
    errs = check_named_grads(lambda: sft_loss(pol, batch)[0], pol.params, grads,
                             max_per_tensor=PER_TENSOR * 2, rng=rng)
    return max(errs.values())


def dpo(seed):
    pol, rng = _policy(seed)
    ref, _ = _policy(seed + 1000)
    pairs = []
    for i in range(3):
        w = rng.integers(0, 5, size=int(rng.integers(1, 7)))
        lo = rng.integers(0, 5, size=int(rng.integers(1, 7)))
        # a shared first token makes the position-0 terms cancel exactly, and
        # the check would then compare two round-off values
        lo[0] = (w[0] + 1 + rng.integers(4)) % 5
        pairs.append(PreferencePair(f"e{i}", rng.normal(size=4), w, lo, 0.0, -1.0))
    gamma = float(rng.uniform(0.05, 1.0))
    _, grads = dpo_loss(pol, ref, pairs, gamma)
    errs = check_named_grads(lambda: dpo_loss(pol, ref, pairs, gamma)[0], pol.params, grads,
                             max_per_tensor=PER_TENSOR * 2, rng=rng)
    return max(errs.values())


CASES = {
    "action encoder": action_encoder,
    "action encoder (whole-encoder skip)": action_encoder_skip,
    "text encoder": text_encoder,
    "object encoder": object_encoder,
    "contrastive loss": contrastive,
    "fused similarity via router (softmax)": fused_router,
    "fused similarity via router (literal)": fused_router_literal,
    "sft_loss": sft,
    "dpo_loss": dpo,
}
