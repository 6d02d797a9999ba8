"""Preference optimization of the token policy against its own samples.

Candidates sampled from the reference policy are scored by a reward that
mixes a motion-distribution term (Frechet distance of decoded frame
features to the reference motion) and a text-alignment term (distance of the
pooled candidate feature to the text embedding), each normalized over the
candidate set. The best and worst candidates form a preference pair.
"""

from __future__ import annotations

import logging
import zlib
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .metrics import frechet_distance
from .numerics import DomainError, gaussian_fit, log_sigmoid, sigmoid
from .optim import Adam
from .policy import DEFAULT_TEMPERATURE, TokenPolicy, sample_many

log = logging.getLogger(__name__)

GAMMA = 0.1
KAPPA = 3
W_DIST = 0.9
W_TEXT = 0.1
SUBSET_FRACTION = 0.25
_ZERO = 1e-12


class DivergenceError(RuntimeError):
    pass


@dataclass
class RewardConfig:
    """Reward weights plus the feature hooks that embed candidates.

    ``frame_features(tokens) -> (frames, d)``, ``pooled_feature(tokens) -> (e,)``
    and ``text_feature(example) -> (e,)`` must share the evaluator space for
    the pooled/text pair.
    """
    kappa: int = KAPPA
    w_dist: float = W_DIST
    w_text: float = W_TEXT
    frame_features: Callable | None = None
    pooled_feature: Callable | None = None
    text_feature: Callable | None = None

    def __post_init__(self):
        if self.kappa < 2:
            raise DomainError("kappa must be at least 2")
        if self.w_dist < 0 or self.w_text < 0 or self.w_dist + self.w_text <= 0:
            raise DomainError("reward weights must be non-negative with a positive sum")


@dataclass
class CandidateSet:
    example_id: str
    context: object
    text: object
    reference: np.ndarray
    candidates: list[np.ndarray]
    rewards: np.ndarray | None = None


@dataclass(frozen=True)
class PreferencePair:
    example_id: str
    context: object
    chosen: np.ndarray
    rejected: np.ndarray
    reward_chosen: float
    reward_rejected: float

    def line(self) -> str:
        c = " ".join(str(int(t)) for t in self.chosen)
        r = " ".join(str(int(t)) for t in self.rejected)
        return f"{self.example_id}\t{c}\t{r}\t{self.reward_chosen:.12g}\t{self.reward_rejected:.12g}"


def _shares(values) -> list[Fraction]:
    total = sum(values, Fraction(0))
    if total <= _ZERO:
        return [Fraction(1, len(values))] * len(values)
    return [v / total for v in values]


def reward_from_distances(dist, text_dist, w_dist: float = W_DIST, w_text: float = W_TEXT) -> np.ndarray:
    """``r_i = -(w_dist * l_i / sum(l) + w_text * d_i / sum(d))``; a zero sum
    falls back to the uniform share ``1 / kappa``.

    Evaluated in exact rational arithmetic and rounded once, so each reward
    is the correctly rounded value of the formula for the given inputs.
    """
    dist = np.asarray(dist, dtype=np.float64)
    text_dist = np.asarray(text_dist, dtype=np.float64)
    if dist.shape != text_dist.shape or dist.ndim != 1 or dist.size < 2:
        raise DomainError("need matching distance vectors over at least 2 candidates")
    if not (np.all(np.isfinite(dist)) and np.all(np.isfinite(text_dist))):
        raise DomainError("distances must be finite")
    if np.any(dist < 0) or np.any(text_dist < 0):
        raise DomainError("distances must be non-negative")
    wl, wd = Fraction(float(w_dist)), Fraction(float(w_text))
    sl = _shares([Fraction(float(x)) for x in dist])
    sd = _shares([Fraction(float(x)) for x in text_dist])
    return np.array([float(-(wl * a + wd * b)) for a, b in zip(sl, sd)])


def candidate_distances(cands: CandidateSet, cfg: RewardConfig) -> tuple[np.ndarray, np.ndarray]:
    ref_stats = gaussian_fit(cfg.frame_features(cands.reference))
    text = np.asarray(cfg.text_feature(cands.text), dtype=np.float64)
    dist, tdist = [], []
    for y in cands.candidates:
        dist.append(frechet_distance(gaussian_fit(cfg.frame_features(y)), ref_stats))
        tdist.append(float(np.linalg.norm(np.asarray(cfg.pooled_feature(y)) - text)))
    return np.array(dist), np.array(tdist)


def dual_alignment_reward(cands: CandidateSet, cfg: RewardConfig) -> np.ndarray:
    if len(cands.candidates) < 2:
        raise DomainError("need at least 2 candidates")
    dist, tdist = candidate_distances(cands, cfg)
    cands.rewards = reward_from_distances(dist, tdist, cfg.w_dist, cfg.w_text)
    return cands.rewards


@dataclass
class DPOExample:
    example_id: str
    context: object
    text: object
    reference: np.ndarray


@dataclass
class PreferenceSet:
    pairs: list[PreferencePair] = field(default_factory=list)
    skipped_ties: int = 0
    candidate_sets: list[CandidateSet] = field(default_factory=list)


def example_seed(seed: int, example_id: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(example_id.encode())) & 0x7FFFFFFF


def build_preference_set(ref_policy: TokenPolicy, dataset: list[DPOExample], cfg: RewardConfig,
                         seed: int = 0, subset_fraction: float = SUBSET_FRACTION,
                         temperature: float = DEFAULT_TEMPERATURE) -> PreferenceSet:
    """Sample ``kappa`` candidates per example, score them and keep the
    (best, worst) pair. Examples whose candidates all tie are skipped."""
    if cfg.kappa < 2:
        raise DomainError("kappa must be at least 2")
    if not 0 < subset_fraction <= 1:
        raise DomainError("subset fraction must be in (0, 1]")
    rng = np.random.default_rng([seed, 37])
    n_pick = max(1, int(round(subset_fraction * len(dataset)))) if dataset else 0
    chosen_idx = np.sort(rng.choice(len(dataset), size=n_pick, replace=False)) if n_pick else []
    subset = [dataset[i] for i in chosen_idx]
    contexts, seeds = [], []
    for ex in subset:
        base = example_seed(seed, ex.example_id)
        for j in range(cfg.kappa):
            contexts.append(ex.context)
            seeds.append([base, j])
    samples = sample_many(ref_policy, [getattr(c, "vector", c) for c in contexts], temperature, seeds) \
        if contexts else []
    out = PreferenceSet()
    for n, ex in enumerate(subset):
        cands = CandidateSet(ex.example_id, ex.context, ex.text, ex.reference,
                             samples[n * cfg.kappa:(n + 1) * cfg.kappa])
        r = dual_alignment_reward(cands, cfg)
        out.candidate_sets.append(cands)
        if r.max() - r.min() <= _ZERO:
            out.skipped_ties += 1
            continue
        w, l = int(np.argmax(r)), int(np.argmin(r))
        out.pairs.append(PreferencePair(ex.example_id, ex.context, cands.candidates[w],
                                        cands.candidates[l], float(r[w]), float(r[l])))
    if out.skipped_ties:
        log.info("skipped %d examples whose %d candidates all tied", out.skipped_ties, cfg.kappa)
    return out


def write_pairs(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(p.line() + "\n")


def read_pairs(path, contexts: dict | None = None) -> list[PreferencePair]:
    """Read pairs; contexts are re-attached by example id when supplied."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            eid, c, r, rw, rl = line.rstrip("\n").split("\t")
            ctx = contexts[eid] if contexts is not None else None
            out.append(PreferencePair(eid, ctx, np.array([int(t) for t in c.split()], dtype=np.int64),
                                      np.array([int(t) for t in r.split()], dtype=np.int64),
                                      float(rw), float(rl)))
    return out


# ---------------------------------------------------------------------------
# objective


def reference_logprobs(ref_policy: TokenPolicy, pairs) -> tuple[np.ndarray, np.ndarray]:
    ctx = [getattr(p.context, "vector", p.context) for p in pairs]
    lw = ref_policy.logprobs(ctx, [p.chosen for p in pairs])
    ll = ref_policy.logprobs(ctx, [p.rejected for p in pairs])
    if not (np.all(np.isfinite(lw)) and np.all(np.isfinite(ll))):
        raise DomainError("a preference sequence has zero probability under the reference policy")
    return lw, ll


def dpo_margins(policy: TokenPolicy, pairs, ref_logps, gamma: float = GAMMA) -> np.ndarray:
    ctx = [getattr(p.context, "vector", p.context) for p in pairs]
    lw = policy.logprobs(ctx, [p.chosen for p in pairs])
    ll = policy.logprobs(ctx, [p.rejected for p in pairs])
    return gamma * ((lw - ref_logps[0]) - (ll - ref_logps[1]))


def dpo_loss(policy: TokenPolicy, ref, pairs, gamma: float = GAMMA):
    """Mean ``-log sigmoid(gamma * (delta_w - delta_l))`` with
    ``delta = log pi_theta - log pi_ref``; gradients flow to ``policy`` only.

    ``ref`` is the reference policy or precomputed ``(chosen, rejected)``
    reference log-probabilities.
    """
    if not pairs:
        raise DomainError("empty preference set")
    if gamma <= 0:
        raise DomainError("gamma must be positive")
    ref_logps = reference_logprobs(ref, pairs) if isinstance(ref, TokenPolicy) else ref
    ctx = [getattr(p.context, "vector", p.context) for p in pairs]
    n = len(pairs)
    margin = dpo_margins(policy, pairs, ref_logps, gamma)
    loss = float(-log_sigmoid(margin).mean())
    # dL/dmargin_i = -(1 - sigmoid(m_i)) / n
    coef = -(1.0 - sigmoid(margin)) / n * gamma
    _, gw = policy.logprobs_and_grads(ctx, [p.chosen for p in pairs], coef)
    _, gl = policy.logprobs_and_grads(ctx, [p.rejected for p in pairs], -coef)
    return loss, {k: gw[k] + gl[k] for k in gw}


@dataclass
class DPOConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 2e-4
    gamma: float = GAMMA
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 50


@dataclass
class DPOResult:
    policy: TokenPolicy
    loss_trace: list[float] = field(default_factory=list)
    final_margin: float = 0.0


def train_mcdpo(ref_policy: TokenPolicy, pairs, config: DPOConfig = DPOConfig()) -> DPOResult:
    """Adam on :func:`dpo_loss` starting from a copy of ``ref_policy``."""
    if not pairs:
        raise DomainError("empty preference set")
    policy = ref_policy.copy()
    ref_all = reference_logprobs(ref_policy, pairs)
    opt = Adam(policy.params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 41])
    result = DPOResult(policy)
    initial, streak = None, 0
    for step in range(config.steps):
        idx = rng.choice(len(pairs), size=min(config.batch_size, len(pairs)), replace=False)
        batch = [pairs[i] for i in idx]
        loss, grads = dpo_loss(policy, (ref_all[0][idx], ref_all[1][idx]), batch, config.gamma)
        result.loss_trace.append(loss)
        if initial is None:
            initial = loss
        streak = streak + 1 if loss > config.divergence_factor * initial else 0
        if streak >= config.divergence_patience:
            raise DivergenceError(
                f"DPO diverged at step {step}: loss {loss:.4g} vs initial {initial:.4g} "
                f"for {streak} consecutive steps")
        opt.step(grads)
    result.final_margin = float(dpo_margins(policy, pairs, ref_all, config.gamma).mean())
    return result
