"""Motion-generation evaluation metrics and repeated-run confidence intervals.

All metrics act on caller-supplied feature vectors; none of them embeds raw
motion by itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .numerics import DomainError, GaussianStats, gaussian_fit, psd_sqrt

R_PRECISION_POOL = 32
DIVERSITY_PAIRS = 300
N_RUNS = 10


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared 2-Wasserstein distance between two Gaussians.

    Uses the symmetric form ``Tr(S1 + S2 - 2 sqrt(S1^1/2 S2 S1^1/2))``.
    """
    if a.dim != b.dim:
        raise DomainError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    r1 = psd_sqrt(a.covariance)
    inner = r1 @ b.covariance @ r1
    cross = psd_sqrt(0.5 * (inner + inner.T))
    value = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.trace(cross)
    return float(max(value, 0.0))


def fid(gen, ref) -> float:
    gen = np.asarray(gen, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if gen.ndim != 2 or ref.ndim != 2 or gen.shape[1] != ref.shape[1]:
        raise DomainError(f"feature dimension mismatch: {gen.shape} vs {ref.shape}")
    return frechet_distance(gaussian_fit(gen), gaussian_fit(ref))


def _pairwise(a, b):
    d2 = (a ** 2).sum(1)[:, None] - 2.0 * a @ b.T + (b ** 2).sum(1)[None, :]
    return np.sqrt(np.clip(d2, 0.0, None))


def r_precision(text, motion, pool_size: int = R_PRECISION_POOL, top_k: int = 3,
                seed: int = 0) -> np.ndarray:
    """Top-1..top_k retrieval precision of each motion's own text.

    Samples are shuffled and cut into pools of ``pool_size``; within a pool
    each motion ranks all pool texts by Euclidean distance (stable order, so
    exact ties favour the lower pool slot). Trailing samples that do not fill
    a pool are dropped.
    """
    text = np.asarray(text, dtype=np.float64)
    motion = np.asarray(motion, dtype=np.float64)
    if text.shape != motion.shape:
        raise DomainError(f"text/motion feature shapes differ: {text.shape} vs {motion.shape}")
    if top_k >= pool_size:
        raise DomainError("top_k must be smaller than the pool size")
    n = text.shape[0]
    if n < pool_size:
        raise DomainError(f"need at least {pool_size} pairs, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    hits = np.zeros(top_k)
    pools = n // pool_size
    for b in range(pools):
        idx = order[b * pool_size:(b + 1) * pool_size]
        dist = _pairwise(motion[idx], text[idx])
        ranks = np.argsort(dist, axis=1, kind="stable")
        where = np.argmax(ranks == np.arange(pool_size)[:, None], axis=1)
        for k in range(top_k):
            hits[k] += np.sum(where <= k)
    return hits / (pools * pool_size)


def mm_dist(text, motion) -> float:
    text = np.asarray(text, dtype=np.float64)
    motion = np.asarray(motion, dtype=np.float64)
    if text.size == 0 or motion.size == 0:
        raise DomainError("empty input")
    if text.shape != motion.shape:
        raise DomainError(f"text/motion feature shapes differ: {text.shape} vs {motion.shape}")
    return float(np.linalg.norm(text - motion, axis=1).mean())


def diversity(features, num_pairs: int = DIVERSITY_PAIRS, seed: int = 0) -> float:
    """Mean distance over ``num_pairs`` disjoint random pairs."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 2 * num_pairs or num_pairs < 1:
        raise DomainError(f"need at least {2 * num_pairs} samples for {num_pairs} pairs, got {x.shape[0]}")
    perm = np.random.default_rng(seed).permutation(x.shape[0])
    first, second = perm[:num_pairs], perm[num_pairs:2 * num_pairs]
    return float(np.linalg.norm(x[first] - x[second], axis=1).mean())


def confidence_interval(values, level: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width with ``n - 1`` degrees of freedom."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    n = v.size
    if n < 2:
        raise DomainError("a confidence interval needs at least 2 runs")
    sd = v.std(ddof=1)
    half = 0.0 if sd == 0.0 else float(stats.t.ppf(0.5 + level / 2.0, n - 1) * sd / np.sqrt(n))
    return float(v.mean()), half


@dataclass
class EvalRun:
    generated: np.ndarray
    reference: np.ndarray
    text: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.generated = np.asarray(self.generated, dtype=np.float64)
        self.reference = np.asarray(self.reference, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        shapes = {self.generated.shape, self.reference.shape, self.text.shape}
        if len(shapes) != 1:
            raise DomainError(f"unaligned eval run arrays: {sorted(shapes)}")


METRIC_ORDER = ("fid", "r_precision_top1", "r_precision_top2", "r_precision_top3",
                "mm_dist", "diversity")


def evaluate_run(run: EvalRun, pool_size: int = R_PRECISION_POOL,
                 diversity_pairs: int = DIVERSITY_PAIRS) -> dict[str, float]:
    n = run.generated.shape[0]
    rp = r_precision(run.text, run.generated, min(pool_size, n), 3, run.seed)
    return {
        "fid": fid(run.generated, run.reference),
        "r_precision_top1": float(rp[0]),
        "r_precision_top2": float(rp[1]),
        "r_precision_top3": float(rp[2]),
        "mm_dist": mm_dist(run.text, run.generated),
        "diversity": diversity(run.generated, min(diversity_pairs, n // 2), run.seed),
    }


@dataclass
class MetricReport:
    values: dict[str, tuple[float, float]] = field(default_factory=dict)
    runs: int = 0

    def __getitem__(self, key) -> tuple[float, float]:
        return self.values[key]

    def mean(self, key) -> float:
        return self.values[key][0]

    def to_text(self) -> str:
        lines = [f"runs = {self.runs}"]
        for k, (m, h) in self.values.items():
            lines.append(f"{k}.mean = {m:.12g}")
            lines.append(f"{k}.ci95 = {h:.12g}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"metric": k, "mean": m, "ci95": h, "runs": self.runs},
                                  sort_keys=True) + "\n" for k, (m, h) in self.values.items())

    def write(self, path_prefix) -> None:
        with open(f"{path_prefix}.txt", "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
        with open(f"{path_prefix}.jsonl", "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read_text(cls, path) -> "MetricReport":
        raw = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                k, _, v = line.strip().partition(" = ")
                raw[k] = float(v)
        rep = cls(runs=int(raw.pop("runs")))
        for k in [k[:-5] for k in raw if k.endswith(".mean")]:
            rep.values[k] = (raw[k + ".mean"], raw[k + ".ci95"])
        return rep


def evaluate_runs(runs: list[EvalRun], pool_size: int = R_PRECISION_POOL,
                  diversity_pairs: int = DIVERSITY_PAIRS) -> MetricReport:
    """Metrics per run, then mean and 95% half-width across runs.

    A single run reports a half-width of 0.
    """
    if not runs:
        raise DomainError("no evaluation runs")
    per_run = [evaluate_run(r, pool_size, diversity_pairs) for r in runs]
    report = MetricReport(runs=len(runs))
    for k in METRIC_ORDER:
        vals = [r[k] for r in per_run]
        report.values[k] = confidence_interval(vals) if len(vals) > 1 else (vals[0], 0.0)
    return report
