"""Dense numerics shared by every other module.

All arrays are float64 numpy arrays; the only place single precision appears
is the on-disk embedding store.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

COV_EPS = 1e-8


class DomainError(ValueError):
    """Input outside the domain of a numerical operation."""


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    """Coerce to a finite float64 array, optionally checking rank."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DomainError(f"{name} must have {ndim} dims, got shape {arr.shape}")
    if arr.size == 0 or any(s <= 0 for s in arr.shape):
        raise DomainError(f"{name} has an empty extent: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DomainError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norm == 0.0):
        raise DomainError("cannot normalize a zero vector")
    return x / norm


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def gaussian_fit(samples, eps: float = COV_EPS) -> GaussianStats:
    """Sample mean and unbiased covariance, with ``eps * I`` added."""
    x = as_tensor(samples, ndim=2, name="samples")
    n, d = x.shape
    if n < 2:
        raise DomainError(f"need at least 2 samples to fit a Gaussian, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T) + eps * np.eye(d)
    return GaussianStats(mean=mean, covariance=cov)


def psd_sqrt(m, sym_tol: float = 1e-8, neg_tol: float = 1e-8) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues in ``[-neg_tol, 0)`` are clamped to zero; anything more
    negative is rejected. Tolerances are relative to the largest |eigenvalue|
    when that exceeds 1.
    """
    m = as_tensor(m, ndim=2, name="matrix")
    if m.shape[0] != m.shape[1]:
        raise DomainError(f"matrix must be square, got {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))))
    if np.max(np.abs(m - m.T)) > sym_tol * scale:
        raise DomainError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < -neg_tol * scale:
        raise DomainError(f"matrix is indefinite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    r = (v * np.sqrt(w)) @ v.T
    return 0.5 * (r + r.T)


def finite_diff_grad_check(
    f: Callable[[np.ndarray], float],
    theta,
    grad,
    h: float = 1e-5,
    indices=None,
) -> float:
    """Max relative error between ``grad`` and central differences of ``f``.

    ``grad`` is either the analytic gradient array or a callable returning it.
    ``indices`` restricts the check to a subset of flat coordinates; by
    default every coordinate is probed.
    """
    theta = np.array(theta, dtype=np.float64)
    analytic = grad(theta.copy()) if callable(grad) else grad
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = theta.reshape(-1)
    if analytic.shape != flat.shape:
        raise DomainError(f"gradient shape {analytic.shape} != parameter shape {flat.shape}")
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(theta)
        flat[i] = orig - h
        fm = f(theta)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"non-finite objective while probing coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return float(worst)


def check_named_grads(
    loss: Callable[[], float],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    h: float = 1e-5,
    max_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Run :func:`finite_diff_grad_check` on every tensor of a parameter dict.

    ``loss`` closes over ``params`` and is re-evaluated after in-place
    perturbation. Returns the max relative error per tensor name.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out = {}
    for name, p in params.items():
        indices = None
        if max_per_tensor is not None and p.size > max_per_tensor:
            indices = rng.choice(p.size, size=max_per_tensor, replace=False)

        def f(theta, p=p):
            p[...] = theta.reshape(p.shape)
            return loss()

        saved = p.copy()
        try:
            out[name] = finite_diff_grad_check(f, saved, grads[name], h=h, indices=indices)
        finally:
            p[...] = saved
    return out


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named RNG stream derived from a root seed."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(x, axis=axis))


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
