from __future__ import annotations

import numpy as np

from .checkpoint import load_tensors, save_tensors


class BackwardError(RuntimeError):
    """Raised when backward is called without a recorded forward pass."""


class Encoder:
    """Shared plumbing: a named parameter dict and a one-slot forward cache."""

    params: dict[str, np.ndarray]

    def __init__(self):
        self._cache = None

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _take_cache(self):
        if self._cache is None:
            raise BackwardError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def save(self, path) -> None:
        save_tensors(path, self.params)

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(tensors)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)}")
        for k in self.params:
            if tensors[k].shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {tensors[k].shape} vs {self.params[k].shape}")
            self.params[k] = tensors[k].copy()

    def load(self, path) -> None:
        self.load_params(load_tensors(path))
