"""Stateless vector primitives: hard thresholding, soft thresholding, sparsity.

All operators work on 1-D float64 arrays and are pure functions, so they are
safe to call concurrently. Hard thresholding breaks magnitude ties
deterministically by keeping the lowest index, which makes runs
bit-reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SparsityTarget",
    "resolve_k",
    "top_k",
    "top_k_mask",
    "soft_threshold",
    "sparsity",
]


@dataclass(frozen=True)
class SparsityTarget:
    """Desired model sparsity, either as a kept-entry count or a zero fraction.

    Exactly one of ``count`` and ``fraction`` must be set. A fraction s maps to
    K = round((1 - s) * d) kept entries, clamped to [1, d]; e.g. s = 0.9 on a
    200-dimensional model keeps K = 20 entries.
    """

    count: int | None = None
    fraction: float | None = None

    def __post_init__(self):
        if (self.count is None) == (self.fraction is None):
            raise ValueError("set exactly one of count or fraction")
        if self.count is not None and self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.fraction is not None and not 0.0 <= self.fraction < 1.0:
            raise ValueError(f"fraction must be in [0, 1), got {self.fraction}")

    def resolve(self, dim: int) -> int:
        """Number of kept entries for a model of dimension ``dim``."""
        if self.count is not None:
            if self.count > dim:
                raise ValueError(f"count {self.count} exceeds dimension {dim}")
            return self.count
        # round half up, then clamp; the clamp only matters at extreme fractions
        k = int(np.floor((1.0 - self.fraction) * dim + 0.5))
        return min(max(k, 1), dim)


def resolve_k(k: SparsityTarget | int, dim: int) -> int:
    """Resolve a sparsity target (or a raw kept-count) against dimension."""
    if isinstance(k, SparsityTarget):
        return k.resolve(dim)
    k = int(k)
    if not 1 <= k <= dim:
        raise ValueError(f"k must be in [1, {dim}], got {k}")
    return k


def top_k(v: np.ndarray, k: SparsityTarget | int) -> np.ndarray:
    """Keep the K largest-magnitude entries of ``v`` unchanged, zero the rest.

    Ties in magnitude are broken by keeping the lowest index first.
    """
    v = np.asarray(v, dtype=np.float64)
    kept = top_k_mask(v, k)
    out = np.zeros_like(v)
    out[kept] = v[kept]
    return out


def top_k_mask(v: np.ndarray, k: SparsityTarget | int) -> np.ndarray:
    """Indices (sorted, ascending) that ``top_k`` would keep."""
    v = np.asarray(v, dtype=np.float64)
    kk = resolve_k(k, v.shape[0])
    # stable sort on descending magnitude keeps the lowest index among ties
    order = np.argsort(-np.abs(v), kind="stable")
    return np.sort(order[:kk])


def soft_threshold(v: np.ndarray, tau: float) -> np.ndarray:
    """Shrink each entry toward zero by ``tau``: sign(v) * max(|v| - tau, 0)."""
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def sparsity(v: np.ndarray) -> float:
    """Fraction of exactly-zero entries."""
    v = np.asarray(v)
    return 1.0 - np.count_nonzero(v) / v.shape[0]
