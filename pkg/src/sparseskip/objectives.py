"""Convex per-client objectives with exact full-batch gradients.

Two problem families are supported:

* ridge linear regression,  f_i(w) = 1/2 ||A_i w - b_i||^2 + alpha/4 ||w||^2
* multinomial softmax regression with an l2 term, where the parameter is the
  flattened (d, C) weight matrix and the intercept rides along as an appended
  constant-1 feature column.

Both expose ``loss(w)`` and ``gradient(w)``; instances are immutable after
construction and the calls are pure, so per-client evaluations can run in
parallel. Everything is float64.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "RidgeProblem",
    "SoftmaxProblem",
    "global_loss",
    "global_gradient",
    "ridge_consensus_optimum",
    "estimate_smoothness",
    "build_problems",
]


class RidgeProblem:
    """One client's ridge regression objective."""

    def __init__(self, A: np.ndarray, b: np.ndarray, alpha: float = 0.0):
        A = np.asarray(A, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
            raise ValueError(f"incompatible shapes A={A.shape}, b={b.shape}")
        if A.shape[0] < 1:
            raise ValueError("need at least one sample")
        if alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {alpha}")
        self.A = A
        self.b = b
        self.alpha = float(alpha)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def _check(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise ValueError(f"w has shape {w.shape}, expected ({self.dim},)")
        return w

    def loss(self, w: np.ndarray) -> float:
        w = self._check(w)
        r = self.A @ w - self.b
        return 0.5 * float(r @ r) + 0.25 * self.alpha * float(w @ w)

    def gradient(self, w: np.ndarray) -> np.ndarray:
        w = self._check(w)
        return self.A.T @ (self.A @ w - self.b) + 0.5 * self.alpha * w


class SoftmaxProblem:
    """One client's softmax regression objective on a flattened (d, C) parameter.

    ``n_clients`` and ``n_total`` are the federation-wide client and sample
    counts; the data-fit term is scaled by n_clients / n_total so that the
    average of the per-client losses is the usual mean cross-entropy plus the
    l2 term.
    """

    def __init__(
        self,
        X: np.ndarray,
        y: np.ndarray,
        alpha: float,
        n_classes: int,
        n_clients: int,
        n_total: int,
    ):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"incompatible shapes X={X.shape}, y={y.shape}")
        if n_classes < 2:
            raise ValueError("need at least two classes")
        if y.min() < 0 or y.max() >= n_classes:
            raise ValueError("labels out of range")
        if alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {alpha}")
        self.X = X
        self.y = y
        self.alpha = float(alpha)
        self.n_classes = int(n_classes)
        self.scale = n_clients / n_total
        self._onehot = np.zeros((X.shape[0], n_classes))
        self._onehot[np.arange(X.shape[0]), y] = 1.0

    @property
    def dim(self) -> int:
        return self.X.shape[1] * self.n_classes

    def _logits(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise ValueError(f"w has shape {w.shape}, expected ({self.dim},)")
        return self.X @ w.reshape(self.X.shape[1], self.n_classes)

    def loss(self, w: np.ndarray) -> float:
        z = self._logits(w)
        z = z - z.max(axis=1, keepdims=True)
        log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        nll = -log_p[np.arange(self.X.shape[0]), self.y].sum()
        w = np.asarray(w, dtype=np.float64)
        return self.scale * float(nll) + 0.5 * self.alpha * float(w @ w)

    def gradient(self, w: np.ndarray) -> np.ndarray:
        z = self._logits(w)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = self.X.T @ (p - self._onehot)
        return self.scale * g.ravel() + self.alpha * np.asarray(w, dtype=np.float64)


def global_loss(problems: Sequence, w: np.ndarray) -> float:
    """Average of the per-client losses, summed pairwise in fixed order."""
    return float(np.sum([p.loss(w) for p in problems])) / len(problems)


def global_gradient(problems: Sequence, w: np.ndarray) -> np.ndarray:
    """Average of the per-client gradients, summed pairwise in fixed order."""
    return np.sum([p.gradient(w) for p in problems], axis=0) / len(problems)


def ridge_consensus_optimum(problems: Sequence[RidgeProblem]) -> np.ndarray:
    """Closed-form minimizer of the averaged ridge objective.

    Solves (sum_i A_i^T A_i + alpha/2 * N * I) w = sum_i A_i^T b_i, which
    zeroes the averaged gradient.
    """
    d = problems[0].dim
    alpha = problems[0].alpha
    gram = np.zeros((d, d))
    rhs = np.zeros(d)
    for p in problems:
        if p.alpha != alpha:
            raise ValueError("clients disagree on alpha")
        gram += p.A.T @ p.A
        rhs += p.A.T @ p.b
    gram += 0.5 * alpha * len(problems) * np.eye(d)
    return np.linalg.solve(gram, rhs)


def estimate_smoothness(problems: Sequence, rtol: float = 1e-6, max_iter: int = 10_000) -> float:
    """Smoothness constant max_i lambda_max(A_i^T A_i) + alpha/2 for ridge clients.

    The leading eigenvalue is found by power iteration on A^T A (applied in
    factored form) to the given relative tolerance.
    """
    worst = 0.0
    for p in problems:
        if not isinstance(p, RidgeProblem):
            raise TypeError("smoothness estimation supports ridge problems only")
        worst = max(worst, _power_iteration(p.A, rtol, max_iter) + 0.5 * p.alpha)
    return worst


def _power_iteration(A: np.ndarray, rtol: float, max_iter: int) -> float:
    d = A.shape[1]
    v = np.random.default_rng(0).standard_normal(d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        u = A.T @ (A @ v)
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 0.0
        v = u / norm
        lam_new = float(v @ (A.T @ (A @ v)))
        if abs(lam_new - lam) <= rtol * abs(lam_new):
            return lam_new
        lam = lam_new
    return lam


def build_problems(data, alpha: float) -> list:
    """Per-client objective handles for a federated dataset."""
    n_total = sum(block.X.shape[0] for block in data.clients)
    if data.task == "regression":
        return [RidgeProblem(block.X, block.y, alpha) for block in data.clients]
    return [
        SoftmaxProblem(block.X, block.y.astype(np.int64), alpha, data.n_classes,
                       len(data.clients), n_total)
        for block in data.clients
    ]
