"""Communication-cost accounting and evaluation metrics.

The bit model charges 32 bits per transmitted value; sparse payloads
additionally pay ceil(log2 d) index bits per nonzero (coordinate-list
encoding). Evaluation always prunes the model to the target sparsity first,
so methods that train denser than the target are scored at the sparsity they
promise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .objectives import global_loss
from .ops import SparsityTarget, top_k

__all__ = [
    "CommLedger",
    "TraceRow",
    "payload_bits",
    "r_squared",
    "accuracy",
    "evaluate_pruned",
    "test_loss",
    "speedup_table",
    "control_diagnostics",
]


@dataclass
class TraceRow:
    """One record per communication round (plus one for the initial model)."""

    round: int
    iteration: int
    uplink_bits: int
    downlink_bits: int
    train_loss: float
    test_metric: float
    sparsity: float
    sum_h_norm: float
    mean_h_norm: float
    w_norm: float


class CommLedger:
    """Cumulative uplink/downlink bit counters with per-round history."""

    def __init__(self):
        self.uplink_bits = 0
        self.downlink_bits = 0
        self.uplink_history: list[int] = []
        self.downlink_history: list[int] = []

    def add_round(self, uplink: int, downlink: int) -> None:
        if uplink < 0 or downlink < 0:
            raise ValueError("bit counts must be nonnegative")
        self.uplink_bits += uplink
        self.downlink_bits += downlink
        self.uplink_history.append(uplink)
        self.downlink_history.append(downlink)


def index_bits(dim: int) -> int:
    """Bits needed to address one coordinate: ceil(log2 d)."""
    return (dim - 1).bit_length()


def payload_bits(v: np.ndarray, encoding: str, value_bits: int = 32) -> int:
    """Transmission cost of one vector under the dense or sparse encoding."""
    v = np.asarray(v)
    d = v.shape[0]
    if encoding == "dense":
        return value_bits * d
    if encoding == "sparse":
        return int(np.count_nonzero(v)) * (value_bits + index_bits(d))
    raise ValueError(f"unknown encoding {encoding!r}")


def r_squared(pred: np.ndarray, y: np.ndarray) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape or y.shape[0] < 2:
        raise ValueError("need two equal-length vectors of at least 2 entries")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for a constant target")
    return 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot


def accuracy(pred_labels: np.ndarray, y: np.ndarray) -> float:
    """Fraction of exact label matches."""
    pred_labels = np.asarray(pred_labels)
    y = np.asarray(y)
    if pred_labels.shape != y.shape:
        raise ValueError("label vectors must have equal length")
    return float(np.mean(pred_labels == y))


def _predict(w: np.ndarray, data, block) -> np.ndarray:
    if data.task == "regression":
        return block.X @ w
    logits = block.X @ w.reshape(data.d, data.n_classes)
    return logits.argmax(axis=1)


def evaluate_pruned(
    w: np.ndarray, k: SparsityTarget | int, data, problems: Sequence
) -> tuple[float, float]:
    """Prune ``w`` to the target sparsity, then score it.

    Returns (test metric, averaged train loss); the metric is R^2 for
    regression and accuracy for classification. Pruning first applies to all
    variants uniformly, including those already sparse (TopK is idempotent on
    its own output).
    """
    wp = top_k(w, k)
    train = global_loss(problems, wp)
    if data.task == "regression":
        metric = r_squared(_predict(wp, data, data.test), data.test.y)
    else:
        metric = accuracy(_predict(wp, data, data.test), data.test.y)
    return metric, train


def test_loss(w: np.ndarray, data) -> float:
    """Held-out loss: mean squared error / 2 for regression, mean CE otherwise."""
    block = data.test
    if data.task == "regression":
        r = block.X @ w - block.y
        return 0.5 * float(r @ r) / block.y.shape[0]
    z = block.X @ w.reshape(data.d, data.n_classes)
    z = z - z.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -float(np.mean(log_p[np.arange(block.y.shape[0]), block.y.astype(np.int64)]))


def bits_to_threshold(
    trace: Sequence[TraceRow], threshold: float, higher_is_better: bool = True
) -> int | None:
    """Smallest cumulative uplink bits at which the test metric meets ``threshold``."""
    for row in trace:
        if higher_is_better:
            if row.test_metric >= threshold:
                return row.uplink_bits
        elif row.test_metric <= threshold:
            return row.uplink_bits
    return None


def speedup_table(
    traces: dict[str, Sequence[TraceRow]],
    thresholds: Sequence[float],
    baseline: str,
    higher_is_better: bool = True,
) -> dict:
    """Uplink cost to reach each metric threshold, relative to a baseline trace.

    Entries that never reach a threshold carry ``bits = None``; a speedup is
    reported only when both the method and the baseline reached the threshold.
    """
    if baseline not in traces:
        raise ValueError(f"baseline {baseline!r} not among traces {sorted(traces)}")
    table = {"baseline": baseline, "thresholds": list(thresholds), "entries": []}
    base_bits = {
        th: bits_to_threshold(traces[baseline], th, higher_is_better) for th in thresholds
    }
    for name, trace in traces.items():
        for th in thresholds:
            bits = bits_to_threshold(trace, th, higher_is_better)
            ref = base_bits[th]
            speedup = ref / bits if (bits not in (None, 0) and ref is not None) else None
            table["entries"].append(
                {"trace": name, "threshold": th, "bits": bits, "speedup": speedup}
            )
    return table


def control_diagnostics(clients: Sequence) -> tuple[float, float, float]:
    """(||sum_i h_i||_2, mean ||h_i||_2, ||w||_2) in fixed client order."""
    if not clients:
        raise ValueError("need at least one client")
    h_stack = np.stack([c.h for c in clients])
    w_mean = np.sum([c.w for c in clients], axis=0) / len(clients)
    sum_h = float(np.linalg.norm(np.sum(h_stack, axis=0)))
    mean_h = float(np.mean(np.linalg.norm(h_stack, axis=1)))
    return sum_h, mean_h, float(np.linalg.norm(w_mean))
