"""Federated dataset construction.

Three entry points build :class:`FederatedDataset` instances:

* ``load_csv_regression`` ingests a numeric CSV (last column is the target),
  groups rows into clients by the value combination of a column prefix,
  min-max scales features to [0, 1] with training-pool statistics, and
  appends a constant-1 bias column.
* ``synth_regression`` draws a sparse ground-truth model and heterogeneous
  Gaussian client features for support-recovery experiments.
* ``synth_classification`` draws Gaussian class-conditional samples and splits
  them across clients with ``dirichlet_partition`` (Dirichlet class mix,
  lognormal client sizes).

All generators are deterministic under their seed: calling one twice with the
same arguments yields byte-identical datasets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ClientBlock",
    "FederatedDataset",
    "PartitionSpec",
    "load_csv_regression",
    "synth_regression",
    "synth_classification",
    "dirichlet_partition",
]


@dataclass
class ClientBlock:
    """One client's local data."""

    X: np.ndarray
    y: np.ndarray


@dataclass
class FederatedDataset:
    """Immutable collection of per-client blocks plus one held-out test block.

    ``d`` is the feature dimension of the stored blocks (bias column included
    where the builder appends one). ``model_dim`` is the dimension of the
    optimization variable: d for regression, d * C for classification.
    """

    clients: list[ClientBlock]
    test: ClientBlock
    d: int
    task: str  # "regression" | "classification"
    n_classes: int = 0

    def __post_init__(self):
        if not self.clients:
            raise ValueError("dataset needs at least one client")
        for i, block in enumerate(self.clients):
            if block.X.shape[0] < 1:
                raise ValueError(f"client {i} is empty")
            if block.X.shape[1] != self.d:
                raise ValueError(f"client {i} has d={block.X.shape[1]}, expected {self.d}")
        if self.test.X.shape[1] != self.d:
            raise ValueError("test block dimension mismatch")
        if self.task == "classification" and self.n_classes < 2:
            raise ValueError("classification needs n_classes >= 2")

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def n_train(self) -> int:
        return sum(block.X.shape[0] for block in self.clients)

    @property
    def model_dim(self) -> int:
        return self.d * self.n_classes if self.task == "classification" else self.d


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a sample pool across clients.

    Client sizes follow a lognormal(0, sigma^2) draw normalized to the pool
    size; per-client class proportions follow Dirichlet(alpha * 1_C).
    """

    n_clients: int
    dirichlet_alpha: float = 0.3
    lognormal_sigma2: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be > 0")
        if self.lognormal_sigma2 < 0:
            raise ValueError("lognormal_sigma2 must be >= 0")


def load_csv_regression(
    path: str,
    group_prefix_cols: int,
    scale: bool = True,
    test_path: str | None = None,
    skip_header: bool = False,
) -> FederatedDataset:
    """Load a grouped regression CSV as a federated dataset.

    One client is created per unique value combination of the first
    ``group_prefix_cols`` columns. The last column is the target and is left
    unscaled; every feature column is min-max scaled to [0, 1] using
    training-pool statistics (constant columns map to 0), and a constant-1
    bias column is appended. When ``test_path`` is missing, the pooled
    training data doubles as the test block.
    """
    rows = _read_numeric_csv(path, skip_header)
    n_cols = rows.shape[1]
    if group_prefix_cols >= n_cols - 1:
        raise ValueError(
            f"group_prefix_cols={group_prefix_cols} must be < feature count {n_cols - 1}"
        )
    features, targets = rows[:, :-1], rows[:, -1]

    lo = features.min(axis=0)
    hi = features.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)

    def transform(F: np.ndarray) -> np.ndarray:
        if scale:
            F = (F - lo) / span
            F = np.where(hi > lo, F, 0.0)
        return np.hstack([F, np.ones((F.shape[0], 1))])

    # group on raw key values; first-appearance order keeps the load stable
    groups: dict[tuple, list[int]] = {}
    for i in range(rows.shape[0]):
        groups.setdefault(tuple(rows[i, :group_prefix_cols]), []).append(i)
    if not groups:
        raise ValueError(f"{path}: no client groups found")

    scaled = transform(features)
    clients = [ClientBlock(scaled[idx], targets[idx]) for idx in groups.values()]

    if test_path is not None:
        test_rows = _read_numeric_csv(test_path, skip_header)
        if test_rows.shape[1] != n_cols:
            raise ValueError("test file column count differs from training file")
        test = ClientBlock(transform(test_rows[:, :-1]), test_rows[:, -1])
    else:
        test = ClientBlock(scaled.copy(), targets.copy())

    return FederatedDataset(clients, test, scaled.shape[1], "regression")


def _read_numeric_csv(path: str, skip_header: bool) -> np.ndarray:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for r, record in enumerate(reader, start=1):
            if skip_header and r == 1:
                continue
            if not record:
                continue
            parsed = []
            for c, cell in enumerate(record, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ValueError(f"{path}: non-numeric value {cell!r} at row {r}, column {c}")
            rows.append(parsed)
    if not rows:
        raise ValueError(f"{path}: file holds no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: inconsistent column counts {sorted(widths)}")
    if widths.pop() < 2:
        raise ValueError(f"{path}: need at least one feature column and one target column")
    return np.asarray(rows, dtype=np.float64)


def synth_regression(
    n_clients: int,
    dim: int,
    k_true: int,
    hetero: float,
    noise_sigma: float,
    n_per_client: int,
    seed: int,
    n_test: int | None = None,
) -> tuple[FederatedDataset, np.ndarray]:
    """Heterogeneous sparse linear regression with a known ground truth.

    A global k_true-sparse model is drawn once (standard-normal values on a
    random support). Client i's features are standard normal shifted by a
    client-specific mean ``hetero * z_i``; targets are ``X w_true`` plus
    Gaussian noise. Returns the dataset and the ground-truth model.
    """
    if not 1 <= k_true <= dim:
        raise ValueError(f"k_true must be in [1, {dim}], got {k_true}")
    if n_clients < 1 or n_per_client < 1:
        raise ValueError("client and sample counts must be >= 1")
    if not 0.0 <= hetero <= 1.0:
        raise ValueError(f"hetero must be in [0, 1], got {hetero}")
    rng = np.random.default_rng(seed)

    w_true = np.zeros(dim)
    support = rng.choice(dim, size=k_true, replace=False)
    w_true[support] = rng.standard_normal(k_true)

    shifts = hetero * rng.standard_normal((n_clients, dim))
    clients = []
    for i in range(n_clients):
        X = rng.standard_normal((n_per_client, dim)) + shifts[i]
        y = X @ w_true + noise_sigma * rng.standard_normal(n_per_client)
        clients.append(ClientBlock(X, y))

    if n_test is None:
        n_test = max(2, n_clients * n_per_client // 5)
    owners = rng.integers(0, n_clients, size=n_test)
    X_te = rng.standard_normal((n_test, dim)) + shifts[owners]
    y_te = X_te @ w_true + noise_sigma * rng.standard_normal(n_test)

    data = FederatedDataset(clients, ClientBlock(X_te, y_te), dim, "regression")
    return data, w_true


def synth_classification(
    spec: PartitionSpec,
    dim: int,
    n_classes: int,
    n_total: int,
    seed: int,
    separation: float = 3.0,
    n_test: int | None = None,
) -> FederatedDataset:
    """Gaussian class-conditional pool split by ``dirichlet_partition``.

    ``dim`` counts the appended constant-1 feature, so the raw Gaussian
    features live in dim - 1 dimensions around per-class means of scale
    ``separation``.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if dim < 2:
        raise ValueError("dim must be >= 2 (features plus bias column)")
    if n_total < max(n_classes, spec.n_clients):
        raise ValueError("n_total too small for the requested classes/clients")
    rng = np.random.default_rng(seed)
    means = separation * rng.standard_normal((n_classes, dim - 1))

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        y = np.arange(n) % n_classes
        X = means[y] + rng.standard_normal((n, dim - 1))
        return np.hstack([X, np.ones((n, 1))]), y.astype(np.int64)

    X_pool, y_pool = draw(n_total)
    if n_test is None:
        n_test = max(n_classes, n_total // 5)
    X_te, y_te = draw(n_test)

    assignment = dirichlet_partition(y_pool, spec)
    clients = [ClientBlock(X_pool[idx], y_pool[idx]) for idx in assignment]
    return FederatedDataset(clients, ClientBlock(X_te, y_te), dim, "classification", n_classes)


def dirichlet_partition(labels: np.ndarray, spec: PartitionSpec) -> list[np.ndarray]:
    """Assign sample indices to clients; exact partition, deterministic under seed.

    Per-client sizes are proportional to lognormal(0, sigma^2) draws rounded
    by largest remainder to the pool size (each client gets at least one
    sample); per-client class proportions come from Dirichlet(alpha * 1_C)
    and are honored as far as per-class stock allows.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("labels must be nonempty")
    if spec.n_clients > n:
        raise ValueError(f"n_clients={spec.n_clients} exceeds pool size {n}")
    rng = np.random.default_rng(spec.seed)

    raw = rng.lognormal(mean=0.0, sigma=float(np.sqrt(spec.lognormal_sigma2)), size=spec.n_clients)
    counts = _largest_remainder(n * raw / raw.sum())
    # every client must end up nonempty
    while counts.min() == 0:
        counts[np.argmin(counts)] += 1
        counts[np.argmax(counts)] -= 1

    classes = np.unique(labels)
    proportions = rng.dirichlet(spec.dirichlet_alpha * np.ones(classes.shape[0]),
                                size=spec.n_clients)
    pools = []
    for c in classes:
        pool = np.flatnonzero(labels == c)
        rng.shuffle(pool)
        pools.append(list(pool))

    assignment = []
    for i in range(spec.n_clients):
        stock = np.array([len(p) for p in pools])
        grant = _capped_allocation(int(counts[i]), proportions[i], stock)
        taken = []
        for c in range(classes.shape[0]):
            if grant[c]:
                taken.extend(pools[c][: grant[c]])
                del pools[c][: grant[c]]
        assignment.append(np.sort(np.asarray(taken, dtype=np.int64)))

    joined = np.concatenate(assignment)
    assert joined.shape[0] == n and np.unique(joined).shape[0] == n, "partition not exact"
    return assignment


def _largest_remainder(fractional: np.ndarray) -> np.ndarray:
    """Round nonnegative fractional counts to integers preserving the sum."""
    floors = np.floor(fractional).astype(np.int64)
    short = int(round(fractional.sum())) - int(floors.sum())
    order = np.argsort(-(fractional - floors), kind="stable")
    floors[order[:short]] += 1
    return floors


def _capped_allocation(total: int, weights: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Split ``total`` proportionally to ``weights`` without exceeding ``caps``."""
    if caps.sum() < total:
        raise ValueError("insufficient stock for allocation")
    alloc = np.zeros_like(caps)
    while total > alloc.sum():
        remaining = total - alloc.sum()
        room = caps - alloc
        w = np.where(room > 0, weights, 0.0)
        if w.sum() <= 0:
            w = (room > 0).astype(np.float64)
        ideal = remaining * w / w.sum()
        grant = np.minimum(np.floor(ideal).astype(np.int64), room)
        short = remaining - grant.sum()
        if short > 0:
            frac = np.where(room - grant > 0, ideal - np.floor(ideal), -1.0)
            for j in np.argsort(-frac, kind="stable"):
                if short == 0 or frac[j] < 0:
                    break
                grant[j] += 1
                short -= 1
        alloc += grant
    return alloc
