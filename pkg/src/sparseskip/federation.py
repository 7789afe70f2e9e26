"""Federated training engine: local steps, skipped communication, control variates.

Every algorithm variant shares the same round structure. Each client takes a
local gradient step (optionally pruning inside the step or evaluating the
gradient at a pruned point, the straight-through estimator), and on rounds
flagged by the communication schedule the clients upload — pruned or dense
depending on the variant — the server averages, and clients refresh their
control variates with

    h_i <- h_i + (p / gamma) * (w_global - upload_i).

Using the *uploaded* (pruned) vector on the right keeps sum_i h_i = 0 exactly;
the "modified" diagnostic variants deliberately break or restore that
invariant. Two schedule modes exist: Bernoulli coin flips with probability p,
and the deterministic grid that communicates every floor(1/p) local steps.

Rounds are a strict barrier: all clients finish local step t before any
round-t aggregation, and aggregation plus control-variate updates run in fixed
client order (pairwise summation) so traces are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .metrics import CommLedger, TraceRow, control_diagnostics, evaluate_pruned, payload_bits
from .objectives import global_loss
from .ops import SparsityTarget, resolve_k, soft_threshold, sparsity, top_k

__all__ = [
    "VARIANTS",
    "AlgorithmConfig",
    "ClientState",
    "DivergenceError",
    "RoundOutcome",
    "RunResult",
    "make_schedule",
    "local_step_plain",
    "local_step_ste",
    "local_step_topk",
    "local_step_soft",
    "communication_round",
    "skip_round",
    "run_algorithm",
    "fixed_point_probe",
    "initial_model",
]


class DivergenceError(RuntimeError):
    """Raised when an iterate, gradient, or aggregate stops being finite."""

    def __init__(self, message: str, round_index: int | None = None):
        super().__init__(message)
        self.round_index = round_index


@dataclass
class ClientState:
    """Local iterate, control variate, and objective handle of one client."""

    w: np.ndarray
    h: np.ndarray
    problem: object

    def __post_init__(self):
        if self.w.shape != self.h.shape:
            raise ValueError("w and h must share a dimension")


@dataclass(frozen=True)
class VariantSpec:
    """Static behavior of one algorithm variant."""

    local_step: str          # plain | ste | topk | soft
    prune_uplink: bool       # TopK before upload
    prune_server: bool       # TopK after averaging, before downlink
    sparse_payload: bool     # uplink costed with the sparse encoding
    control_variates: bool
    h_from_upload: bool      # False: diagnostic variant updates h with the raw proposal
    client_prune_after: bool # prune the downlinked dense average on the client
    default_schedule: str    # deterministic | bernoulli


VARIANTS: dict[str, VariantSpec] = {
    # STE local steps, TopK before upload, deterministic 1/p local steps
    "sparse_proxskip": VariantSpec("ste", True, False, True, True, True, False, "deterministic"),
    # TopK local steps (sparse iterate throughout), Bernoulli coin
    "sparse_proxskip_local": VariantSpec("topk", True, False, True, True, True, False, "bernoulli"),
    # diagnostic: h updated with the unpruned proposal, breaking sum h = 0
    "sparse_proxskip_modified": VariantSpec("ste", True, False, True, True, False, False, "deterministic"),
    # dense uplink, server prunes the average before downlink; breaks sum h = 0
    "accelerated_server_pruning": VariantSpec("plain", False, True, False, True, True, False, "bernoulli"),
    # diagnostic: dense average drives the h update, clients prune afterwards
    "accelerated_server_pruning_modified": VariantSpec("plain", False, False, False, True, True, True, "bernoulli"),
    # l1 prox inside the local step; uploads are whatever the shrinkage left
    "randprox_l1": VariantSpec("soft", False, False, True, True, True, False, "bernoulli"),
    # dense training, pruned only at the very end
    "final_topk": VariantSpec("plain", False, False, False, True, True, False, "bernoulli"),
    "proxskip": VariantSpec("plain", False, False, False, True, True, False, "bernoulli"),
    # no control variates: local GD with server-side / client-side TopK
    "fedht": VariantSpec("plain", False, True, False, False, True, False, "deterministic"),
    "fediht": VariantSpec("topk", True, False, True, False, True, False, "deterministic"),
    "local_gd": VariantSpec("plain", False, False, False, False, True, False, "deterministic"),
}


@dataclass(frozen=True)
class AlgorithmConfig:
    """Variant tag plus hyperparameters; with a dataset and seed it fixes a run."""

    variant: str
    gamma: float
    p: float
    iterations: int
    sparsity: SparsityTarget = field(default_factory=lambda: SparsityTarget(fraction=0.0))
    schedule_mode: str = "auto"  # auto | deterministic | bernoulli
    lambda_l1: float = 0.0
    seed: int = 0
    local_step_override: str | None = None
    divergence_loss_factor: float = 1e6
    divergence_w_norm: float = 1e8
    value_bits: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.schedule_mode not in ("auto", "deterministic", "bernoulli"):
            raise ValueError(f"unknown schedule_mode {self.schedule_mode!r}")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        if self.lambda_l1 > 0 and self.variant != "randprox_l1":
            raise ValueError("lambda_l1 applies to the randprox_l1 variant only")
        if self.local_step_override is not None and self.local_step_override not in (
            "plain", "ste", "topk", "soft",
        ):
            raise ValueError(f"unknown local step {self.local_step_override!r}")

    def resolved_schedule_mode(self) -> str:
        if self.schedule_mode != "auto":
            return self.schedule_mode
        return VARIANTS[self.variant].default_schedule

    def resolved_local_step(self) -> str:
        return self.local_step_override or VARIANTS[self.variant].local_step


@dataclass
class RoundOutcome:
    """What one communication round produced."""

    w_global: np.ndarray
    uplink_nnz: list[int]
    uplink_bits: int
    downlink_bits: int
    sum_h_norm: float
    mean_h_norm: float
    w_norm: float


@dataclass
class RunResult:
    """Final model (pruned), raw final iterate, trace, and ledger of one run."""

    final_w: np.ndarray
    final_w_raw: np.ndarray
    trace: list[TraceRow]
    ledger: CommLedger
    rounds: int
    diverged: bool = False
    diverged_round: int | None = None


def make_schedule(p: float, iterations: int, mode: str, seed: int) -> np.ndarray:
    """Communication flags theta_0..theta_{T-1}, generated once per run.

    Deterministic mode communicates whenever t mod floor(1/p) == 0; Bernoulli
    mode flips an i.i.d. coin with success probability p under the seed.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    if mode == "deterministic":
        gap = int(np.floor(1.0 / p))
        return (np.arange(iterations) % gap == 0).astype(np.uint8)
    if mode == "bernoulli":
        rng = np.random.default_rng(seed)
        return (rng.random(iterations) < p).astype(np.uint8)
    raise ValueError(f"unknown schedule mode {mode!r}")


def _checked_gradient(state: ClientState, at: np.ndarray) -> np.ndarray:
    g = state.problem.gradient(at)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient in local step")
    return g


def local_step_plain(state: ClientState, gamma: float) -> np.ndarray:
    """w - gamma * (grad f(w) - h); dense iterate."""
    return state.w - gamma * (_checked_gradient(state, state.w) - state.h)


def local_step_ste(state: ClientState, gamma: float, k: SparsityTarget | int) -> np.ndarray:
    """Straight-through step: gradient taken at the pruned point, dense update."""
    g = _checked_gradient(state, top_k(state.w, k))
    return state.w - gamma * (g - state.h)


def local_step_topk(state: ClientState, gamma: float, k: SparsityTarget | int) -> np.ndarray:
    """Hard-thresholded step: the iterate stays K-sparse after every update."""
    return top_k(local_step_plain(state, gamma), k)


def local_step_soft(state: ClientState, gamma: float, lambda_l1: float) -> np.ndarray:
    """l1-prox step: soft thresholding with threshold gamma * lambda."""
    return soft_threshold(local_step_plain(state, gamma), gamma * lambda_l1)


def communication_round(
    clients: Sequence[ClientState],
    variant: str,
    gamma: float,
    p: float,
    k: SparsityTarget | int,
    value_bits: int = 32,
) -> RoundOutcome:
    """Aggregate the clients' proposals (held in ``state.w``) for one round.

    Order of operations: uplink pruning, averaging (optionally pruned at the
    server), control-variate updates, then the post-round client iterate.
    """
    spec = VARIANTS[variant]
    d = clients[0].w.shape[0]
    kk = resolve_k(k, d)

    proposals = [c.w for c in clients]
    uploads = [top_k(w, kk) for w in proposals] if spec.prune_uplink else proposals

    averaged = np.sum(uploads, axis=0) / len(uploads)
    if not np.all(np.isfinite(averaged)):
        raise DivergenceError("non-finite aggregate in communication round")
    w_global = top_k(averaged, kk) if spec.prune_server else averaged

    if spec.control_variates:
        scale = p / gamma
        for c, upload, proposal in zip(clients, uploads, proposals):
            ref = upload if spec.h_from_upload else proposal
            c.h = c.h + scale * (w_global - ref)

    post = top_k(w_global, kk) if spec.client_prune_after else w_global
    for c in clients:
        c.w = post

    encoding = "sparse" if spec.sparse_payload else "dense"
    uplink_nnz = [int(np.count_nonzero(u)) for u in uploads]
    uplink = sum(payload_bits(u, encoding, value_bits) for u in uploads)
    downlink = payload_bits(w_global, "sparse", value_bits)

    sum_h, mean_h, _ = control_diagnostics(clients)
    return RoundOutcome(w_global, uplink_nnz, uplink, downlink,
                        sum_h, mean_h, float(np.linalg.norm(w_global)))


def skip_round(clients: Sequence[ClientState], variant: str) -> None:
    """No communication: clients keep their proposals, control variates freeze."""
    # proposals are already stored in state.w and h was not touched


def initial_model(data, seed: int) -> np.ndarray:
    """Zero start for regression; uniform [-1/sqrt(d), 1/sqrt(d)] for softmax."""
    if data.task == "regression":
        return np.zeros(data.model_dim)
    bound = 1.0 / np.sqrt(data.d)
    return np.random.default_rng(seed).uniform(-bound, bound, size=data.model_dim)


def run_algorithm(
    cfg: AlgorithmConfig,
    data,
    problems: Sequence,
    sink: Callable[[TraceRow], None] | None = None,
    round_probe: Callable[[int, int, list[ClientState], RoundOutcome], bool | None] | None = None,
    evaluate: bool = True,
    w0: np.ndarray | None = None,
) -> RunResult:
    """Run one variant end to end and return the pruned final model plus trace.

    Emits one trace row for the initial model and one per communication round.
    ``round_probe`` is called after every round with (iteration, round index,
    clients, outcome); returning True stops the run early. A tripped
    divergence guard flags the trace instead of raising.
    """
    spec = VARIANTS[cfg.variant]
    step = cfg.resolved_local_step()
    if w0 is None:
        w0 = initial_model(data, cfg.seed)
    if w0.shape[0] != data.model_dim:
        raise ValueError("model dimension does not match the dataset")
    kk = resolve_k(cfg.sparsity, data.model_dim)

    schedule = make_schedule(cfg.p, cfg.iterations, cfg.resolved_schedule_mode(), cfg.seed)
    clients = [ClientState(w0, np.zeros_like(w0), prob) for prob in problems]
    ledger = CommLedger()
    trace: list[TraceRow] = []

    def emit(row: TraceRow) -> None:
        trace.append(row)
        if sink is not None:
            sink(row)

    def eval_row(round_idx: int, iteration: int, w: np.ndarray) -> TraceRow:
        sum_h, mean_h, _ = control_diagnostics(clients)
        if evaluate:
            metric, train_loss = evaluate_pruned(w, kk, data, problems)
        else:
            metric, train_loss = float("nan"), global_loss(problems, w)
        return TraceRow(
            round=round_idx,
            iteration=iteration,
            uplink_bits=ledger.uplink_bits,
            downlink_bits=ledger.downlink_bits,
            train_loss=train_loss,
            test_metric=metric,
            sparsity=sparsity(w),
            sum_h_norm=sum_h,
            mean_h_norm=mean_h,
            w_norm=float(np.linalg.norm(w)),
        )

    first = eval_row(0, 0, w0)
    emit(first)
    initial_loss = first.train_loss

    w_shared = w0
    rounds = 0
    diverged = False
    diverged_round = None
    try:
        for t in range(cfg.iterations):
            for c in clients:
                if step == "plain":
                    c.w = local_step_plain(c, cfg.gamma)
                elif step == "ste":
                    c.w = local_step_ste(c, cfg.gamma, kk)
                elif step == "topk":
                    c.w = local_step_topk(c, cfg.gamma, kk)
                else:
                    c.w = local_step_soft(c, cfg.gamma, cfg.lambda_l1)

            if not schedule[t]:
                skip_round(clients, cfg.variant)
                continue

            rounds += 1
            outcome = communication_round(clients, cfg.variant, cfg.gamma, cfg.p,
                                          kk, cfg.value_bits)
            ledger.add_round(outcome.uplink_bits, outcome.downlink_bits)
            w_shared = clients[0].w
            row = eval_row(rounds, t + 1, w_shared)
            emit(row)

            if (
                not np.isfinite(row.train_loss)
                or row.w_norm > cfg.divergence_w_norm
                or (np.isfinite(initial_loss)
                    and row.train_loss > cfg.divergence_loss_factor * max(abs(initial_loss), 1.0))
            ):
                raise DivergenceError("divergence guard tripped", rounds)
            if round_probe is not None and round_probe(t, rounds, clients, outcome):
                break
    except DivergenceError as err:
        diverged = True
        diverged_round = err.round_index if err.round_index is not None else rounds

    final_raw = w_shared
    return RunResult(
        final_w=top_k(final_raw, kk),
        final_w_raw=final_raw,
        trace=trace,
        ledger=ledger,
        rounds=rounds,
        diverged=diverged,
        diverged_round=diverged_round,
    )


def fixed_point_probe(
    problems: Sequence,
    w_star: np.ndarray,
    h_assignment: Sequence[np.ndarray],
    gamma: float,
    grad_tol: float = 1e-9,
) -> np.ndarray:
    """One plain step at the optimum followed by dense averaging (p = 1).

    With gradients summing to zero at ``w_star``, the aggregate equals
    w_star + (gamma / N) * sum_i h_i; a nonzero control-variate sum therefore
    pushes the average off the optimum by exactly that offset.
    """
    grads = [p.gradient(w_star) for p in problems]
    if float(np.linalg.norm(np.sum(grads, axis=0))) > grad_tol:
        raise ValueError("w_star does not satisfy first-order optimality")
    if len(h_assignment) != len(problems):
        raise ValueError("need one control variate per client")
    stepped = [w_star - gamma * (g - h) for g, h in zip(grads, h_assignment)]
    return np.sum(stepped, axis=0) / len(stepped)


def sweep_config(cfg: AlgorithmConfig, **changes) -> AlgorithmConfig:
    """Copy a config with some fields replaced (dataclasses.replace wrapper)."""
    return replace(cfg, **changes)
