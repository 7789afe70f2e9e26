"""Deterministic federated-learning simulator for sparse-to-sparse training.

Local gradient steps with randomized or deterministic communication skipping,
client control variates, and hard/soft-thresholding pruning at the client or
the server, plus the bookkeeping (bits, metrics, traces) to compare variants
by communication cost.
"""

from .datasets import (
    ClientBlock,
    FederatedDataset,
    PartitionSpec,
    dirichlet_partition,
    load_csv_regression,
    synth_classification,
    synth_regression,
)
from .federation import (
    VARIANTS,
    AlgorithmConfig,
    ClientState,
    DivergenceError,
    RunResult,
    communication_round,
    fixed_point_probe,
    initial_model,
    local_step_plain,
    local_step_soft,
    local_step_ste,
    local_step_topk,
    make_schedule,
    run_algorithm,
    skip_round,
)
from .metrics import (
    CommLedger,
    TraceRow,
    accuracy,
    control_diagnostics,
    evaluate_pruned,
    payload_bits,
    r_squared,
    speedup_table,
    test_loss,
)
from .objectives import (
    RidgeProblem,
    SoftmaxProblem,
    build_problems,
    estimate_smoothness,
    global_gradient,
    global_loss,
    ridge_consensus_optimum,
)
from .ops import SparsityTarget, resolve_k, soft_threshold, sparsity, top_k, top_k_mask
from .runner import (
    ConfigError,
    ExperimentConfig,
    RunSummary,
    SearchSpec,
    SpeedupSpec,
    build_dataset,
    parse_config,
    run_search,
    run_single,
    tune_lambda_l1,
)

__version__ = "0.1.0"
