"""Configuration-driven experiment runner.

A JSON config file fully determines a run: dataset construction, algorithm
hyperparameters, repeat count, and (optionally) a random-search spec over the
step size and the number of local steps. Outputs are a CSV trace per repeat
and a JSON summary; re-running the same file reproduces them byte for byte.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import FederatedDataset, PartitionSpec, load_csv_regression, synth_classification, synth_regression
from .federation import AlgorithmConfig, RunResult, run_algorithm
from .metrics import TraceRow, evaluate_pruned, speedup_table, test_loss
from .objectives import build_problems
from .ops import SparsityTarget, sparsity

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "SearchSpec",
    "SpeedupSpec",
    "RunSummary",
    "parse_config",
    "config_from_dict",
    "config_to_dict",
    "build_dataset",
    "run_single",
    "run_search",
    "tune_lambda_l1",
    "write_trace_csv",
    "read_trace_csv",
    "resolve_output_dir",
]

TRACE_HEADER = "round,iter,uplink_bits,downlink_bits,train_loss,test_metric,sparsity,sum_h_norm,mean_h_norm,w_norm"
OUTPUT_DIR_ENV = "SPARSESKIP_OUT"


class ConfigError(ValueError):
    """A config file failed validation."""


@dataclass(frozen=True)
class SearchSpec:
    """Random-search ranges: log-uniform gamma, uniform integer 1/p."""

    gamma_range: tuple[float, float] = (1e-6, 1.0)
    inv_p_range: tuple[int, int] = (1, 256)
    samples: int = 20
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ConfigError(f"search.gamma_range invalid: {self.gamma_range}")
        lo, hi = self.inv_p_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"search.inv_p_range invalid: {self.inv_p_range}")
        if self.samples < 1:
            raise ConfigError("search.samples must be >= 1")


@dataclass(frozen=True)
class SpeedupSpec:
    """Bits-to-threshold table request against previously written traces."""

    thresholds: tuple[float, ...]
    baseline: str
    extra_traces: dict[str, str] = field(default_factory=dict)
    higher_is_better: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    algorithm: AlgorithmConfig
    repeats: int = 1
    seed: int = 0
    output_dir: str = "runs/out"
    lambda_auto: bool = False
    search: SearchSpec | None = None
    speedup: SpeedupSpec | None = None

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")


@dataclass
class RunSummary:
    """Per-repeat final metrics plus their mean and standard error."""

    config: dict
    repeats: list[dict]
    mean_test_metric: float
    stderr_test_metric: float
    mean_test_loss: float
    mean_train_loss: float
    trace_paths: list[str]
    any_diverged: bool
    tuned_lambda_l1: float | None = None
    best_hyperparameters: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# config parsing

_DATASET_KEYS = {
    "synth_regression": {
        "kind", "clients", "dim", "k_true", "hetero", "noise_sigma",
        "n_per_client", "seed", "n_test", "alpha",
    },
    "synth_classification": {
        "kind", "clients", "dim", "classes", "n_total", "seed", "separation",
        "dirichlet_alpha", "lognormal_sigma2", "partition_seed", "n_test", "alpha",
    },
    "csv_regression": {
        "kind", "train_path", "test_path", "group_prefix_cols", "scale",
        "skip_header", "alpha",
    },
}
_ALGORITHM_KEYS = {
    "variant", "gamma", "p", "iterations", "sparsity", "schedule_mode",
    "lambda_l1", "seed", "local_step_override", "divergence_loss_factor",
    "divergence_w_norm", "value_bits",
}
_TOP_KEYS = {"dataset", "algorithm", "repeats", "seed", "output_dir", "search", "speedup"}
_SEARCH_KEYS = {"gamma_range", "inv_p_range", "samples", "seed"}
_SPEEDUP_KEYS = {"thresholds", "baseline", "extra_traces", "higher_is_better"}

_DATASET_DEFAULT_ALPHA = {"synth_regression": 1.0, "synth_classification": 1e-4,
                          "csv_regression": 1e3}


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _parse_sparsity(value) -> SparsityTarget:
    if isinstance(value, dict):
        _check_keys(value, {"count", "fraction"}, "algorithm.sparsity")
        return SparsityTarget(**value)
    return SparsityTarget(fraction=float(value))


def parse_config(path: str | Path) -> ExperimentConfig:
    """Load and validate a JSON experiment config."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    _check_keys(raw, _TOP_KEYS, "config")
    for required in ("dataset", "algorithm"):
        if required not in raw:
            raise ConfigError(f"missing required section {required!r}")

    ds = dict(raw["dataset"])
    kind = ds.get("kind")
    if kind not in _DATASET_KEYS:
        raise ConfigError(f"dataset.kind must be one of {sorted(_DATASET_KEYS)}, got {kind!r}")
    _check_keys(ds, _DATASET_KEYS[kind], f"dataset ({kind})")
    ds.setdefault("alpha", _DATASET_DEFAULT_ALPHA[kind])
    if ds["alpha"] < 0:
        raise ConfigError("dataset.alpha must be >= 0")

    algo_raw = dict(raw["algorithm"])
    _check_keys(algo_raw, _ALGORITHM_KEYS, "algorithm")
    if "sparsity" in algo_raw:
        try:
            algo_raw["sparsity"] = _parse_sparsity(algo_raw["sparsity"])
        except ValueError as err:
            raise ConfigError(f"algorithm.sparsity: {err}")
    lambda_auto = algo_raw.get("lambda_l1") == "auto"
    if lambda_auto:
        algo_raw["lambda_l1"] = 0.0
    try:
        algorithm = AlgorithmConfig(**algo_raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"algorithm: {err}")
    if lambda_auto and algorithm.variant != "randprox_l1":
        raise ConfigError("algorithm.lambda_l1 = 'auto' applies to randprox_l1 only")

    search = None
    if raw.get("search") is not None:
        sd = dict(raw["search"])
        _check_keys(sd, _SEARCH_KEYS, "search")
        if "gamma_range" in sd:
            sd["gamma_range"] = tuple(float(x) for x in sd["gamma_range"])
        if "inv_p_range" in sd:
            sd["inv_p_range"] = tuple(int(x) for x in sd["inv_p_range"])
        search = SearchSpec(**sd)

    speedup = None
    if raw.get("speedup") is not None:
        sp = dict(raw["speedup"])
        _check_keys(sp, _SPEEDUP_KEYS, "speedup")
        if "thresholds" not in sp or "baseline" not in sp:
            raise ConfigError("speedup needs thresholds and baseline")
        sp["thresholds"] = tuple(float(x) for x in sp["thresholds"])
        speedup = SpeedupSpec(**sp)

    return ExperimentConfig(
        dataset=ds,
        algorithm=algorithm,
        repeats=int(raw.get("repeats", 1)),
        seed=int(raw.get("seed", 0)),
        output_dir=str(raw.get("output_dir", "runs/out")),
        lambda_auto=lambda_auto,
        search=search,
        speedup=speedup,
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved config (defaults filled in), JSON-serializable."""
    algo = asdict(cfg.algorithm)
    target = cfg.algorithm.sparsity
    algo["sparsity"] = (
        {"count": target.count} if target.count is not None else {"fraction": target.fraction}
    )
    if cfg.lambda_auto:
        algo["lambda_l1"] = "auto"
    return {
        "dataset": dict(cfg.dataset),
        "algorithm": algo,
        "repeats": cfg.repeats,
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "search": None if cfg.search is None else {
            "gamma_range": list(cfg.search.gamma_range),
            "inv_p_range": list(cfg.search.inv_p_range),
            "samples": cfg.search.samples,
            "seed": cfg.search.seed,
        },
        "speedup": None if cfg.speedup is None else {
            "thresholds": list(cfg.speedup.thresholds),
            "baseline": cfg.speedup.baseline,
            "extra_traces": dict(cfg.speedup.extra_traces),
            "higher_is_better": cfg.speedup.higher_is_better,
        },
    }


# ---------------------------------------------------------------------------
# dataset construction

def build_dataset(spec: dict) -> tuple[FederatedDataset, list]:
    """Instantiate the dataset named by a config's dataset section."""
    kind = spec["kind"]
    alpha = float(spec.get("alpha", _DATASET_DEFAULT_ALPHA[kind]))
    if kind == "synth_regression":
        dim = int(spec.get("dim", 50))
        data, _ = synth_regression(
            n_clients=int(spec.get("clients", 10)),
            dim=dim,
            k_true=int(spec.get("k_true", max(1, dim // 10))),
            hetero=float(spec.get("hetero", 0.5)),
            noise_sigma=float(spec.get("noise_sigma", 0.1)),
            n_per_client=int(spec.get("n_per_client", 20)),
            seed=int(spec.get("seed", 0)),
            n_test=spec.get("n_test"),
        )
    elif kind == "synth_classification":
        part = PartitionSpec(
            n_clients=int(spec.get("clients", 10)),
            dirichlet_alpha=float(spec.get("dirichlet_alpha", 0.3)),
            lognormal_sigma2=float(spec.get("lognormal_sigma2", 0.3)),
            seed=int(spec.get("partition_seed", spec.get("seed", 0))),
        )
        data = synth_classification(
            part,
            dim=int(spec.get("dim", 20)),
            n_classes=int(spec.get("classes", 2)),
            n_total=int(spec.get("n_total", 1000)),
            seed=int(spec.get("seed", 0)),
            separation=float(spec.get("separation", 3.0)),
            n_test=spec.get("n_test"),
        )
    elif kind == "csv_regression":
        data = load_csv_regression(
            spec["train_path"],
            group_prefix_cols=int(spec["group_prefix_cols"]),
            scale=bool(spec.get("scale", True)),
            test_path=spec.get("test_path"),
            skip_header=bool(spec.get("skip_header", False)),
        )
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    return data, build_problems(data, alpha)


# ---------------------------------------------------------------------------
# execution

def tune_lambda_l1(
    algo: AlgorithmConfig,
    data,
    problems,
    lo: float = 1e-8,
    hi: float | None = None,
    rounds: int = 24,
    tol: float = 0.02,
) -> float:
    """Bisect the l1 weight so the converged raw model hits the target sparsity.

    Larger weights produce sparser solutions; the search brackets the target
    zero-fraction and bisects in log space over full runs.
    """
    target = 1.0 - algo.sparsity.resolve(data.model_dim) / data.model_dim

    def achieved(lam: float) -> float:
        result = run_algorithm(replace(algo, lambda_l1=lam), data, problems, evaluate=False)
        return sparsity(result.final_w_raw)

    if hi is None:
        hi = 1e-2
        while achieved(hi) < target and hi < 1e12:
            hi *= 10.0
    best = hi
    for _ in range(rounds):
        mid = float(np.sqrt(lo * hi))
        s = achieved(mid)
        if abs(s - target) <= tol:
            return mid
        if s < target:
            lo = mid
        else:
            hi = mid
            best = mid
    return best


def _float_repr(x: float) -> str:
    return repr(float(x))


def write_trace_csv(path: str | Path, trace: list[TraceRow]) -> None:
    lines = [TRACE_HEADER]
    for r in trace:
        lines.append(",".join([
            str(r.round), str(r.iteration), str(r.uplink_bits), str(r.downlink_bits),
            _float_repr(r.train_loss), _float_repr(r.test_metric), _float_repr(r.sparsity),
            _float_repr(r.sum_h_norm), _float_repr(r.mean_h_norm), _float_repr(r.w_norm),
        ]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trace_csv(path: str | Path) -> list[TraceRow]:
    lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
    if lines[0] != TRACE_HEADER:
        raise ValueError(f"{path}: unexpected trace header")
    rows = []
    for line in lines[1:]:
        f = line.split(",")
        rows.append(TraceRow(int(f[0]), int(f[1]), int(f[2]), int(f[3]),
                             *(float(x) for x in f[4:])))
    return rows


def resolve_output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    """Output directory precedence: CLI flag, then environment, then config."""
    if override:
        return Path(override)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(cfg.output_dir)


def _repeat_record(cfg: ExperimentConfig, data, problems, result: RunResult) -> dict:
    k = cfg.algorithm.sparsity.resolve(data.model_dim)
    metric, train = evaluate_pruned(result.final_w, k, data, problems)
    return {
        "test_metric": metric,
        "train_loss": train,
        "test_loss": test_loss(result.final_w, data),
        "raw_sparsity": sparsity(result.final_w_raw),
        "rounds": result.rounds,
        "uplink_bits": result.ledger.uplink_bits,
        "downlink_bits": result.ledger.downlink_bits,
        "diverged": result.diverged,
        "diverged_round": result.diverged_round,
    }


def run_single(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    threads: int = 1,
    data_problems: tuple | None = None,
    write: bool = True,
) -> RunSummary:
    """Execute ``cfg.repeats`` runs with seeds seed+0..seed+r-1 and summarize.

    Writes one trace CSV per repeat plus ``summary.json`` (and
    ``speedup.json`` when requested) unless ``write`` is False. Divergence in
    a repeat is recorded, not raised.
    """
    out = resolve_output_dir(cfg, None if out_dir is None else str(out_dir))
    data, problems = data_problems if data_problems is not None else build_dataset(cfg.dataset)

    algo = cfg.algorithm
    tuned = None
    if cfg.lambda_auto:
        tuned = tune_lambda_l1(replace(algo, seed=cfg.seed), data, problems)
        algo = replace(algo, lambda_l1=tuned)

    def one(r: int) -> RunResult:
        return run_algorithm(replace(algo, seed=cfg.seed + r), data, problems)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(cfg.repeats)))
    else:
        results = [one(r) for r in range(cfg.repeats)]

    records = [_repeat_record(cfg, data, problems, res) for res in results]
    metrics = np.array([rec["test_metric"] for rec in records], dtype=np.float64)
    finite = metrics[np.isfinite(metrics)]
    mean = float(finite.mean()) if finite.size else float("nan")
    stderr = (
        float(np.std(finite, ddof=1) / np.sqrt(finite.size)) if finite.size > 1 else 0.0
    )

    trace_paths = [f"trace_rep{r}.csv" for r in range(cfg.repeats)]
    summary = RunSummary(
        config=config_to_dict(cfg),
        repeats=records,
        mean_test_metric=mean,
        stderr_test_metric=stderr,
        mean_test_loss=float(np.mean([rec["test_loss"] for rec in records])),
        mean_train_loss=float(np.mean([rec["train_loss"] for rec in records])),
        trace_paths=trace_paths,
        any_diverged=any(rec["diverged"] for rec in records),
        tuned_lambda_l1=tuned,
    )

    if write:
        out.mkdir(parents=True, exist_ok=True)
        for rel, res in zip(trace_paths, results):
            write_trace_csv(out / rel, res.trace)
        _write_json(out / "summary.json", summary.to_dict())
        if cfg.speedup is not None:
            _write_json(out / "speedup.json", _speedup_from_spec(cfg, out, trace_paths[0]))
    return summary


def _speedup_from_spec(cfg: ExperimentConfig, out: Path, own_trace: str) -> dict:
    traces = {cfg.algorithm.variant: read_trace_csv(out / own_trace)}
    for name, p in cfg.speedup.extra_traces.items():
        traces[name] = read_trace_csv(p)
    return speedup_table(traces, cfg.speedup.thresholds, cfg.speedup.baseline,
                         cfg.speedup.higher_is_better)


def run_search(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    threads: int = 1,
    write: bool = True,
) -> tuple[RunSummary, list[dict]]:
    """Random search over (gamma, 1/p): run every candidate, keep the best.

    Selection is by highest mean final test metric, ties broken by lower
    cumulative uplink bits. Returns the winning summary and the full
    candidate table, both also written to disk.
    """
    if cfg.search is None:
        raise ConfigError("config has no search section")
    out = resolve_output_dir(cfg, None if out_dir is None else str(out_dir))
    data_problems = build_dataset(cfg.dataset)

    rng = np.random.default_rng(cfg.search.seed)
    lo_g, hi_g = cfg.search.gamma_range
    lo_p, hi_p = cfg.search.inv_p_range
    candidates = []
    for _ in range(cfg.search.samples):
        gamma = float(np.exp(rng.uniform(np.log(lo_g), np.log(hi_g))))
        inv_p = int(rng.integers(lo_p, hi_p + 1))
        candidates.append((gamma, inv_p))

    def run_candidate(job) -> tuple[int, RunSummary]:
        idx, (gamma, inv_p) = job
        sub = replace(
            cfg,
            algorithm=replace(cfg.algorithm, gamma=gamma, p=1.0 / inv_p),
            search=None,
            speedup=None,
        )
        summary = run_single(sub, out / f"candidate_{idx:03d}", threads=1,
                             data_problems=data_problems, write=write)
        return idx, summary

    jobs = list(enumerate(candidates))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            summaries = dict(pool.map(run_candidate, jobs))
    else:
        summaries = dict(map(run_candidate, jobs))

    table = []
    scores = []
    for idx, (gamma, inv_p) in enumerate(candidates):
        s = summaries[idx]
        bits = float(np.mean([rec["uplink_bits"] for rec in s.repeats]))
        usable = np.isfinite(s.mean_test_metric) and not s.any_diverged
        scores.append(s.mean_test_metric if usable else float("-inf"))
        table.append({
            "candidate": idx, "gamma": gamma, "inv_p": inv_p,
            "mean_test_metric": s.mean_test_metric if np.isfinite(s.mean_test_metric) else None,
            "mean_test_loss": s.mean_test_loss if np.isfinite(s.mean_test_loss) else None,
            "mean_train_loss": s.mean_train_loss if np.isfinite(s.mean_train_loss) else None,
            "mean_uplink_bits": bits,
            "any_diverged": s.any_diverged,
        })

    best_idx = min(range(len(table)),
                   key=lambda i: (-scores[i], table[i]["mean_uplink_bits"], i))
    best = summaries[best_idx]
    best.best_hyperparameters = {
        "candidate": best_idx,
        "gamma": candidates[best_idx][0],
        "inv_p": candidates[best_idx][1],
    }
    if write:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "search.json",
                    {"candidates": table, "best": best.best_hyperparameters})
        _write_json(out / "summary.json", best.to_dict())
    return best, table


def _sanitize(value):
    """Recursively map non-finite floats to null so the JSON stays standard."""
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    return value


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_sanitize(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")
