"""Gradient machinery and the two-phase optimization schedule.

Phase 1 fits the model by stochastic maximum likelihood with a quadratic
containment penalty. Phase 2 descends the smoothed transport distance between
the chain population and the data, blended with the phase-1 objective by the
weight lambda. lambda = inf degenerates to phase-1 training throughout (the
plain likelihood-trained baseline); lambda = 0 drops the blend entirely.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._util import STREAM_INIT, tagged_rng
from .dataset import BinaryDataset
from .ot_sinkhorn import (
    DEFAULT_TOL,
    CostSpec,
    EmpiricalMeasure,
    SinkhornError,
    mean_pairwise_hamming,
    sinkhorn,
)
from .rbm import (
    PcdSample,
    RbmParams,
    free_energy,
    free_energy_grad_means,
    pcd_refresh,
    save_checkpoint,
)

PARAM_DIVERGENCE_LIMIT = 1e6


class TrainError(RuntimeError):
    """Raised when optimization leaves the representable regime."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    lam is the blend weight between the transport term and the containment
    objective (math.inf selects the containment-only baseline); eta scales the
    quadratic penalty inside the containment objective. pcd_size = None uses
    one persistent chain per training example.
    """

    hidden_units: int
    lam: float
    eta: float
    gamma: float = 0.1
    lr_pretrain: float = 0.01
    lr_main: float = 0.01
    steps_pretrain: int = 3000
    steps_main: int = 3000
    pcd_size: int | None = None
    seed: int = 0
    tol_sinkhorn: float = DEFAULT_TOL

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ValueError(f"hidden_units must be >= 1, got {self.hidden_units}")
        if self.lam < 0 or math.isnan(self.lam):
            raise ValueError(f"lam must be >= 0 or inf, got {self.lam}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.lr_pretrain <= 0 or self.lr_main <= 0:
            raise ValueError("learning rates must be positive")
        if self.steps_pretrain < 0 or self.steps_main < 0:
            raise ValueError("step counts must be nonnegative")
        if self.pcd_size is not None and self.pcd_size < 2:
            raise ValueError("pcd_size must be at least 2: a single chain has "
                             "an identically zero transport gradient")
        if self.tol_sinkhorn <= 0:
            raise ValueError("tol_sinkhorn must be positive")


@dataclass(frozen=True)
class GradStats:
    """A gradient triple plus the objective pieces it came from."""

    grad_a: np.ndarray
    grad_W: np.ndarray
    grad_b: np.ndarray
    objective_terms: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("grad_a", "grad_W", "grad_b"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"non-finite {name}")
        if not all(math.isfinite(t) for t in self.objective_terms):
            raise ValueError(f"non-finite objective terms {self.objective_terms}")


def kl_gradient(params: RbmParams, data_batch: np.ndarray, pcd: PcdSample) -> GradStats:
    """Likelihood ascent direction: data-mean minus chain-mean of the
    free-energy gradient. The chain population stands in for the model mean,
    so it should have been refreshed for the current parameters already."""
    data_batch = np.atleast_2d(np.asarray(data_batch))
    if data_batch.shape[0] == 0:
        raise ValueError("empty data batch")
    da, dW, db = free_energy_grad_means(params, data_batch)
    ma, mW, mb = free_energy_grad_means(params, pcd.x)
    f_data = float(np.mean(free_energy(params, data_batch)))
    f_model = float(np.mean(free_energy(params, pcd.x)))
    return GradStats(grad_a=da - ma, grad_W=dW - mW, grad_b=db - mb,
                     objective_terms=(0.0, f_data - f_model, 0.0))


def wasserstein_gradient_from_measure(
    params: RbmParams,
    model: EmpiricalMeasure,
    data: EmpiricalMeasure,
    cost: CostSpec,
    tol: float = DEFAULT_TOL,
    warm_start=None,
):
    """Envelope-rule gradient of the smoothed transport distance with respect
    to the model parameters, for an arbitrary model-side measure: reweight the
    free-energy gradient over the support by the first dual potential and
    negate. Works for both the sampled measure (chains) and the exact one
    (enumeration), since the potential's centering kills the correction term
    involving the partition function in both cases."""
    result = sinkhorn(model, data, cost, tol=tol, warm_start=warm_start)
    ga, gW, gb = free_energy_grad_means(
        params, model.support, weights=model.weights * result.alpha_star)
    return (
        GradStats(grad_a=-ga, grad_W=-gW, grad_b=-gb,
                  objective_terms=(result.distance, 0.0, 0.0)),
        result,
    )


def wasserstein_gradient(
    params: RbmParams,
    data: EmpiricalMeasure,
    pcd: PcdSample,
    cost: CostSpec,
    tol: float = DEFAULT_TOL,
    warm_start=None,
):
    """Sampled form of the transport gradient: the model measure is uniform
    over the chain population with duplicates collapsed, so duplicating every
    chain changes nothing. Returns the stats together with the solved
    transport problem (for warm starts and logging)."""
    if len(pcd) < 2:
        raise ValueError("need at least 2 chains for a nonzero gradient")
    model = EmpiricalMeasure.from_rows(pcd.x)
    return wasserstein_gradient_from_measure(
        params, model, data, cost, tol=tol, warm_start=warm_start)


def omega_regularizer_gradient(
    params: RbmParams, data_batch: np.ndarray, pcd: PcdSample, eta: float
) -> GradStats:
    """Containment objective: the likelihood gradient plus 2*eta times the
    visible biases and weights (hidden biases are not penalized)."""
    kl = kl_gradient(params, data_batch, pcd)
    quad = float(eta * (params.a @ params.a + (params.W * params.W).sum()))
    return GradStats(
        grad_a=kl.grad_a + 2.0 * eta * params.a,
        grad_W=kl.grad_W + 2.0 * eta * params.W,
        grad_b=kl.grad_b,
        objective_terms=(0.0, kl.objective_terms[1], quad),
    )


@dataclass
class TrainResult:
    params: RbmParams
    pcd: PcdSample
    log: list[dict] = field(default_factory=list)


def _apply_update(params: RbmParams, stats: GradStats, lr: float) -> RbmParams:
    return replace(params,
                   a=params.a - lr * stats.grad_a,
                   W=params.W - lr * stats.grad_W,
                   b=params.b - lr * stats.grad_b)


def _check_divergence(params: RbmParams, step: int, phase: str) -> None:
    peak = max(np.abs(params.a).max(), np.abs(params.W).max(), np.abs(params.b).max())
    if peak > PARAM_DIVERGENCE_LIMIT:
        raise TrainError(
            f"parameter magnitude {peak:.3e} exceeds {PARAM_DIVERGENCE_LIMIT:.0e} "
            f"at {phase} step {step}; lower the learning rate or raise eta")


def _log_record(step, phase, stats: GradStats, sinkhorn_iterations=0) -> dict:
    w, kl, quad = stats.objective_terms
    return {
        "step": step,
        "phase": phase,
        "wasserstein": w,
        "kl_proxy": kl,
        "quad": quad,
        "grad_norm_a": float(np.linalg.norm(stats.grad_a)),
        "grad_norm_W": float(np.linalg.norm(stats.grad_W)),
        "grad_norm_b": float(np.linalg.norm(stats.grad_b)),
        "sinkhorn_iterations": sinkhorn_iterations,
    }


def initial_params(config: TrainConfig, train_rows: np.ndarray) -> RbmParams:
    """Starting point: tiny uniform weights, zero biases, visible offsets at
    the column means of the train split, hidden offsets at one half."""
    d = train_rows.shape[1]
    rng = tagged_rng(config.seed, STREAM_INIT)
    return RbmParams.init_random(
        d, config.hidden_units, rng, scale=0.01,
        mu=train_rows.mean(axis=0),
        nu=np.full(config.hidden_units, 0.5))


def train(config: TrainConfig, dataset: BinaryDataset, log_path=None) -> TrainResult:
    """Run both phases and return the model, its final chain population, and
    the per-step log (optionally mirrored to a JSON-lines file)."""
    train_rows = dataset.split("train")
    if train_rows.shape[0] < 2:
        raise ValueError("train split needs at least 2 rows")
    n_chains = config.pcd_size if config.pcd_size is not None else train_rows.shape[0]

    params = initial_params(config, train_rows)
    pcd = PcdSample.init(params, n_chains, config.seed)
    data_measure = EmpiricalMeasure.from_rows(train_rows)
    cost = CostSpec(gamma=config.gamma,
                    normalizer=mean_pairwise_hamming(data_measure))

    sink = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    log: list[dict] = []

    def emit(record: dict) -> None:
        log.append(record)
        if sink is not None:
            sink.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        for step in range(config.steps_pretrain):
            pcd = pcd_refresh(params, pcd)
            stats = omega_regularizer_gradient(params, train_rows, pcd, config.eta)
            params = _apply_update(params, stats, config.lr_pretrain)
            _check_divergence(params, step, "pretrain")
            emit(_log_record(step, "pretrain", stats))

        warm = None
        prev_support = None
        for step in range(config.steps_main):
            pcd = pcd_refresh(params, pcd)
            if math.isinf(config.lam):
                stats = omega_regularizer_gradient(params, train_rows, pcd, config.eta)
                params = _apply_update(params, stats, config.lr_main)
                _check_divergence(params, step, "main")
                emit(_log_record(step, "main", stats))
                continue

            support = np.unique(pcd.x, axis=0)
            if prev_support is None or not np.array_equal(support, prev_support):
                warm = None
            w_stats, plan = wasserstein_gradient(
                params, data_measure, pcd, cost,
                tol=config.tol_sinkhorn, warm_start=warm)
            warm, prev_support = (plan.u, plan.v), support

            if config.lam == 0.0:
                stats = w_stats
                lr = config.lr_main
            else:
                omega = omega_regularizer_gradient(params, train_rows, pcd, config.eta)
                stats = GradStats(
                    grad_a=w_stats.grad_a + config.lam * omega.grad_a,
                    grad_W=w_stats.grad_W + config.lam * omega.grad_W,
                    grad_b=w_stats.grad_b + config.lam * omega.grad_b,
                    objective_terms=(w_stats.objective_terms[0],
                                     omega.objective_terms[1],
                                     omega.objective_terms[2]),
                )
                lr = config.lr_main * min(1.0, 1.0 / config.lam)
            params = _apply_update(params, stats, lr)
            _check_divergence(params, step, "main")
            emit(_log_record(step, "main", stats, sinkhorn_iterations=plan.iterations))
    except ValueError as exc:
        # Shapes are consistent by construction here, so a ValueError means
        # a non-finite gradient or objective: a numerical failure.
        raise TrainError(f"numerical failure during training: {exc}") from exc
    finally:
        if sink is not None:
            sink.close()

    return TrainResult(params=params, pcd=pcd, log=log)


def cell_seed(base_seed: int, lam: float, eta: float) -> int:
    """Stable per-cell seed derived from the base seed and the grid point."""
    digest = hashlib.sha256(f"{base_seed}:{lam!r}:{eta!r}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (1 << 40)


def format_lambda(lam: float) -> str:
    return "inf" if math.isinf(lam) else repr(lam)


@dataclass
class GridResult:
    """Per-cell validation table plus the winners under each criterion."""

    rows: list[dict]
    best_by_kl: dict | None
    best_by_wgamma: dict | None


def _default_cell_criteria(dataset: BinaryDataset, ais_runs: int, ais_temps: int):
    """Validation-split KL (via annealed importance sampling) and smoothed
    transport distance, the two selection criteria for the grid."""
    from . import evaluation

    valid_rows = dataset.split("valid")
    train_measure = EmpiricalMeasure.from_rows(dataset.split("train"))
    normalizer = mean_pairwise_hamming(train_measure)

    def evaluate(result: TrainResult, config: TrainConfig):
        ais = evaluation.ais_log_z(result.params, n_runs=ais_runs,
                                   n_temps=ais_temps, seed=config.seed)
        kl = evaluation.kl_estimate(result.params, valid_rows, ais)
        cost = CostSpec(gamma=config.gamma, normalizer=normalizer)
        w = evaluation.wgamma_eval(result.pcd.x, valid_rows, cost,
                                   tol=config.tol_sinkhorn)
        return kl, w

    return evaluate


def grid_search(
    base_config: TrainConfig,
    dataset: BinaryDataset,
    eta_grid,
    lambda_grid,
    out_dir,
    ais_runs: int = 100,
    ais_temps: int = 1000,
    evaluate=None,
    keep_logs: bool = False,
) -> GridResult:
    """Train one model per (lambda, eta) cell and score it on the validation
    split.

    evaluate(result, config) -> (kl_validation, wgamma_validation) may be
    supplied to replace the default criteria (tests use cheap ones). Cell
    failures are recorded in the table (error column) and excluded from the
    argmins. Each cell runs on its own seed derived from (base seed, cell).
    """
    eta_grid, lambda_grid = list(eta_grid), list(lambda_grid)
    if not eta_grid or not lambda_grid:
        raise ValueError("grids must be non-empty")
    if evaluate is None:
        evaluate = _default_cell_criteria(dataset, ais_runs, ais_temps)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for lam in lambda_grid:
        for eta in eta_grid:
            config = replace(base_config, lam=lam, eta=eta,
                             seed=cell_seed(base_config.seed, lam, eta))
            stem = f"rbm_lambda_{format_lambda(lam)}_eta_{repr(eta)}"
            row = {"lambda": lam, "eta": eta, "kl_validation": math.nan,
                   "wgamma_validation": math.nan,
                   "checkpoint_path": "", "error": ""}
            try:
                log_path = out_dir / f"{stem}.jsonl" if keep_logs else None
                result = train(config, dataset, log_path=log_path)
                kl_val, w_val = evaluate(result, config)
                path = out_dir / f"{stem}.ckpt"
                save_checkpoint(result.params, path, metadata={
                    "lambda": format_lambda(lam), "eta": repr(eta),
                    "gamma": repr(config.gamma), "seed": config.seed})
                row.update(kl_validation=float(kl_val),
                           wgamma_validation=float(w_val),
                           checkpoint_path=str(path))
            except (TrainError, SinkhornError, ValueError) as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)

    ok = [r for r in rows if not r["error"]]
    best_kl = min(ok, key=lambda r: r["kl_validation"]) if ok else None
    best_w = min(ok, key=lambda r: r["wgamma_validation"]) if ok else None
    return GridResult(rows=rows, best_by_kl=best_kl, best_by_wgamma=best_w)


def write_grid_csv(result: GridResult, path) -> None:
    """Contour table: one row per cell, lambda serialized as 'inf' when infinite."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("lambda,eta,kl_validation,wgamma_validation,checkpoint_path\n")
        for row in result.rows:
            fh.write(",".join([
                format_lambda(row["lambda"]),
                repr(row["eta"]),
                repr(row["kl_validation"]),
                repr(row["wgamma_validation"]),
                row["checkpoint_path"],
            ]) + "\n")
