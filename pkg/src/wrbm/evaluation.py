"""Model quality estimates.

Partition function by annealed importance sampling along a weight-scaling
path, KL divergence against held-out data, smoothed transport distance
between sample populations, and a two-component PCA export for plotting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._util import STREAM_BOOTSTRAP, chain_rngs, fill_uniform, sigmoid, softplus, tagged_rng
from .ot_sinkhorn import DEFAULT_TOL, CostSpec, EmpiricalMeasure, smoothed_w_distance
from .rbm import RbmParams, free_energy

_BOOTSTRAP_SAMPLES = 200


class AisError(RuntimeError):
    """Annealing produced a non-finite weight; the estimate is unusable."""


@dataclass(frozen=True)
class AisEstimate:
    """log Z estimate with its per-run log-weights and a bootstrap error bar.

    log_weights already include the base model's exact log partition, so
    log_z is exactly their log-mean-exp.
    """

    log_z: float
    se: float
    log_weights: np.ndarray
    n_runs: int
    n_temps: int

    def __post_init__(self):
        if self.n_runs < 1 or self.n_temps < 1:
            raise ValueError("n_runs and n_temps must be positive")
        if self.log_weights.shape != (self.n_runs,):
            raise ValueError("one log-weight per run required")
        expected = logsumexp(self.log_weights) - math.log(self.n_runs)
        if abs(self.log_z - expected) > 1e-9:
            raise ValueError("log_z must equal log-mean-exp of log_weights")


def base_log_partition(params: RbmParams) -> float:
    """Exact log Z of the model with its couplings removed (independent units)."""
    return float(softplus(params.a).sum() - params.a @ params.mu
                 + softplus(params.b).sum() - params.b @ params.nu)


def ais_log_z(params: RbmParams, n_runs: int = 100, n_temps: int = 1000,
              seed: int = 0, betas: np.ndarray | None = None) -> AisEstimate:
    """Estimate log Z by annealing the coupling strength from 0 to 1.

    The base model keeps the biases and offsets but zeroes the weights, so its
    partition function is exact. Each run starts from an independent draw of
    the base model and performs one Gibbs sweep per temperature; the default
    schedule is linear in the coupling scale. Runs use per-chain streams, so
    the result is independent of execution order.
    """
    if betas is None:
        betas = np.linspace(0.0, 1.0, n_temps + 1)[1:]
    else:
        betas = np.asarray(betas, dtype=np.float64)
        n_temps = betas.shape[0]
    if n_runs < 1 or n_temps < 1:
        raise ValueError("n_runs and n_temps must be positive")

    rngs = chain_rngs(seed, n_runs)
    base_px = sigmoid(params.a)
    x = (fill_uniform(rngs, params.d) < base_px).astype(np.float64)
    log_w = np.zeros(n_runs)

    def scaled_free_energy(xmat, t):
        # overflow surfaces as non-finite weights, trapped right below
        with np.errstate(over="ignore", invalid="ignore"):
            xc = xmat - params.mu
            z = (xc @ params.W.T) * t + params.b
            return -(xc @ params.a) + z @ params.nu - softplus(z).sum(axis=1)

    prev_t = 0.0
    for k, t in enumerate(betas):
        log_w += scaled_free_energy(x, prev_t) - scaled_free_energy(x, t)
        if not np.isfinite(log_w).all():
            raise AisError(f"non-finite importance weight at temperature step {k}")
        xc = x - params.mu
        ph = sigmoid((xc @ params.W.T) * t + params.b)
        y = (fill_uniform(rngs, params.h) < ph).astype(np.float64)
        pv = sigmoid(params.a + ((y - params.nu) @ params.W) * t)
        x = (fill_uniform(rngs, params.d) < pv).astype(np.float64)
        prev_t = t

    log_weights = log_w + base_log_partition(params)
    log_z = float(logsumexp(log_weights) - math.log(n_runs))

    boot = tagged_rng(seed, STREAM_BOOTSTRAP)
    idx = boot.integers(0, n_runs, size=(_BOOTSTRAP_SAMPLES, n_runs))
    estimates = logsumexp(log_weights[idx], axis=1) - math.log(n_runs)
    se = float(estimates.std(ddof=1))

    return AisEstimate(log_z=log_z, se=se, log_weights=log_weights,
                       n_runs=n_runs, n_temps=n_temps)


def empirical_entropy(rows: np.ndarray) -> float:
    """Plug-in entropy of the empirical measure; duplicates detected by exact
    bit equality."""
    rows = np.asarray(rows)
    if rows.shape[0] == 0:
        raise ValueError("empty sample")
    _, counts = np.unique(rows, axis=0, return_counts=True)
    freq = counts / rows.shape[0]
    return float(-(freq * np.log(freq)).sum())


def kl_estimate(params: RbmParams, data_split: np.ndarray, ais: AisEstimate) -> float:
    """KL divergence from the empirical measure on the split to the model:
    mean free energy plus (estimated) log Z minus the plug-in entropy."""
    data_split = np.asarray(data_split)
    if data_split.shape[0] == 0:
        raise ValueError("empty data split")
    mean_f = float(np.mean(free_energy(params, data_split)))
    return mean_f + ais.log_z - empirical_entropy(data_split)


def wgamma_eval(model_rows: np.ndarray, data_rows: np.ndarray, cost: CostSpec,
                tol: float = DEFAULT_TOL) -> float:
    """Smoothed transport distance between the uniform measures on two row
    sets (duplicates collapse to weights). For identical populations this is
    the smoothing entropy floor, a negative value bounded by gamma*log(n),
    reported as-is."""
    p = EmpiricalMeasure.from_rows(model_rows)
    q = EmpiricalMeasure.from_rows(data_rows)
    return smoothed_w_distance(p, q, cost, tol=tol)


@dataclass(frozen=True)
class PcaProjection:
    """Top-2 principal directions of a data sample and the projections of the
    data and a model sample onto them (both centered at the data mean)."""

    components: np.ndarray
    projected_data: np.ndarray
    projected_model: np.ndarray
    explained_variance: np.ndarray

    def __post_init__(self):
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(2), atol=1e-10):
            raise ValueError("components must be orthonormal")


def pca_project(data_split: np.ndarray, model_sample: np.ndarray) -> PcaProjection:
    """Exact eigendecomposition of the data covariance; components are signed
    so their largest-magnitude entry is positive, which makes the output
    reproducible without affecting the subspace."""
    data = np.asarray(data_split, dtype=np.float64)
    model = np.asarray(model_sample, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 3:
        raise ValueError("need at least 3 data rows")
    if data.shape[1] < 2:
        raise ValueError("need at least 2 variables for 2 components")
    center = data.mean(axis=0)
    xc = data - center
    cov = (xc.T @ xc) / (data.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    components = eigvecs[:, order].T.copy()
    variance = np.clip(eigvals[order], 0.0, None)
    if variance[0] <= 1e-12:
        raise ValueError("constant data has no principal directions")
    for row in components:
        peak = np.argmax(np.abs(row))
        if row[peak] < 0:
            row *= -1.0
    return PcaProjection(
        components=components,
        projected_data=xc @ components.T,
        projected_model=(model - center) @ components.T,
        explained_variance=variance,
    )


def write_pca_csv(proj: PcaProjection, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("source,pc1,pc2\n")
        for name, points in (("data", proj.projected_data),
                             ("model", proj.projected_model)):
            for pc1, pc2 in points:
                fh.write(f"{name},{pc1!r},{pc2!r}\n")


def write_ais_json(est: AisEstimate, path, seed: int) -> None:
    payload = {"log_z": est.log_z, "se": est.se, "n_runs": est.n_runs,
               "n_temps": est.n_temps, "seed": seed}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")
