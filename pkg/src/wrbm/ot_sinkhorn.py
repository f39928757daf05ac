"""Entropy-smoothed optimal transport between empirical measures on bit vectors.

Solves min_pi <D, pi> - gamma*H(pi) over couplings of two discrete measures by
Sinkhorn scaling of the Gibbs kernel K = exp(-D/gamma), with an automatic
log-domain fallback when K underflows. The centered dual potential on the
first measure is the quantity consumed by gradient-based training: it is the
derivative of the smoothed distance with respect to the first marginal along
simplex-tangent directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._util import hamming_matrix

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 10_000

# Gibbs kernel entries below this are unreliable in the plain iteration.
_UNDERFLOW_FLOOR = 1e-300
# Below this smoothing level the plain iteration is too fragile to bother with.
_LOG_DOMAIN_GAMMA = 0.05


class SinkhornError(RuntimeError):
    """Raised when the scaling iteration fails to reach the marginal tolerance."""

    def __init__(self, message: str, marginal_err: float, iterations: int):
        super().__init__(message)
        self.marginal_err = marginal_err
        self.iterations = iterations


@dataclass(frozen=True)
class CostSpec:
    """Ground-cost configuration: Hamming distance divided by a data-derived scale."""

    gamma: float
    normalizer: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.normalizer > 0:
            raise ValueError(f"normalizer must be positive, got {self.normalizer}")


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Discrete probability measure on distinct bit vectors.

    support is (n, d) with entries in {0,1}; weights are strictly positive and
    sum to 1. Use from_rows to build one from raw (possibly repeating) samples.
    """

    support: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_rows(cls, rows: np.ndarray, weights: np.ndarray | None = None) -> "EmpiricalMeasure":
        """Collapse duplicate rows (summing weights), drop zero-weight points, normalize.

        Rows default to uniform weight 1/N. The support is sorted
        lexicographically, so equal row multisets produce identical measures.
        """
        rows = np.ascontiguousarray(rows, dtype=np.uint8)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise ValueError(f"need a non-empty (n, d) row matrix, got shape {rows.shape}")
        if not np.isin(rows, (0, 1)).all():
            raise ValueError("rows must be 0/1 valued")
        if weights is None:
            w = np.full(rows.shape[0], 1.0 / rows.shape[0])
        else:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (rows.shape[0],):
                raise ValueError(f"weights shape {w.shape} does not match {rows.shape[0]} rows")
            if (w < 0).any():
                raise ValueError("weights must be nonnegative")
            total = w.sum()
            if not total > 0:
                raise ValueError("weights sum to zero")
            w = w / total
        support, inverse = np.unique(rows, axis=0, return_inverse=True)
        collapsed = np.zeros(support.shape[0], dtype=np.float64)
        np.add.at(collapsed, inverse.ravel(), w)
        keep = collapsed > 0.0
        return cls(support=support[keep], weights=collapsed[keep])

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def __len__(self) -> int:
        return self.support.shape[0]


@dataclass(frozen=True)
class TransportPlanDual:
    """Converged Sinkhorn scalings plus the quantities derived from them.

    alpha_star is the dual potential of the first measure, centered so that
    its weighted mean under that measure is zero (for uniform weights this is
    the usual centering by the geometric mean of u). distance is the primal
    smoothed value <D>_pi - gamma*H(pi) evaluated on the converged plan;
    transport_term and plan_entropy expose the two pieces separately.
    """

    u: np.ndarray
    v: np.ndarray
    alpha_star: np.ndarray
    beta_star: np.ndarray
    distance: float
    iterations: int
    marginal_err: float
    transport_term: float = field(default=math.nan)
    plan_entropy: float = field(default=math.nan)
    log_domain: bool = field(default=False)


def mean_pairwise_hamming(data: EmpiricalMeasure) -> float:
    """Expected Hamming distance between two independent draws from the measure.

    Identical pairs contribute zero, so a measure concentrated on a single
    point has no usable scale and is rejected.
    """
    if len(data) < 2:
        raise ValueError("mean pairwise Hamming is zero for a single-point measure")
    h = hamming_matrix(data.support, data.support)
    return float(data.weights @ h @ data.weights)


def cost_matrix(p: EmpiricalMeasure, q: EmpiricalMeasure, spec: CostSpec) -> np.ndarray:
    """Normalized-Hamming ground costs between the two supports."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    return hamming_matrix(p.support, q.support) / spec.normalizer


def _plain_iterations(K, p, q, tol, max_iter, u0, v0):
    """Classic multiplicative scaling. Returns None on under/overflow."""
    u, v = u0, v0
    err = math.inf
    for it in range(1, max_iter + 1):
        u = p / (K @ v)
        v = q / (K.T @ u)
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            return None
        row = u * (K @ v)
        col = v * (K.T @ u)
        err = max(np.abs(row - p).max(), np.abs(col - q).max())
        if err <= tol:
            return np.log(u), np.log(v), it, err
    raise SinkhornError(
        f"no convergence after {max_iter} iterations (marginal violation {err:.3e})",
        marginal_err=err, iterations=max_iter,
    )


def _log_iterations(logK, logp, logq, tol, max_iter, logu0, logv0):
    """Same fixed point computed with log-sum-exp reductions."""
    logu, logv = logu0, logv0
    err = math.inf
    for it in range(1, max_iter + 1):
        logu = logp - logsumexp(logK + logv[None, :], axis=1)
        logv = logq - logsumexp(logK + logu[:, None], axis=0)
        lp = logu[:, None] + logK + logv[None, :]
        row = np.exp(logsumexp(lp, axis=1))
        col = np.exp(logsumexp(lp, axis=0))
        err = max(np.abs(row - np.exp(logp)).max(), np.abs(col - np.exp(logq)).max())
        if err <= tol:
            return logu, logv, it, err
    raise SinkhornError(
        f"no convergence after {max_iter} iterations (marginal violation {err:.3e})",
        marginal_err=err, iterations=max_iter,
    )


def sinkhorn(
    p: EmpiricalMeasure,
    q: EmpiricalMeasure,
    spec: CostSpec,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    warm_start: tuple[np.ndarray, np.ndarray] | None = None,
) -> TransportPlanDual:
    """Solve the smoothed transport problem between p and q.

    Convergence is declared when the max-norm violation of both marginals
    drops to tol. warm_start, if given, is a previous (u, v) pair for the same
    support sizes; it only changes the iteration count, not the fixed point.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    D = cost_matrix(p, q, spec)
    gamma = spec.gamma
    logK = -D / gamma

    if warm_start is not None:
        u0, v0 = warm_start
        u0 = np.asarray(u0, dtype=np.float64)
        v0 = np.asarray(v0, dtype=np.float64)
        if (u0.shape != (len(p),) or v0.shape != (len(q),)
                or not (np.isfinite(u0).all() and np.isfinite(v0).all())
                or (u0 <= 0).any() or (v0 <= 0).any()):
            u0 = np.full(len(p), 1.0 / len(p))
            v0 = np.full(len(q), 1.0 / len(q))
    else:
        u0 = np.full(len(p), 1.0 / len(p))
        v0 = np.full(len(q), 1.0 / len(q))

    use_log = gamma <= _LOG_DOMAIN_GAMMA or logK.min() < math.log(_UNDERFLOW_FLOOR)
    out = None
    if not use_log:
        out = _plain_iterations(np.exp(logK), p.weights, q.weights, tol, max_iter, u0, v0)
        log_domain = False
    if out is None:
        out = _log_iterations(
            logK, np.log(p.weights), np.log(q.weights), tol, max_iter, np.log(u0), np.log(v0)
        )
        log_domain = True
    logu, logv, iterations, err = out

    log_plan = logu[:, None] + logK + logv[None, :]
    plan = np.exp(log_plan)
    transport = float((plan * D).sum())
    entropy = float(-(np.where(plan > 0, plan * log_plan, 0.0)).sum())
    distance = transport - gamma * entropy

    # Center alpha by the weighted geometric mean of u so <alpha>_p = 0; with
    # uniform weights this is the plain geometric mean. beta picks up the
    # complementary constant, making (alpha, beta) exactly dual-feasible with
    # plan entries exp((alpha_i + beta_j - D_ij)/gamma - 1).
    log_u_tilde = float(p.weights @ logu)
    alpha = gamma * (logu - log_u_tilde)
    beta = gamma * logv + gamma * (1.0 + log_u_tilde)

    # The scalings themselves can overflow at very small gamma; the potentials
    # and the distance stay finite, so an inf here only disables warm starts.
    with np.errstate(over="ignore"):
        u_lin, v_lin = np.exp(logu), np.exp(logv)
    return TransportPlanDual(
        u=u_lin, v=v_lin, alpha_star=alpha, beta_star=beta,
        distance=distance, iterations=iterations, marginal_err=err,
        transport_term=transport, plan_entropy=entropy, log_domain=log_domain,
    )


def smoothed_w_distance(
    p: EmpiricalMeasure, q: EmpiricalMeasure, spec: CostSpec,
    tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
) -> float:
    """Smoothed transport distance only; see sinkhorn for the full result."""
    return sinkhorn(p, q, spec, tol=tol, max_iter=max_iter).distance


def dual_objective(
    p: EmpiricalMeasure, q: EmpiricalMeasure,
    alpha: np.ndarray, beta: np.ndarray, spec: CostSpec,
) -> float:
    """Value of the dual at arbitrary potentials: <a>_p + <b>_q - gamma*sum(e^((a+b-D)/g - 1)).

    Weak duality bounds every evaluation by the primal optimum; equality holds
    at the converged potentials. Test support, not used in training.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if alpha.shape != (len(p),) or beta.shape != (len(q),):
        raise ValueError("potential lengths must match the support sizes")
    D = cost_matrix(p, q, spec)
    exponent = (alpha[:, None] + beta[None, :] - D) / spec.gamma - 1.0
    penalty = spec.gamma * math.exp(logsumexp(exponent))
    return float(p.weights @ alpha + q.weights @ beta - penalty)


def write_debug_csv(result: TransportPlanDual, D: np.ndarray, path) -> None:
    """Dump (D, u, v, alpha, distance, iterations) as a flat CSV bundle."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# distance={result.distance!r} iterations={result.iterations} "
                 f"marginal_err={result.marginal_err!r} log_domain={result.log_domain}\n")
        fh.write("kind,i,j,value\n")
        for i in range(D.shape[0]):
            for j in range(D.shape[1]):
                fh.write(f"D,{i},{j},{D[i, j]!r}\n")
        for name, vec in (("u", result.u), ("v", result.v),
                          ("alpha", result.alpha_star), ("beta", result.beta_star)):
            for i, val in enumerate(vec):
                fh.write(f"{name},{i},,{val!r}\n")
