"""Restricted Boltzmann machine over binary units, with mean-offset parameters.

The energy is evaluated on shifted units (x - mu) and (y - nu); setting both
offsets to zero recovers the plain parameterization. Offsets change the
gradient geometry but not the family of representable distributions: folding
them into the biases (to_uncentered) yields the identical law.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from ._util import all_states, chain_rngs, fill_uniform, sigmoid, softplus

_CKPT_MAGIC = b"WRBMCKP1"


@dataclass(frozen=True)
class RbmParams:
    """Visible biases a (d), weight rows W (h, d), hidden biases b (h), offsets mu/nu."""

    a: np.ndarray
    W: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        mu = np.asarray(self.mu, dtype=np.float64)
        nu = np.asarray(self.nu, dtype=np.float64)
        for name, arr in (("a", a), ("W", W), ("b", b), ("mu", mu), ("nu", nu)):
            object.__setattr__(self, name, arr)
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite entries in {name}")
        d, h = a.shape[0], b.shape[0]
        if d < 1 or h < 1:
            raise ValueError(f"need d, h >= 1, got d={d}, h={h}")
        if W.shape != (h, d):
            raise ValueError(f"W shape {W.shape} does not match (h={h}, d={d})")
        if mu.shape != (d,) or nu.shape != (h,):
            raise ValueError("offset shapes must be (d,) and (h,)")
        if (mu < 0).any() or (mu > 1).any() or (nu < 0).any() or (nu > 1).any():
            raise ValueError("offsets must lie in [0, 1]")

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def h(self) -> int:
        return self.b.shape[0]

    @classmethod
    def zeros(cls, d: int, h: int) -> "RbmParams":
        return cls(a=np.zeros(d), W=np.zeros((h, d)), b=np.zeros(h),
                   mu=np.zeros(d), nu=np.zeros(h))

    @classmethod
    def init_random(cls, d: int, h: int, rng: np.random.Generator,
                    scale: float = 0.01,
                    mu: np.ndarray | None = None,
                    nu: np.ndarray | None = None) -> "RbmParams":
        """Small uniform weights, zero biases; offsets default to 0."""
        W = rng.uniform(-scale, scale, size=(h, d))
        return cls(a=np.zeros(d), W=W, b=np.zeros(h),
                   mu=np.zeros(d) if mu is None else np.asarray(mu, dtype=np.float64),
                   nu=np.zeros(h) if nu is None else np.asarray(nu, dtype=np.float64))

    def to_uncentered(self) -> "RbmParams":
        """Equivalent parameters with zero offsets (same distribution up to the
        normalizer): a' = a - W^T nu, b' = b - W mu."""
        return RbmParams(a=self.a - self.W.T @ self.nu, W=self.W.copy(),
                         b=self.b - self.W @ self.mu,
                         mu=np.zeros(self.d), nu=np.zeros(self.h))


def _check_visible(params: RbmParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise ValueError(f"visible width {x.shape[-1]} != d={params.d}")
    return x


def _check_hidden(params: RbmParams, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != params.h:
        raise ValueError(f"hidden width {y.shape[-1]} != h={params.h}")
    return y


def energy(params: RbmParams, x: np.ndarray, y: np.ndarray) -> float:
    """Joint energy -a.(x-mu) - sum_j (y_j-nu_j)(w_j.(x-mu) + b_j)."""
    xc = _check_visible(params, x) - params.mu
    yc = _check_hidden(params, y) - params.nu
    return float(-params.a @ xc - yc @ (params.W @ xc + params.b))


def free_energy(params: RbmParams, x: np.ndarray) -> np.ndarray | float:
    """Free energy with hidden units summed out analytically.

    Accepts a single vector or an (n, d) batch; exp(-F(x)) equals the sum of
    exp(-E(x, y)) over all hidden configurations.
    """
    x = _check_visible(params, x)
    single = x.ndim == 1
    xc = np.atleast_2d(x) - params.mu
    z = xc @ params.W.T + params.b
    f = -(xc @ params.a) + z @ params.nu - softplus(z).sum(axis=1)
    return float(f[0]) if single else f


def hidden_conditional(params: RbmParams, x: np.ndarray) -> np.ndarray:
    """Pr(y_j = 1 | x) = sigma(w_j.(x-mu) + b_j), per unit."""
    xc = _check_visible(params, x) - params.mu
    return sigmoid(xc @ params.W.T + params.b)


def visible_conditional(params: RbmParams, y: np.ndarray) -> np.ndarray:
    """Pr(x_i = 1 | y) = sigma(a_i + sum_j (y_j-nu_j) W_ji), per unit."""
    yc = _check_hidden(params, y) - params.nu
    return sigmoid(params.a + yc @ params.W)


def free_energy_grad_means(params: RbmParams, x: np.ndarray,
                           weights: np.ndarray | None = None):
    """Weighted mean of the free-energy gradient over rows of x.

    Returns (ga, gW, gb) with the shapes of (a, W, b). Building block for
    both training objectives: their gradients are differences or reweightings
    of this quantity under different measures.
    """
    x = _check_visible(params, x)
    x = np.atleast_2d(x)
    if weights is None:
        w = np.full(x.shape[0], 1.0 / x.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (x.shape[0],):
            raise ValueError("weights must have one entry per row")
    xc = x - params.mu
    s = sigmoid(xc @ params.W.T + params.b) - params.nu
    ga = -(w @ xc)
    gb = -(w @ s)
    gW = -(s * w[:, None]).T @ xc
    return ga, gW, gb


def _init_rate(params: RbmParams) -> np.ndarray:
    """Per-unit Bernoulli rate for fresh chains: the visible offsets, or 0.5
    when no offsets are set (all-zero mu would freeze every chain at zero)."""
    if params.mu.any():
        return params.mu
    return np.full(params.d, 0.5)


@dataclass
class GibbsState:
    """One sampling chain: visible state, hidden state, and its RNG stream."""

    x: np.ndarray
    y: np.ndarray
    rng: np.random.Generator

    @classmethod
    def init(cls, params: RbmParams, seed: int, index: int = 0) -> "GibbsState":
        rng = chain_rngs(seed, index + 1)[index]
        x = (rng.random(params.d) < _init_rate(params)).astype(np.uint8)
        return cls(x=x, y=np.zeros(params.h, dtype=np.uint8), rng=rng)


def gibbs_step(params: RbmParams, state: GibbsState) -> GibbsState:
    """One alternate sweep: resample hidden given visible, then visible given hidden."""
    ph = hidden_conditional(params, state.x)
    y = (state.rng.random(params.h) < ph).astype(np.uint8)
    pv = visible_conditional(params, y)
    x = (state.rng.random(params.d) < pv).astype(np.uint8)
    return GibbsState(x=x, y=y, rng=state.rng)


@dataclass
class PcdSample:
    """Population of persistent chains advanced in lockstep.

    Chain i owns the counter-based stream keyed by (seed, i); the batched
    refresh consumes the streams exactly as chain-at-a-time gibbs_step would,
    so results do not depend on how the update is scheduled.
    """

    x: np.ndarray
    y: np.ndarray
    rngs: list
    age: int = 0

    @classmethod
    def init(cls, params: RbmParams, size: int, seed: int) -> "PcdSample":
        if size < 1:
            raise ValueError("need at least one chain")
        rngs = chain_rngs(seed, size)
        x = (fill_uniform(rngs, params.d) < _init_rate(params)).astype(np.uint8)
        return cls(x=x, y=np.zeros((size, params.h), dtype=np.uint8), rngs=rngs, age=0)

    def __len__(self) -> int:
        return self.x.shape[0]

    def states(self) -> list[GibbsState]:
        return [GibbsState(x=self.x[i].copy(), y=self.y[i].copy(), rng=self.rngs[i])
                for i in range(len(self))]


def pcd_refresh(params: RbmParams, pcd: PcdSample) -> PcdSample:
    """Advance every chain by exactly one Gibbs sweep; increment age."""
    if len(pcd) == 0:
        raise ValueError("empty chain population")
    ph = sigmoid((pcd.x - params.mu) @ params.W.T + params.b)
    y = (fill_uniform(pcd.rngs, params.h) < ph).astype(np.uint8)
    pv = sigmoid(params.a + (y - params.nu) @ params.W)
    x = (fill_uniform(pcd.rngs, params.d) < pv).astype(np.uint8)
    return PcdSample(x=x, y=y, rngs=pcd.rngs, age=pcd.age + 1)


def exact_distribution(params: RbmParams) -> np.ndarray:
    """Probability of every visible state, aligned with all_states(d).

    Enumeration guard lives in all_states; accumulation happens in the log
    domain so tiny probabilities stay normalized.
    """
    states = all_states(params.d)
    neg_f = -free_energy(params, states)
    return np.exp(neg_f - logsumexp(neg_f))


def exact_log_partition(params: RbmParams) -> float:
    """log Z by enumerating visible states (same d guard as exact_distribution)."""
    states = all_states(params.d)
    return float(logsumexp(-free_energy(params, states)))


def save_checkpoint(params: RbmParams, path, metadata: dict | None = None) -> None:
    """Write a self-describing container: header, JSON metadata, little-endian f64 arrays."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<III", params.d, params.h, len(meta)))
        fh.write(meta)
        for arr in (params.a, params.b, params.mu, params.nu, params.W):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[RbmParams, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r})")
        d, h, meta_len = struct.unpack("<III", fh.read(12))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        def read(n):
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError("truncated checkpoint")
            return np.frombuffer(buf, dtype="<f8").astype(np.float64)
        a, b = read(d), read(h)
        mu, nu = read(d), read(h)
        W = read(h * d).reshape(h, d)
    return RbmParams(a=a, W=W, b=b, mu=mu, nu=nu), meta


def with_weight_scale(params: RbmParams, t: float) -> RbmParams:
    """Same model with the coupling terms scaled by t (biases and offsets kept)."""
    return replace(params, W=params.W * t)
