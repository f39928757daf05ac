"""Completion and denoising scoring by exact enumeration of reconstructions.

A model only needs an unnormalized log-probability method to be scored, so
the Boltzmann machines and the kernel baseline share one engine. Expected
reconstruction error decomposes exactly into a bias and a variance term
because the variables are binary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import logsumexp

from ._util import MAX_ENUM_BITS, STREAM_MASK, STREAM_NOISE, all_states, hamming_matrix, tagged_rng
from .dataset import BinaryDataset
from .rbm import RbmParams, free_energy

_NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class MaskSpec:
    """The subset of variables a task hides (completion) or corrupts (denoising)."""

    hidden_idx: tuple
    kind: str
    l: int = 0

    def __post_init__(self):
        idx = tuple(int(i) for i in self.hidden_idx)
        object.__setattr__(self, "hidden_idx", idx)
        if len(set(idx)) != len(idx) or any(i < 0 for i in idx):
            raise ValueError("mask indices must be distinct and nonnegative")
        if self.kind not in ("completion", "denoising"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "completion" and self.l != 0:
            raise ValueError("completion masks carry no flip count")
        if self.kind == "denoising" and not 0 <= self.l <= len(idx):
            raise ValueError(f"flip count {self.l} outside [0, {len(idx)}]")

    @property
    def k(self) -> int:
        return len(self.hidden_idx)


@dataclass(frozen=True)
class PosteriorTable:
    """Exhaustive posterior over reconstructions of the masked bits.

    assignments holds the masked-bit patterns (one row per candidate, columns
    ordered like hidden_idx); probs are their normalized probabilities.
    """

    assignments: np.ndarray
    probs: np.ndarray
    mask: MaskSpec


class RbmDensity:
    """Scorable view of a Boltzmann machine: log p~(x) = -F(x)."""

    def __init__(self, params: RbmParams, name: str = "rbm"):
        self.params = params
        self.name = name

    def log_prob_tilde(self, rows: np.ndarray) -> np.ndarray:
        return -np.atleast_1d(free_energy(self.params, rows))


class KdeDensity:
    """Gaussian-kernel density on bits; squared Euclidean distance equals
    Hamming distance here, so the kernel is exp(-H/(2 sigma^2)).

    The per-bit factorization gives the exact normalizer
    N * (1 + exp(-1/(2 sigma^2)))^d, so held-out KL is computable in closed
    form and can drive bandwidth selection.
    """

    def __init__(self, train_rows: np.ndarray, sigma: float, name: str = "kde"):
        train_rows = np.asarray(train_rows, dtype=np.float64)
        if train_rows.ndim != 2 or train_rows.shape[0] == 0:
            raise ValueError("need a non-empty (n, d) training matrix")
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.train_rows = train_rows
        self.sigma = float(sigma)
        self.name = name

    def log_prob_tilde(self, rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        h = hamming_matrix(rows, self.train_rows)
        return logsumexp(-h / (2.0 * self.sigma ** 2), axis=1)

    def log_normalizer(self) -> float:
        d = self.train_rows.shape[1]
        n = self.train_rows.shape[0]
        per_bit = np.log1p(np.exp(-1.0 / (2.0 * self.sigma ** 2)))
        return math.log(n) + d * per_bit

    def log_prob(self, rows: np.ndarray) -> np.ndarray:
        return self.log_prob_tilde(rows) - self.log_normalizer()


def kde_model(train_split: np.ndarray, sigma: float, name: str = "kde") -> KdeDensity:
    return KdeDensity(train_split, sigma, name=name)


def select_kde_sigma(train_split: np.ndarray, valid_split: np.ndarray,
                     grid: np.ndarray | None = None) -> tuple[float, KdeDensity]:
    """Pick the bandwidth whose exact held-out log-likelihood is best.

    The default grid is 25 log-spaced points in [0.1, 10]. Ties resolve to
    the smaller sigma (first argmin).
    """
    if grid is None:
        grid = np.logspace(-1.0, 1.0, 25)
    valid_split = np.asarray(valid_split)
    if valid_split.shape[0] == 0:
        raise ValueError("empty validation split")
    best = None
    for sigma in grid:
        model = KdeDensity(train_split, float(sigma))
        nll = -float(np.mean(model.log_prob(valid_split)))
        if best is None or nll < best[0]:
            best = (nll, float(sigma), model)
    return best[1], best[2]


def _mask_complement_rows(x_base: np.ndarray, mask: MaskSpec,
                          assignments: np.ndarray) -> np.ndarray:
    """Full candidate vectors: x_base outside the mask, assignments inside."""
    rows = np.tile(np.asarray(x_base, dtype=np.uint8), (assignments.shape[0], 1))
    rows[:, list(mask.hidden_idx)] = assignments
    return rows


def _normalized_table(model, x_base, mask, assignments) -> PosteriorTable:
    candidates = _mask_complement_rows(x_base, mask, assignments)
    log_p = np.asarray(model.log_prob_tilde(candidates), dtype=np.float64)
    if not np.isfinite(log_p).all():
        raise ValueError("model returned non-finite log-probabilities")
    probs = np.exp(log_p - logsumexp(log_p))
    probs /= probs.sum()
    return PosteriorTable(assignments=assignments.astype(np.uint8),
                          probs=probs, mask=mask)


def completion_posterior(model, x_star: np.ndarray, mask: MaskSpec) -> PosteriorTable:
    """Posterior over all 2^k fillings of the masked bits, the rest clamped
    to x_star."""
    if mask.k > MAX_ENUM_BITS:
        raise ValueError(
            f"refusing to enumerate 2^{mask.k} completions (limit 2^{MAX_ENUM_BITS})")
    x_star = np.asarray(x_star, dtype=np.uint8)
    if max(mask.hidden_idx) >= x_star.shape[-1]:
        raise ValueError("mask index outside the data width")
    return _normalized_table(model, x_star, mask, all_states(mask.k))


def denoising_posterior(model, x_tilde: np.ndarray, mask: MaskSpec,
                        l: int | None = None) -> PosteriorTable:
    """Posterior over the C(k, l) candidates that agree with x_tilde outside
    the mask and differ from it in exactly l masked positions. When the noise
    really flipped l bits, the clean vector is one of the candidates."""
    if mask.k > MAX_ENUM_BITS:
        raise ValueError(
            f"refusing to enumerate over {mask.k} masked bits (limit {MAX_ENUM_BITS})")
    l = mask.l if l is None else int(l)
    if not 0 <= l <= mask.k:
        raise ValueError(f"flip count {l} outside [0, {mask.k}]")
    x_tilde = np.asarray(x_tilde, dtype=np.uint8)
    if max(mask.hidden_idx) >= x_tilde.shape[-1]:
        raise ValueError("mask index outside the data width")
    base = x_tilde[list(mask.hidden_idx)]
    assignments = np.tile(base, (math.comb(mask.k, l), 1))
    for row, flips in enumerate(combinations(range(mask.k), l)):
        for j in flips:
            assignments[row, j] ^= 1
    return _normalized_table(model, x_tilde, mask, assignments)


def score_table(posterior: PosteriorTable, x_star: np.ndarray):
    """Expected Hamming error of the posterior against the clean bits, with
    its exact split into squared-bias and variance of the per-bit marginals.

    On binary variables H(x, x*) = sum_i (x_i - x*_i)^2, so taking the
    expectation termwise gives E = sum_i (m_i - x*_i)^2 + m_i(1 - m_i).
    """
    total = float(posterior.probs.sum())
    if abs(total - 1.0) > _NORMALIZATION_TOL:
        raise ValueError(f"posterior not normalized (sum {total!r})")
    x_star = np.asarray(x_star, dtype=np.float64)
    target = x_star[list(posterior.mask.hidden_idx)]
    m = posterior.probs @ posterior.assignments
    bias = float(((m - target) ** 2).sum())
    variance = float((m * (1.0 - m)).sum())
    expected = float(posterior.probs @ np.abs(posterior.assignments - target).sum(axis=1))
    return expected, bias, variance


def completion_score(posterior: PosteriorTable, x_star: np.ndarray,
                     mask: MaskSpec | None = None):
    if mask is not None and mask != posterior.mask:
        raise ValueError("mask does not match the posterior's mask")
    return score_table(posterior, x_star)


def denoising_score(posterior: PosteriorTable, x_star: np.ndarray):
    return score_table(posterior, x_star)


def subset_mask_sampler(d: int, k_completion: int = 9, k_denoising: int = 12,
                        l: int = 4):
    """Masks drawn as uniform index subsets (flat data with no grid layout)."""
    def sample(kind: str, rng: np.random.Generator) -> MaskSpec:
        k = k_completion if kind == "completion" else k_denoising
        idx = np.sort(rng.choice(d, size=k, replace=False))
        return MaskSpec(hidden_idx=tuple(int(i) for i in idx), kind=kind,
                        l=0 if kind == "completion" else l)
    return sample


def patch_mask_sampler(height: int = 14, width: int = 14, l: int = 4):
    """Masks drawn as contiguous patches of an image grid: 3x3 for completion;
    4x3 or 3x4 (fair coin) for denoising. Top-left corner uniform over valid
    positions."""
    def rect(rng, ph, pw):
        r0 = int(rng.integers(0, height - ph + 1))
        c0 = int(rng.integers(0, width - pw + 1))
        return tuple((r0 + r) * width + (c0 + c)
                     for r in range(ph) for c in range(pw))

    def sample(kind: str, rng: np.random.Generator) -> MaskSpec:
        if kind == "completion":
            return MaskSpec(hidden_idx=rect(rng, 3, 3), kind=kind)
        ph, pw = (4, 3) if rng.random() < 0.5 else (3, 4)
        return MaskSpec(hidden_idx=rect(rng, ph, pw), kind=kind, l=l)
    return sample


def corrupt(x_star: np.ndarray, mask: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Flip exactly mask.l distinct masked bits of x_star."""
    x_tilde = np.asarray(x_star, dtype=np.uint8).copy()
    flips = rng.choice(mask.k, size=mask.l, replace=False)
    for j in flips:
        x_tilde[mask.hidden_idx[j]] ^= 1
    flipped = int(np.abs(x_tilde.astype(int) - np.asarray(x_star, int)).sum())
    if flipped != mask.l:
        raise AssertionError("noise process failed to flip exactly l bits")
    return x_tilde


@dataclass
class TaskReport:
    """Per-example scores for one model, plus per-task means (None when a
    task scored no examples)."""

    model: str
    per_example: list
    means: dict

    @classmethod
    def from_entries(cls, model: str, entries: list) -> "TaskReport":
        means = {}
        for task in ("completion", "denoising"):
            rows = [e for e in entries if e["task"] == task]
            if not rows:
                means[task] = None
                continue
            means[task] = {
                "mean_error": float(np.mean([e["expected_error"] for e in rows])),
                "mean_bias": float(np.mean([e["bias"] for e in rows])),
                "mean_variance": float(np.mean([e["variance"] for e in rows])),
                "n": len(rows),
            }
        return cls(model=model, per_example=entries, means=means)


def run_task_suite(models: list, dataset: BinaryDataset, mask_sampler,
                   n_examples: int, seed: int) -> list[TaskReport]:
    """Score every model on identical (example, mask, noise) triples.

    Masks and noise are drawn once from streams keyed by the seed, before any
    model is consulted, so adding or reordering models cannot change what any
    model is asked to reconstruct. Examples are the first n_examples rows of
    the test split (already shuffled by the splitter).
    """
    test_rows = dataset.split("test")
    if test_rows.shape[0] == 0:
        raise ValueError("empty test split")
    n = min(int(n_examples), test_rows.shape[0])

    rng_mask = tagged_rng(seed, STREAM_MASK)
    rng_noise = tagged_rng(seed, STREAM_NOISE)
    trials = []
    for i in range(n):
        x_star = test_rows[i]
        mask_c = mask_sampler("completion", rng_mask)
        mask_d = mask_sampler("denoising", rng_mask)
        x_tilde = corrupt(x_star, mask_d, rng_noise)
        trials.append((i, x_star, mask_c, mask_d, x_tilde))

    reports = []
    for model in models:
        entries = []
        for i, x_star, mask_c, mask_d, x_tilde in trials:
            post_c = completion_posterior(model, x_star, mask_c)
            e, b, v = completion_score(post_c, x_star)
            entries.append({"task": "completion", "example_id": i,
                            "expected_error": e, "bias": b, "variance": v})
            post_d = denoising_posterior(model, x_tilde, mask_d)
            e, b, v = denoising_score(post_d, x_star)
            entries.append({"task": "denoising", "example_id": i,
                            "expected_error": e, "bias": b, "variance": v})
        reports.append(TaskReport.from_entries(getattr(model, "name", "model"), entries))
    return reports


def write_task_csv(reports: list[TaskReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("model,task,example_id,expected_error,bias,variance\n")
        for report in reports:
            for e in report.per_example:
                fh.write(f"{report.model},{e['task']},{e['example_id']},"
                         f"{e['expected_error']!r},{e['bias']!r},{e['variance']!r}\n")


def write_task_summary(reports: list[TaskReport], path) -> None:
    payload = {r.model: r.means for r in reports}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
