"""Shipping gate: every release criterion measured at its stated tolerance.

Each test prints one PASS/FAIL line with the observed numbers; pytest -v adds
the per-test verdict. Criteria that need trained models (the desk-scale
ordering checks) share module-scoped fixtures so each model is trained once.
"""

import hashlib
import json
import math
import time

import numpy as np
import pytest

from wrbm._util import all_states
from wrbm.cli import main
from wrbm.dataset import (
    binarize_per_pixel_mean,
    downscale_2x,
    ingest_mnist_zero,
    split_three_way,
)
from wrbm.evaluation import ais_log_z, wgamma_eval
from wrbm.ot_sinkhorn import (
    CostSpec,
    EmpiricalMeasure,
    cost_matrix,
    dual_objective,
    mean_pairwise_hamming,
    sinkhorn,
)
from wrbm.rbm import RbmParams, exact_distribution, exact_log_partition, free_energy_grad_means
from wrbm.tasks import (
    MaskSpec,
    PosteriorTable,
    RbmDensity,
    completion_score,
    patch_mask_sampler,
    run_task_suite,
)
from wrbm.training import TrainConfig, train, wasserstein_gradient_from_measure

import conftest
from conftest import plants_text, random_params, ring_images, two_prototype_rows
from test_sinkhorn import lp_transport_oracle
from test_training import exact_kl


def verdict(criterion, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    conftest.ACCEPTANCE_VERDICTS.append(line)
    print(line, flush=True)
    assert passed, f"criterion {criterion}: {detail}"


def replace_coord(params, which, idx, delta):
    fields = {"a": params.a.copy(), "W": params.W.copy(), "b": params.b.copy()}
    fields[which][idx] += delta
    return RbmParams(a=fields["a"], W=fields["W"], b=fields["b"],
                     mu=params.mu, nu=params.nu)


# ---------------------------------------------------------------------------
# criterion 1: transport gradient vs central finite differences


def test_criterion_1_wasserstein_gradient_matches_finite_differences():
    t0 = time.time()
    spec = CostSpec(gamma=0.1, normalizer=2.0)
    states = all_states(4)
    eps, worst = 1e-5, 0.0
    for trial in range(10):
        rng = np.random.Generator(np.random.Philox(key=[trial, 1001]))
        params = random_params(rng, d=4, h=3)
        qw = rng.random(16) + 0.05
        q = EmpiricalMeasure(support=states, weights=qw / qw.sum())

        model = EmpiricalMeasure(support=states, weights=exact_distribution(params))
        stats, _ = wasserstein_gradient_from_measure(params, model, q, spec,
                                                     tol=1e-12)

        def w_of(p):
            m = EmpiricalMeasure(support=states, weights=exact_distribution(p))
            return sinkhorn(m, q, spec, tol=1e-12, max_iter=200_000).distance

        for which, grad in (("a", stats.grad_a), ("W", stats.grad_W),
                            ("b", stats.grad_b)):
            it = np.nditer(grad, flags=["multi_index"])
            for g in it:
                idx = it.multi_index if grad.ndim > 1 else it.multi_index[0]
                fd = (w_of(replace_coord(params, which, idx, +eps))
                      - w_of(replace_coord(params, which, idx, -eps))) / (2 * eps)
                rel = abs(float(g) - fd) / max(abs(fd), 1e-8)
                worst = max(worst, rel)
    elapsed = time.time() - t0
    verdict(1, worst < 1e-4 and elapsed < 60,
            f"transport gradient vs FD on 10 exact d=4,h=3 models: worst "
            f"relative error {worst:.3e} (tol 1e-4), {elapsed:.1f}s (limit 60s)")


# ---------------------------------------------------------------------------
# criterion 2: Sinkhorn duality, feasibility, small-gamma LP limit


def test_criterion_2_sinkhorn_duality_feasibility_lp_limit():
    t0 = time.time()
    rng = np.random.Generator(np.random.Philox(key=[2, 2002]))
    worst_gap, worst_marginal = 0.0, 0.0
    for _ in range(20):
        n, m = int(rng.integers(2, 51)), int(rng.integers(2, 51))
        p = EmpiricalMeasure.from_rows(
            rng.integers(0, 2, size=(n, 12)).astype(np.uint8),
            weights=rng.random(n) + 0.05)
        q = EmpiricalMeasure.from_rows(
            rng.integers(0, 2, size=(m, 12)).astype(np.uint8),
            weights=rng.random(m) + 0.05)
        spec = CostSpec(gamma=0.1, normalizer=6.0)
        res = sinkhorn(p, q, spec, tol=1e-9, max_iter=200_000)
        dual = dual_objective(p, q, res.alpha_star, res.beta_star, spec)
        worst_gap = max(worst_gap, abs(dual - res.distance))
        D = cost_matrix(p, q, spec)
        plan = np.exp((res.alpha_star[:, None] + res.beta_star[None, :] - D)
                      / spec.gamma - 1.0)
        worst_marginal = max(worst_marginal,
                             np.abs(plan.sum(axis=1) - p.weights).max(),
                             np.abs(plan.sum(axis=0) - q.weights).max())

    worst_lp = 0.0
    for trial in range(5):
        rng_lp = np.random.Generator(np.random.Philox(key=[trial, 2003]))
        p = EmpiricalMeasure.from_rows(
            rng_lp.integers(0, 2, size=(4, 10)).astype(np.uint8),
            weights=rng_lp.random(4) + 0.1)
        q = EmpiricalMeasure.from_rows(
            rng_lp.integers(0, 2, size=(4, 10)).astype(np.uint8),
            weights=rng_lp.random(4) + 0.1)
        spec = CostSpec(gamma=1e-3, normalizer=5.0)
        res = sinkhorn(p, q, spec, tol=1e-10, max_iter=500_000)
        lp = lp_transport_oracle(cost_matrix(p, q, spec), p.weights, q.weights)
        worst_lp = max(worst_lp, abs(res.distance - lp))
    elapsed = time.time() - t0
    verdict(2, worst_gap < 1e-5 and worst_marginal < 1e-6 and worst_lp < 1e-2
            and elapsed < 60,
            f"20 instances up to 50x50: duality gap {worst_gap:.3e} (tol 1e-5), "
            f"marginal violation {worst_marginal:.3e} (tol 1e-6); gamma=1e-3 "
            f"4x4 vs exact LP: {worst_lp:.3e} (tol 1e-2); {elapsed:.1f}s (limit 60s)")


# ---------------------------------------------------------------------------
# criterion 3: likelihood gradient vs finite differences of enumerated KL


def test_criterion_3_kl_gradient_matches_finite_differences():
    eps, worst = 1e-5, 0.0
    for trial in range(5):
        rng = np.random.Generator(np.random.Philox(key=[trial, 3001]))
        params = random_params(rng, d=3, h=2)
        data = rng.integers(0, 2, size=(40, 3)).astype(np.uint8)

        da, dW, db = free_energy_grad_means(params, data)
        ma, mW, mb = free_energy_grad_means(params, all_states(3),
                                            weights=exact_distribution(params))
        analytic = {"a": da - ma, "W": dW - mW, "b": db - mb}
        for which, grad in analytic.items():
            it = np.nditer(grad, flags=["multi_index"])
            for g in it:
                idx = it.multi_index if grad.ndim > 1 else it.multi_index[0]
                fd = (exact_kl(replace_coord(params, which, idx, +eps), data)
                      - exact_kl(replace_coord(params, which, idx, -eps), data)
                      ) / (2 * eps)
                worst = max(worst, abs(float(g) - fd) / max(abs(fd), 1e-8))
    verdict(3, worst < 1e-5,
            f"likelihood gradient vs FD of enumerated KL on 5 d=3,h=2 models: "
            f"worst relative error {worst:.3e} (tol 1e-5)")


# ---------------------------------------------------------------------------
# criterion 4: AIS coverage of the exact partition function


def test_criterion_4_ais_within_three_ses():
    t0 = time.time()
    hits, misses = 0, []
    for trial in range(20):
        rng = np.random.Generator(np.random.Philox(key=[trial, 4001]))
        params = random_params(rng, d=6, h=4)
        est = ais_log_z(params, n_runs=100, n_temps=1000, seed=trial)
        exact = exact_log_partition(params)
        if abs(est.log_z - exact) <= 3 * est.se:
            hits += 1
        else:
            misses.append(trial)
    elapsed = time.time() - t0
    verdict(4, hits >= 18 and elapsed < 300,
            f"AIS (100 runs x 1000 temps) within 3 bootstrap SEs of exact "
            f"log Z on {hits}/20 d=6,h=4 models (need >= 18; misses {misses}); "
            f"{elapsed:.1f}s (limit 300s)")


# ---------------------------------------------------------------------------
# criterion 5: expected-Hamming identity on random posteriors


def test_criterion_5_expected_hamming_identity():
    rng = np.random.Generator(np.random.Philox(key=[5, 5001]))
    worst_split, worst_brute = 0.0, 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        d = k + int(rng.integers(0, 5))
        idx = tuple(int(i) for i in np.sort(rng.choice(d, size=k, replace=False)))
        mask = MaskSpec(hidden_idx=idx, kind="completion")
        full = all_states(k)
        take = rng.random(full.shape[0]) < 0.7
        if not take.any():
            take[int(rng.integers(full.shape[0]))] = True
        assignments = full[take]
        probs = rng.random(assignments.shape[0]) + 1e-3
        probs /= probs.sum()
        table = PosteriorTable(assignments=assignments, probs=probs, mask=mask)
        x_star = rng.integers(0, 2, size=d).astype(np.uint8)

        e, b, v = completion_score(table, x_star)
        target = x_star[list(idx)].astype(int)
        brute = float(sum(p * np.abs(a.astype(int) - target).sum()
                          for p, a in zip(probs, assignments)))
        worst_split = max(worst_split, abs(e - (b + v)))
        worst_brute = max(worst_brute, abs(e - brute))
    verdict(5, worst_split < 1e-10 and worst_brute < 1e-12,
            f"1000 random posteriors: |error - (bias + variance)| "
            f"{worst_split:.3e} (tol 1e-10), |error - brute force| "
            f"{worst_brute:.3e} (tol 1e-12)")


# ---------------------------------------------------------------------------
# criterion 8: pipeline determinism (cheap, so it runs before the heavy ones)


def test_criterion_8_pipeline_is_deterministic(tmp_path):
    (tmp_path / "plants.txt").write_text(plants_text())
    out = tmp_path / "out"
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(
        f'seed = 7\nout = "{out}"\n'
        f'[data]\nkind = "plants"\ntext = "{tmp_path / "plants.txt"}"\n'
        f'container = "{out / "dataset.bin"}"\n'
        f'[train]\nhidden_units = 8\nlambda = "1.0"\neta = 1e-3\n'
        f'steps_pretrain = 60\nsteps_main = 60\n'
        f'[eval]\nais_runs = 20\nais_temps = 100\n'
        f'[tasks]\nn_examples = 8\nk_completion = 6\nk_denoising = 8\nflips = 2\n')
    artifacts = ("dataset.csv", "ingest_report.json", "train_log.jsonl",
                 "rbm.ckpt", "pcd.bin", "metrics.json", "pca.csv",
                 "tasks.csv", "tasks_summary.json")

    def run_pipeline():
        assert main(["ingest", "--config", str(cfg)]) == 0
        assert main(["train", "--config", str(cfg), "--retain-pcd"]) == 0
        assert main(["eval", "--config", str(cfg)]) == 0
        assert main(["tasks", "--config", str(cfg)]) == 0
        return {name: hashlib.sha256((out / name).read_bytes()).hexdigest()
                for name in artifacts}

    first = run_pipeline()
    second = run_pipeline()
    same = [name for name in artifacts if first[name] == second[name]]
    verdict(8, first == second,
            f"ingest->train->eval->tasks twice with identical config/seed: "
            f"{len(same)}/{len(artifacts)} artifacts byte-identical")


# ---------------------------------------------------------------------------
# criterion 9: canonical class-0 ingestion counts


def test_criterion_9_mnist_zero_ingestion_counts(mnist_zero_source):
    images, labels, is_real = mnist_zero_source
    ds, report = ingest_mnist_zero(images, labels, seed=0)
    sizes = [int(ds.split(s).shape[0]) for s in ("train", "valid", "test")]
    ok = (len(ds) == 5923 and ds.dim == 196
          and report["class0_count"] == 5923
          and max(sizes) - min(sizes) <= 1 and sum(sizes) == 5923)
    verdict(9, ok,
            f"class-0 ingestion ({'real' if is_real else 'surrogate'} corpus): "
            f"{len(ds)} rows (need 5923) of width {ds.dim} (need 196), "
            f"splits {sizes} (spread <= 1)")


# ---------------------------------------------------------------------------
# criteria 6 and 7: desk-scale training orderings (shared trained models)

GRID_LAMBDAS = (0.1, 1.0, 10.0, math.inf)
SEEDS = (0, 1, 2)


def train_cost(ds):
    return CostSpec(gamma=0.1, normalizer=mean_pairwise_hamming(
        EmpiricalMeasure.from_rows(ds.split("train"))))


@pytest.fixture(scope="module")
def prototype_runs():
    """Validation transport distances for the two-prototype dataset,
    lambda in {0.1, 1, 10, inf}, 3 seeds."""
    t0 = time.time()
    per_seed = []
    for seed in SEEDS:
        ds = split_three_way(two_prototype_rows(seed), seed=seed)
        cost = train_cost(ds)
        ws = {}
        for lam in GRID_LAMBDAS:
            cfg = TrainConfig(hidden_units=32, lam=lam, eta=1e-3, gamma=0.1,
                              steps_pretrain=1500, steps_main=2000, seed=seed)
            res = train(cfg, ds)
            ws[lam] = wgamma_eval(res.pcd.x, ds.split("valid"), cost)
        per_seed.append(ws)
    return {"per_seed": per_seed, "seconds": time.time() - t0}


@pytest.fixture(scope="module")
def digit_runs(mnist_zero_source):
    """Trained models on 1000-example class-0 subsamples: the four-lambda
    comparison set plus a pure-transport fine-tuned model per seed, with
    completion bias fractions under shared masks."""
    images, labels, is_real = mnist_zero_source
    per_seed = []
    grid_seconds = 0.0
    finetune_seconds = 0.0
    for seed in SEEDS:
        if is_real:
            full, _ = ingest_mnist_zero(images, labels, seed)
            rng = np.random.Generator(np.random.Philox(key=[seed, 40]))
            sel = np.sort(rng.choice(len(full), size=1000, replace=False))
            bits = full.rows[sel]
        else:
            imgs = ring_images(1000, seed)
            bits = binarize_per_pixel_mean(downscale_2x(imgs).reshape(1000, -1))
        ds = split_three_way(bits, seed=seed)
        cost = train_cost(ds)

        ws, params = {}, {}
        t0 = time.time()
        for lam in GRID_LAMBDAS:
            cfg = TrainConfig(hidden_units=64, lam=lam, eta=1e-3, gamma=0.1,
                              steps_pretrain=2000, steps_main=3000, seed=seed)
            res = train(cfg, ds)
            ws[lam] = wgamma_eval(res.pcd.x, ds.split("valid"), cost)
            params[lam] = res.params
        grid_seconds += time.time() - t0

        # longer pure-transport fine-tuning: the blur-then-concentrate
        # dynamics need the extra budget before bias dominates
        t0 = time.time()
        cfg0 = TrainConfig(hidden_units=64, lam=0.0, eta=1e-3, gamma=0.1,
                           steps_pretrain=2000, steps_main=6000, lr_main=0.05,
                           seed=seed)
        res0 = train(cfg0, ds)
        finetune_seconds += time.time() - t0

        reports = run_task_suite(
            [RbmDensity(res0.params, "transport"),
             RbmDensity(params[math.inf], "baseline")],
            ds, patch_mask_sampler(), n_examples=100, seed=seed)
        frac = {}
        for rep in reports:
            m = rep.means["completion"]
            frac[rep.model] = m["mean_bias"] / m["mean_error"]
        per_seed.append({"w_valid": ws, "frac": frac})
    return {"per_seed": per_seed, "grid_seconds": grid_seconds,
            "finetune_seconds": finetune_seconds, "real": is_real}


def ordering_wins(per_seed_ws):
    wins = 0
    for ws in per_seed_ws:
        best = min(v for k, v in ws.items() if k != math.inf)
        wins += best < ws[math.inf]
    return wins


def test_criterion_6_transport_training_lowers_validation_distance(
        prototype_runs, digit_runs):
    synth_wins = ordering_wins(prototype_runs["per_seed"])
    digit_wins = ordering_wins([s["w_valid"] for s in digit_runs["per_seed"]])
    ok = (synth_wins >= 2 and digit_wins >= 2
          and prototype_runs["seconds"] < 1800
          and digit_runs["grid_seconds"] < 1800)
    verdict(6, ok,
            f"best lambda in {{0.1,1,10}} beats lambda=inf on validation "
            f"W_gamma: two-prototype {synth_wins}/3 seeds "
            f"({prototype_runs['seconds']:.0f}s), digit subsample "
            f"{digit_wins}/3 seeds ({digit_runs['grid_seconds']:.0f}s; "
            f"limits 1800s per dataset)")


def test_criterion_7_transport_model_completion_error_is_bias_dominated(
        digit_runs):
    rows = [(s["frac"]["transport"], s["frac"]["baseline"])
            for s in digit_runs["per_seed"]]
    wins = sum(fw > fb for fw, fb in rows)
    detail = ", ".join(f"seed {seed}: {fw:.4f} vs {fb:.4f}"
                       for seed, (fw, fb) in zip(SEEDS, rows))
    verdict(7, wins >= 2,
            f"completion bias fraction, transport-trained vs standard "
            f"({detail}): {wins}/3 seeds higher (need >= 2); fine-tuning "
            f"{digit_runs['finetune_seconds']:.0f}s")
