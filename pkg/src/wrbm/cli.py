"""Command-line pipeline: ingest, train, grid, eval, tasks.

Configuration lives in a TOML file; --seed and --out override the file.
Every emitted artifact carries the sha256 of the effective configuration and
the seed, either as a leading comment line (CSV, JSONL, PGM) or as a "meta"
object (JSON). Exit codes: 0 success, 1 numerical failure, 2 bad input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:
    import tomli as tomllib

from . import dataset as ds_mod
from . import evaluation, tasks, training
from .evaluation import AisError
from .ot_sinkhorn import CostSpec, EmpiricalMeasure, SinkhornError, mean_pairwise_hamming
from .rbm import load_checkpoint, save_checkpoint
from .tasks import RbmDensity
from .training import TrainConfig, TrainError


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ValueError(f"config file not found: {p}")
    with open(p, "rb") as fh:
        return tomllib.load(fh)


def _merge_overrides(config: dict, args) -> dict:
    merged = dict(config)
    if args.seed is not None:
        merged["seed"] = args.seed
    if args.out is not None:
        merged["out"] = args.out
    merged.setdefault("seed", 0)
    merged.setdefault("out", "out")
    return merged


def _config_hash(config: dict) -> str:
    def canon(v):
        if isinstance(v, dict):
            return {k: canon(v[k]) for k in sorted(v)}
        if isinstance(v, list):
            return [canon(x) for x in v]
        if isinstance(v, float):
            return repr(v)
        return v
    return hashlib.sha256(
        json.dumps(canon(config), sort_keys=True).encode()).hexdigest()


def _meta_line(config: dict) -> str:
    return f"# config_sha256={_config_hash(config)} seed={config['seed']}\n"


def _prepend_comment(path: Path, line: str) -> None:
    body = path.read_bytes()
    path.write_bytes(line.encode("utf-8") + body)


def _write_json(path: Path, payload: dict, config: dict) -> None:
    payload = dict(payload)
    payload["meta"] = {"config_sha256": _config_hash(config),
                       "seed": config["seed"]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _parse_lambda(value) -> float:
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return math.inf
        return float(value)
    return float(value)


def _train_config(config: dict) -> TrainConfig:
    section = config.get("train", {})
    if "hidden_units" not in section:
        raise ValueError("config section [train] must set hidden_units")
    pcd = int(section.get("pcd_size", 0))
    return TrainConfig(
        hidden_units=int(section["hidden_units"]),
        lam=_parse_lambda(section.get("lambda", math.inf)),
        eta=float(section.get("eta", 0.0)),
        gamma=float(section.get("gamma", 0.1)),
        lr_pretrain=float(section.get("lr_pretrain", 0.01)),
        lr_main=float(section.get("lr_main", 0.01)),
        steps_pretrain=int(section.get("steps_pretrain", 3000)),
        steps_main=int(section.get("steps_main", 3000)),
        pcd_size=pcd if pcd > 0 else None,
        seed=int(config["seed"]),
        tol_sinkhorn=float(section.get("tol_sinkhorn", 1e-6)),
    )


def _dataset_path(config: dict) -> Path:
    default = Path(config["out"]) / "dataset.bin"
    return Path(config.get("data", {}).get("container", default))


def _load_dataset(config: dict):
    path = _dataset_path(config)
    if not path.is_file():
        raise ValueError(f"dataset container not found: {path} (run ingest first)")
    return ds_mod.load_dataset(path)


def _read_file(path_str: str, what: str) -> bytes:
    p = Path(path_str)
    if not p.is_file():
        raise ValueError(f"{what} file not found: {p}")
    return p.read_bytes()


def cmd_ingest(args) -> int:
    config = _merge_overrides(_load_config(args.config), args)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    data = config.get("data", {})
    kind = data.get("kind")
    seed = int(config["seed"])

    if kind == "mnist":
        images = _read_file(data.get("images", ""), "image")
        labels = _read_file(data.get("labels", ""), "label")
        ds, report = ds_mod.ingest_mnist_zero(images, labels, seed)
    elif kind == "plants":
        text = _read_file(data.get("text", ""), "records").decode("utf-8")
        ds, report = ds_mod.ingest_plants(text, seed)
    else:
        raise ValueError(f"data.kind must be 'mnist' or 'plants', got {kind!r}")

    ds_mod.save_dataset(ds, out / "dataset.bin")
    ds_mod.export_csv(ds, out / "dataset.csv")
    _prepend_comment(out / "dataset.csv", _meta_line(config))
    sizes = {name: int(ds.split(name).shape[0]) for name in ("train", "valid", "test")}
    report.update(rows=len(ds), splits=sizes)
    _write_json(out / "ingest_report.json", report, config)
    print(f"ingested {len(ds)} rows of width {ds.dim} "
          f"(train/valid/test = {sizes['train']}/{sizes['valid']}/{sizes['test']})")
    return 0


def cmd_train(args) -> int:
    config = _merge_overrides(_load_config(args.config), args)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(config)
    tc = _train_config(config)

    log_path = out / "train_log.jsonl"
    result = training.train(tc, ds, log_path=log_path)
    _prepend_comment(log_path, _meta_line(config))

    save_checkpoint(result.params, out / "rbm.ckpt", metadata={
        "config_sha256": _config_hash(config), "seed": config["seed"],
        "lambda": training.format_lambda(tc.lam), "eta": repr(tc.eta),
        "gamma": repr(tc.gamma)})
    if args.retain_pcd:
        pcd_ds = ds_mod.BinaryDataset(
            rows=result.pcd.x.astype(np.uint8),
            split_of=np.zeros(len(result.pcd), dtype=np.uint8),
            source="final pcd sample", seed=int(config["seed"]))
        ds_mod.save_dataset(pcd_ds, out / "pcd.bin")
    print(f"trained {tc.steps_pretrain}+{tc.steps_main} steps; "
          f"checkpoint at {out / 'rbm.ckpt'}")
    return 0


def cmd_grid(args) -> int:
    config = _merge_overrides(_load_config(args.config), args)
    out = Path(config["out"])
    grid_dir = out / "grid"
    ds = _load_dataset(config)
    tc = _train_config(config)
    section = config.get("grid", {})
    lambdas = [_parse_lambda(v) for v in section.get(
        "lambda", [0.0, 0.1, 1.0, 10.0, "inf"])]
    etas = [float(v) for v in section.get("eta", [1e-4, 1e-3, 1e-2])]
    eval_section = config.get("eval", {})

    result = training.grid_search(
        tc, ds, etas, lambdas, grid_dir,
        ais_runs=int(eval_section.get("ais_runs", 100)),
        ais_temps=int(eval_section.get("ais_temps", 1000)),
        keep_logs=True)
    training.write_grid_csv(result, grid_dir / "contour.csv")
    _prepend_comment(grid_dir / "contour.csv", _meta_line(config))

    failures = [r for r in result.rows if r["error"]]
    for row in failures:
        print(f"cell lambda={training.format_lambda(row['lambda'])} "
              f"eta={row['eta']!r} failed: {row['error']}", file=sys.stderr)
    print(f"grid complete: {len(result.rows)} cells, "
          f"{len(result.rows) - len(failures)} succeeded; "
          f"table at {grid_dir / 'contour.csv'}")
    return 0


def _tile_pgm(rows: np.ndarray, side: int, tiles: int = 10) -> bytes:
    """Tile the first tiles^2 rows as side x side images into one raster."""
    canvas = np.zeros((tiles * side, tiles * side), dtype=np.uint8)
    for i in range(min(rows.shape[0], tiles * tiles)):
        r, c = divmod(i, tiles)
        img = rows[i].reshape(side, side) * np.uint8(255)
        canvas[r * side:(r + 1) * side, c * side:(c + 1) * side] = img
    return canvas.tobytes()


def cmd_eval(args) -> int:
    config = _merge_overrides(_load_config(args.config), args)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(config)
    eval_section = config.get("eval", {})

    ckpt_path = Path(args.checkpoint or eval_section.get(
        "checkpoint", out / "rbm.ckpt"))
    if not ckpt_path.is_file():
        raise ValueError(f"checkpoint not found: {ckpt_path}")
    params, ckpt_meta = load_checkpoint(ckpt_path)

    pcd_path = Path(eval_section.get("pcd", out / "pcd.bin"))
    if not pcd_path.is_file():
        raise ValueError(
            f"final PCD sample not found at {pcd_path}; rerun the train "
            f"command with --retain-pcd to keep it")
    pcd_rows = ds_mod.load_dataset(pcd_path).rows

    seed = int(config["seed"])
    ais = evaluation.ais_log_z(
        params,
        n_runs=int(eval_section.get("ais_runs", 100)),
        n_temps=int(eval_section.get("ais_temps", 1000)),
        seed=seed)
    test_rows = ds.split("test")
    kl = evaluation.kl_estimate(params, test_rows, ais)

    gamma = float(ckpt_meta.get("gamma", config.get("train", {}).get("gamma", 0.1)))
    train_measure = EmpiricalMeasure.from_rows(ds.split("train"))
    cost = CostSpec(gamma=gamma, normalizer=mean_pairwise_hamming(train_measure))
    wgamma = evaluation.wgamma_eval(pcd_rows, test_rows, cost)

    proj = evaluation.pca_project(test_rows, pcd_rows)
    evaluation.write_pca_csv(proj, out / "pca.csv")
    _prepend_comment(out / "pca.csv", _meta_line(config))

    side = math.isqrt(ds.dim)
    pgm_name = None
    if side * side == ds.dim:
        pgm_path = out / "samples.pgm"
        header = (f"P5\n{_meta_line(config)}{10 * side} {10 * side}\n255\n")
        pgm_path.write_bytes(header.encode("ascii") + _tile_pgm(pcd_rows, side))
        pgm_name = pgm_path.name
    metrics = {
        "ais_log_z": ais.log_z, "ais_se": ais.se,
        "ais_runs": ais.n_runs, "ais_temps": ais.n_temps,
        "kl_test": kl, "wgamma_test": wgamma, "gamma": gamma,
        "checkpoint": str(ckpt_path), "samples_pgm": pgm_name,
    }
    _write_json(out / "metrics.json", metrics, config)
    print(f"eval: log_z={ais.log_z:.4f} (se {ais.se:.4f}), "
          f"kl_test={kl:.4f}, wgamma_test={wgamma:.6f}")
    return 0


def cmd_tasks(args) -> int:
    config = _merge_overrides(_load_config(args.config), args)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(config)
    section = config.get("tasks", {})

    checkpoints = list(args.checkpoints) or list(section.get("checkpoints", []))
    if not checkpoints and (out / "rbm.ckpt").is_file():
        checkpoints = [str(out / "rbm.ckpt")]
    if not checkpoints:
        raise ValueError("no checkpoints given (tasks.checkpoints or positional args)")

    models = []
    if section.get("kde", True):
        sigma, kde = tasks.select_kde_sigma(ds.split("train"), ds.split("valid"))
        models.append(kde)
        print(f"kde bandwidth selected on validation split: sigma={sigma:.4g}")
    for path_str in checkpoints:
        p = Path(path_str)
        if not p.is_file():
            raise ValueError(f"checkpoint not found: {p}")
        params, _ = load_checkpoint(p)
        if params.d != ds.dim:
            raise ValueError(f"checkpoint {p} has d={params.d}, dataset d={ds.dim}")
        models.append(RbmDensity(params, name=p.stem))

    side = math.isqrt(ds.dim)
    layout = section.get("layout", "patch" if side * side == ds.dim else "subset")
    if layout == "patch":
        sampler = tasks.patch_mask_sampler(height=side, width=side,
                                           l=int(section.get("flips", 4)))
    elif layout == "subset":
        sampler = tasks.subset_mask_sampler(
            ds.dim,
            k_completion=int(section.get("k_completion", 9)),
            k_denoising=int(section.get("k_denoising", 12)),
            l=int(section.get("flips", 4)))
    else:
        raise ValueError(f"tasks.layout must be 'patch' or 'subset', got {layout!r}")

    reports = tasks.run_task_suite(
        models, ds, sampler,
        n_examples=int(section.get("n_examples", 100)),
        seed=int(config["seed"]))
    tasks.write_task_csv(reports, out / "tasks.csv")
    _prepend_comment(out / "tasks.csv", _meta_line(config))
    summary = {r.model: r.means for r in reports}
    _write_json(out / "tasks_summary.json", summary, config)
    for r in reports:
        comp = r.means["completion"]
        line = f"{r.model}: no examples scored" if comp is None else (
            f"{r.model}: completion mean error {comp['mean_error']:.4f} "
            f"(bias {comp['mean_bias']:.4f})")
        print(line)
    return 0


def _apply_thread_limit(threads: int | None) -> None:
    if threads is None:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(threads)
    except ImportError:
        import os
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wrbm",
        description="Train and evaluate transport-regularized Boltzmann "
                    "machines on binary data.")
    parser.add_argument("--threads", type=int, default=None,
                        help="limit numeric library thread pools")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")

    p = sub.add_parser("ingest", help="build the binary dataset container")
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--retain-pcd", action="store_true",
                   help="save the final chain population (needed by eval)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    common(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="partition function, KL, transport distance, PCA")
    common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint to evaluate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tasks", help="completion and denoising scoring")
    common(p)
    p.add_argument("checkpoints", nargs="*",
                   help="checkpoints to score (besides the kernel baseline)")
    p.set_defaults(func=cmd_tasks)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _apply_thread_limit(args.threads)
    try:
        return args.func(args)
    except (TrainError, SinkhornError, AisError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
