"""Experiment harness: generation, training runs, sweeps, bound checks.

Subcommands: generate, run, sweep-k, sweep-rho, oracle-check, predict.
Configs are JSON (strict schema, unknown keys rejected) or `preset:<name>`;
presets mirror the benchmark defaults per dataset. Results land in --out as
`results.csv` (fixed column set) plus `results.json` with full fold detail.
Exit codes: 0 success, 2 config error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

CSV_COLUMNS = ("dataset", "noise", "method", "metric", "mean", "std",
               "folds", "seed", "config_hash", "wall_s")

METHODS = ("cfqp", "deep_ite", "sc")
METRICS = ("cf_mse", "pehe", "ssim")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration

COMMON_DEFAULTS = {
    "noise": "additive",
    "methods": ["cfqp", "deep_ite", "sc"],
    "pehe_doses": [0.5, 0.8],
    "lr": 0.001,
    "batch_size": 128,
    "clusterer": "kmeans",
    "early_stop": False,
    "reset_adam": False,
    "sc_window": 0.1,
    "rho_values": [0.0, 0.5, 1.0],
    "seed": 0,
    "folds": 5,
    "stable_output": False,
    "save_checkpoint": False,
    "source_images": None,
    "source_labels": None,
}

# benchmark table settings per dataset (time series) and the reduced-scale
# image preset (4000 procedural 14x14 glyphs standing in for the full corpus)
DATASET_DEFAULTS = {
    "oscillator": {
        "sigma": 0.05, "k0": 3, "n_train": 128, "n_val": 128, "n_test": 1000,
        "k": 3, "delta": 20, "epochs0": 500, "epochs1": 500,
        "hidden_sizes": [64], "metrics": ["cf_mse"], "k_range": [1, 2, 3, 4, 5],
    },
    "cardio": {
        "sigma": 0.01, "k0": 2, "n_train": 500, "n_val": 250, "n_test": 1000,
        "k": 2, "delta": 20, "epochs0": 500, "epochs1": 500,
        "hidden_sizes": [64], "metrics": ["cf_mse"], "k_range": [1, 2, 3],
    },
    "images": {
        "sigma": 0.01, "k0": 6, "n_train": 4000, "n_val": 1000, "n_test": 1000,
        "k": 6, "delta": 10, "epochs0": 50, "epochs1": 50,
        "hidden_sizes": [64], "metrics": ["cf_mse", "ssim"],
        "k_range": [1, 2, 3, 4, 5, 6, 7, 8, 9],
        "rho": 0.5, "image_size": 14, "rotation_scale": 10.0,
    },
}

# noise-mode exceptions to the table defaults
NOISE_OVERRIDES = {
    ("oscillator", "non_additive"): {"n_test": 128},
    ("images", "non_additive"): {"sigma": 0.05},
}

ORACLE_DEFAULTS = {"t": 0.3, "t_prime": 0.9, "n_samples": [5000],
                   "n_eval": 64, "cloud_per_class": 2000, "bootstrap": 1000}

_SCHEMA = {
    "dataset": str, "noise": str, "sigma": (int, float), "k0": int,
    "rho": (int, float), "image_size": int, "rotation_scale": (int, float),
    "n_train": int, "n_val": int, "n_test": int,
    "methods": list, "metrics": list, "pehe_doses": list,
    "k": int, "delta": int, "epochs0": int, "epochs1": int,
    "lr": (int, float), "batch_size": int, "hidden_sizes": list,
    "clusterer": str, "early_stop": bool, "reset_adam": bool,
    "sc_window": (int, float), "k_range": list, "rho_values": list,
    "oracle": dict, "seed": int, "folds": int, "stable_output": bool,
    "save_checkpoint": bool, "source_images": (str, type(None)),
    "source_labels": (str, type(None)),
}
_ORACLE_SCHEMA = {"t": (int, float), "t_prime": (int, float),
                  "n_samples": (int, list), "k": int, "n_eval": int,
                  "cloud_per_class": int, "bootstrap": int}


def load_config(spec: str) -> dict:
    """Read a raw config from a JSON path or a `preset:<dataset>` reference."""
    if spec.startswith("preset:"):
        name = spec.split(":", 1)[1]
        parts = name.rsplit("-", 1)
        noise = {"additive": "additive", "nonadditive": "non_additive"}.get(
            parts[-1] if len(parts) == 2 else "")
        if noise is None or parts[0] not in DATASET_DEFAULTS:
            known = ", ".join(f"{d}-{s}" for d in DATASET_DEFAULTS
                              for s in ("additive", "nonadditive"))
            raise ConfigError(f"unknown preset {name!r}; presets: {known}")
        return {"dataset": parts[0], "noise": noise}
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"config file not found: {spec}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return raw


def _check_types(raw: dict, schema: dict, where: str) -> None:
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")
    for key, types in schema.items():
        if key in raw and not isinstance(raw[key], types):
            raise ConfigError(
                f"{where} field {key!r} has type {type(raw[key]).__name__}")
        if key in raw and isinstance(raw[key], bool) and types in (int, (int, float)):
            raise ConfigError(f"{where} field {key!r} must be a number")


def resolve_config(raw: dict, seed=None, folds=None) -> dict:
    """Apply per-dataset defaults and validate; returns a complete config."""
    _check_types(raw, _SCHEMA, "config")
    dataset = raw.get("dataset")
    if dataset not in DATASET_DEFAULTS:
        raise ConfigError(f"dataset must be one of {sorted(DATASET_DEFAULTS)}, "
                          f"got {dataset!r}")
    noise = raw.get("noise", "additive")
    if noise not in ("additive", "non_additive"):
        raise ConfigError(f"noise must be additive or non_additive, got {noise!r}")

    res = dict(COMMON_DEFAULTS)
    res.update(DATASET_DEFAULTS[dataset])
    res.update(NOISE_OVERRIDES.get((dataset, noise), {}))
    res.update({k: v for k, v in raw.items() if k != "oracle"})
    res["dataset"] = dataset
    res["noise"] = noise
    oracle = dict(ORACLE_DEFAULTS)
    oracle["k"] = res["k0"]
    oracle.update(raw.get("oracle", {}))
    _check_types(oracle, _ORACLE_SCHEMA, "oracle")
    if isinstance(oracle["n_samples"], int):
        oracle["n_samples"] = [oracle["n_samples"]]
    res["oracle"] = oracle
    if seed is not None:
        res["seed"] = int(seed)
    if folds is not None:
        res["folds"] = int(folds)

    bad = [m for m in res["methods"] if m not in METHODS]
    if bad or not res["methods"]:
        raise ConfigError(f"methods must be a non-empty subset of {METHODS}")
    bad = [m for m in res["metrics"] if m not in METRICS]
    if bad or not res["metrics"]:
        raise ConfigError(f"metrics must be a non-empty subset of {METRICS}")
    if "ssim" in res["metrics"] and dataset != "images":
        raise ConfigError("ssim is defined on image outcomes only")
    if len(res["pehe_doses"]) != 2:
        raise ConfigError("pehe_doses must list exactly two treatment values")
    if res["folds"] < 1:
        raise ConfigError("folds must be >= 1")
    if not res["k_range"]:
        raise ConfigError("k_range must be non-empty")
    if not all(isinstance(k, int) and k >= 1 for k in res["k_range"]):
        raise ConfigError("k_range entries must be integers >= 1")
    if not all(isinstance(h, int) and h >= 1 for h in res["hidden_sizes"]):
        raise ConfigError("hidden_sizes entries must be integers >= 1")
    if not all(isinstance(r, (int, float)) and not isinstance(r, bool)
               for r in res["rho_values"]) or not res["rho_values"]:
        raise ConfigError("rho_values must be a non-empty list of numbers")
    if (res["source_images"] is None) != (res["source_labels"] is None):
        raise ConfigError("source_images and source_labels go together")
    return res


def config_hash(resolved: dict) -> str:
    """Git-style blob SHA-1 of the canonical JSON form of the config."""
    payload = json.dumps(resolved, sort_keys=True,
                         separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\x00" % len(payload) + payload).hexdigest()


# ---------------------------------------------------------------------------
# experiment plumbing

def _gen_config(res: dict, seed: int):
    from .datagen import GenConfig
    kwargs = {}
    if res["dataset"] == "images":
        kwargs = {"rho": float(res["rho"]), "image_size": res["image_size"],
                  "rotation_scale": float(res["rotation_scale"])}
    return GenConfig(res["dataset"], res["n_train"], res["n_val"],
                     res["n_test"], sigma=float(res["sigma"]),
                     noise_mode=res["noise"], k0=res["k0"], seed=seed, **kwargs)


def _model_config(res: dict, seed: int):
    from .model import CfqpConfig
    return CfqpConfig(k=res["k"], delta=res["delta"], epochs0=res["epochs0"],
                      epochs1=res["epochs1"], lr=float(res["lr"]),
                      batch_size=res["batch_size"], clusterer=res["clusterer"],
                      seed=seed, hidden_sizes=tuple(res["hidden_sizes"]),
                      early_stop=res["early_stop"],
                      reset_adam=res["reset_adam"])


def _load_source(res: dict):
    if res["source_images"] is None:
        return None
    from .dataio import load_digit_corpus
    return load_digit_corpus(res["source_images"], res["source_labels"])


def _generate(res: dict, seed: int, rho=None, source=None):
    from .datagen import generate
    cfg = _gen_config(res, seed)
    if rho is not None:
        cfg = cfg.replace(rho=float(rho))
    return generate(cfg, source=source)


def _fit_predictor(method: str, ds, res: dict, seed: int):
    """Train one method; returns (artifact, predict(x, t, y, t_prime))."""
    if method == "cfqp":
        from .model import fit, predict_cf_batch
        model = fit(ds, _model_config(res, seed))
        return model, lambda x, t, y, tp: predict_cf_batch(model, x, t, y, tp)
    if method == "deep_ite":
        from .baselines import deep_ite_fit, deep_ite_predict
        m0 = deep_ite_fit(ds, _model_config(res, seed))
        return m0, lambda x, t, y, tp: deep_ite_predict(m0, x, tp)
    from .baselines import sc_fit, sc_predict_batch
    sc = sc_fit(ds, window=float(res["sc_window"]))
    return sc, lambda x, t, y, tp: sc_predict_batch(sc, x, y, t, tp)


def _evaluate(res: dict, ds, idx, t_prime, y_true, predict) -> dict:
    from .datagen import regen_outcomes
    from .metrics import cf_mse, pehe, ssim
    x, t, y = ds.x[idx], ds.t[idx], ds.y[idx]
    out = {}
    pred = predict(x, t, y, t_prime)
    for metric in res["metrics"]:
        if metric == "cf_mse":
            out[metric] = cf_mse(y_true, pred)
        elif metric == "ssim":
            out[metric] = float(np.mean([
                ssim(y_true[i].reshape(ds.y_shape), pred[i].reshape(ds.y_shape))
                for i in range(len(idx))]))
        else:
            d1, d2 = (float(d) for d in res["pehe_doses"])
            t1 = np.full(len(idx), d1)
            t2 = np.full(len(idx), d2)
            out[metric] = pehe(regen_outcomes(ds, idx, t1),
                               regen_outcomes(ds, idx, t2),
                               predict(x, t, y, t1), predict(x, t, y, t2))
    return out


def _run_fold(res: dict, fold: int, source) -> dict:
    from .datagen import cf_tuples
    seed = res["seed"] + fold
    detail = {"fold": fold, "seed": seed, "status": "ok", "methods": {}}
    try:
        ds = _generate(res, seed, source=source)
        idx, t_prime, y_true = cf_tuples(ds, seed=seed)
        for method in res["methods"]:
            t0 = time.time()
            artifact, predict = _fit_predictor(method, ds, res, seed)
            metrics = _evaluate(res, ds, idx, t_prime, y_true, predict)
            detail["methods"][method] = {
                "metrics": metrics, "wall_s": time.time() - t0}
            if method == "cfqp" and fold == 0 and res["save_checkpoint"]:
                detail["checkpoint_model"] = artifact
    except Exception as err:  # recorded per fold, surfaced in the table
        detail["status"] = f"error: {err}"
    return detail


def _fold_map(res: dict, threads: int, worker):
    folds = range(res["folds"])
    if threads <= 1:
        return [worker(f) for f in folds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, folds))


def _aggregate(values) -> tuple:
    vals = [float(v) for v in values]
    mean = float(np.mean(vals))
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return mean, std


def _row(res: dict, chash: str, method: str, metric: str, values,
         wall: float) -> dict:
    mean, std = _aggregate(values)
    return {"dataset": res["dataset"], "noise": res["noise"], "method": method,
            "metric": metric, "mean": f"{mean:.10g}", "std": f"{std:.10g}",
            "folds": len(list(values)), "seed": res["seed"],
            "config_hash": chash,
            "wall_s": "0.000" if res["stable_output"] else f"{wall:.3f}"}


def _persist(res: dict, chash: str, rows, detail, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [",".join(CSV_COLUMNS)]
    lines += [",".join(str(r[c]) for c in CSV_COLUMNS) for r in rows]
    (out_dir / "results.csv").write_text("\n".join(lines) + "\n")
    if res["stable_output"]:
        detail = _zero_walls(detail)
    payload = {"config": res, "config_hash": chash, "rows": rows,
               "detail": detail}
    (out_dir / "results.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _zero_walls(node):
    if isinstance(node, dict):
        return {k: (0.0 if k == "wall_s" else _zero_walls(v))
                for k, v in node.items()}
    if isinstance(node, list):
        return [_zero_walls(v) for v in node]
    return node


def _ok_folds(details, what: str):
    ok = [d for d in details if d["status"] == "ok"]
    if not ok:
        first = next(d["status"] for d in details)
        raise RuntimeError(f"all {what} folds failed; first failure: {first}")
    return ok


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(res: dict, args) -> int:
    from .dataio import save_dataset
    ds = _generate(res, res["seed"], source=_load_source(res))
    out = save_dataset(ds, Path(args.out) / "dataset")
    print(f"dataset written to {out}")
    return EXIT_OK


def cmd_run(res: dict, args) -> int:
    chash = config_hash(res)
    source = _load_source(res)
    details = _fold_map(res, args.threads, lambda f: _run_fold(res, f, source))
    checkpoint = None
    for d in details:
        checkpoint = d.pop("checkpoint_model", checkpoint)
    ok = _ok_folds(details, "run")
    rows = []
    for method in res["methods"]:
        have = [d for d in ok if method in d["methods"]]
        wall = sum(d["methods"][method]["wall_s"] for d in have)
        for metric in res["metrics"]:
            vals = [d["methods"][method]["metrics"][metric] for d in have]
            rows.append(_row(res, chash, method, metric, vals, wall))
    _persist(res, chash, rows, details, Path(args.out))
    if checkpoint is not None:
        from .model import save_cfqp
        save_cfqp(checkpoint, Path(args.out) / "checkpoint")
    for r in rows:
        print(f"{r['method']:>9s} {r['metric']}: {r['mean']} +- {r['std']} "
              f"({r['folds']} folds)")
    return EXIT_OK


def cmd_sweep_k(res: dict, args) -> int:
    from .datagen import cf_tuples
    from .model import predict_cf_batch, select_k
    chash = config_hash(res)
    source = _load_source(res)
    k_range = list(res["k_range"])

    def worker(fold: int) -> dict:
        seed = res["seed"] + fold
        detail = {"fold": fold, "seed": seed, "status": "ok"}
        try:
            t0 = time.time()
            ds = _generate(res, seed, source=source)
            idx, t_prime, y_true = cf_tuples(ds, seed=seed)
            best, table = select_k(ds, _model_config(res, seed), k_range)
            from .metrics import cf_mse
            per_k = []
            for entry in table:
                pred = predict_cf_batch(entry["model"], ds.x[idx], ds.t[idx],
                                        ds.y[idx], t_prime)
                per_k.append({"k": entry["k"], "val_mse": entry["val_mse"],
                              "cf_mse": cf_mse(y_true, pred)})
            detail.update(argmin_k=best, per_k=per_k,
                          wall_s=time.time() - t0)
        except Exception as err:
            detail["status"] = f"error: {err}"
        return detail

    details = _fold_map(res, args.threads, worker)
    ok = _ok_folds(details, "sweep-k")
    wall = sum(d["wall_s"] for d in ok)
    rows = [_row(res, chash, "cfqp", "argmin_k",
                 [d["argmin_k"] for d in ok], wall)]
    for pos, k in enumerate(k_range):
        for metric in ("val_mse", "cf_mse"):
            vals = [d["per_k"][pos][metric] for d in ok]
            rows.append(_row(res, chash, "cfqp", f"{metric}@k={k}", vals, wall))
    _persist(res, chash, rows, details, Path(args.out))
    print(f"validation argmin K per fold: {[d['argmin_k'] for d in ok]}")
    return EXIT_OK


def cmd_sweep_rho(res: dict, args) -> int:
    from scipy.stats import chisquare
    from .datagen import cf_tuples
    chash = config_hash(res)
    if res["dataset"] != "images":
        raise ConfigError("sweep-rho is defined for the image generator only")
    source = _load_source(res)
    details = []
    rows = []
    for rho in res["rho_values"]:
        def worker(fold: int, rho=rho) -> dict:
            seed = res["seed"] + fold
            detail = {"fold": fold, "seed": seed, "rho": rho, "status": "ok",
                      "methods": {}}
            try:
                ds = _generate(res, seed, rho=rho, source=source)
                counts = np.bincount(ds.u_z, minlength=res["k0"])
                detail["uniformity_p"] = float(chisquare(counts).pvalue)
                idx, t_prime, y_true = cf_tuples(ds, seed=seed)
                for method in res["methods"]:
                    t0 = time.time()
                    _, predict = _fit_predictor(method, ds, res, seed)
                    metrics = _evaluate(res, ds, idx, t_prime, y_true, predict)
                    detail["methods"][method] = {
                        "metrics": metrics, "wall_s": time.time() - t0}
            except Exception as err:
                detail["status"] = f"error: {err}"
            return detail

        fold_details = _fold_map(res, args.threads, worker)
        details.extend(fold_details)
        ok = _ok_folds(fold_details, f"sweep-rho rho={rho}")
        rows.append(_row(res, chash, "generator", f"uniformity_p@rho={rho:g}",
                         [d["uniformity_p"] for d in ok], 0.0))
        for method in res["methods"]:
            wall = sum(d["methods"][method]["wall_s"] for d in ok)
            for metric in res["metrics"]:
                vals = [d["methods"][method]["metrics"][metric] for d in ok]
                rows.append(_row(res, chash, method,
                                 f"{metric}@rho={rho:g}", vals, wall))
    _persist(res, chash, rows, details, Path(args.out))
    for r in rows:
        if r["method"] != "generator":
            print(f"{r['method']:>9s} {r['metric']}: {r['mean']} +- {r['std']}")
    return EXIT_OK


def cmd_oracle_check(res: dict, args) -> int:
    from .oracle import bound_check, make_site
    chash = config_hash(res)
    spec = res["oracle"]
    try:
        site = make_site(res["dataset"], float(res["sigma"]),
                         noise_mode=res["noise"])
    except ValueError as err:
        raise ConfigError(str(err)) from err
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    rows = []
    for n in spec["n_samples"]:
        t0 = time.time()
        report = bound_check(site, t=float(spec["t"]),
                             t_prime=float(spec["t_prime"]), n_samples=int(n),
                             k=int(spec["k"]), n_eval=int(spec["n_eval"]),
                             cloud_per_class=int(spec["cloud_per_class"]),
                             bootstrap=int(spec["bootstrap"]),
                             seed=res["seed"],
                             out=out_dir / f"oracle_n{int(n)}.json")
        reports.append(report)
        wall = time.time() - t0
        for field in ("e_w1", "delta_hat"):
            rows.append(_row(res, chash, "oracle", f"{field}@n={int(n)}",
                             [report[field]], wall))
        print(f"n={int(n)}: e_w1={report['e_w1']:.6f} "
              f"delta_hat={report['delta_hat']:.6f} "
              f"{'PASS' if report['pass'] else 'FAIL'}")
    _persist(res, chash, rows, {"reports": reports}, out_dir)
    return EXIT_OK


def cmd_predict(res_unused, args) -> int:
    raw = load_config(args.config)
    needed = {"checkpoint", "x", "t", "y", "t_prime"}
    if set(raw) != needed:
        missing = sorted(needed - set(raw))
        extra = sorted(set(raw) - needed)
        raise ConfigError(f"predict config needs keys {sorted(needed)}"
                          + (f"; missing {missing}" if missing else "")
                          + (f"; unknown {extra}" if extra else ""))
    from .model import infer_cluster, load_cfqp, predict_cf
    try:
        model = load_cfqp(raw["checkpoint"])
    except FileNotFoundError as err:
        raise ConfigError(f"checkpoint not found: {err}") from err
    x = np.asarray(raw["x"], dtype=float)
    y = np.asarray(raw["y"], dtype=float)
    t, tp = float(raw["t"]), float(raw["t_prime"])
    answer = {"cluster": infer_cluster(model, x, t, y),
              "y_prime": predict_cf(model, x, t, y, tp).tolist()}
    text = json.dumps(answer, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "prediction.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry

COMMANDS = {"generate": cmd_generate, "run": cmd_run, "sweep-k": cmd_sweep_k,
            "sweep-rho": cmd_sweep_rho, "oracle-check": cmd_oracle_check,
            "predict": cmd_predict}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfqp", description="counterfactual query prediction harness")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="JSON config path or preset:<dataset>-<noise>")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="results")
        p.add_argument("--folds", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
    return parser


def _set_threads(n: int) -> None:
    import os
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    _set_threads(args.threads)
    try:
        if args.command == "predict":
            return cmd_predict(None, args)
        res = resolve_config(load_config(args.config), seed=args.seed,
                             folds=args.folds)
        return COMMANDS[args.command](res, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
