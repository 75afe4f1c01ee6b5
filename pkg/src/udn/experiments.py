"""Experiment protocols behind the command-line runner.

Each run lives in its own directory named after a hash of its fully
resolved configuration.  A directory that already holds ``summary.json``
counts as finished, so an interrupted sweep picks up where it stopped, and
the aggregators only ever read what is on disk.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from copy import deepcopy
from pathlib import Path

import numpy as np

from .autodiff import ConfigError
from .datasets import load_table, spiral_splits, split, split_fractions, standardize
from .model import PointMass, dense_generator, save_checkpoint
from .trainer import TrainConfig, best_epoch_selection, evaluate, train

SCHEMA_VERSION = 1

SPIRAL_DEFAULTS = {
    "omega": 10.0,
    "seed": 0,
    "model": "udn",
    "n_per_split": 1024,
    "noise_scale": 0.02,
    "width": 32,
    "train": {},
}

REGRESS_DEFAULTS = {
    "data": None,
    "target": None,
    "seed": 0,
    "model": "udn",
    "repeats": 10,
    "fractions": [0.8, 0.1, 0.1],
    "width": 32,
    "sigma": 1.0,
    "train": {"epochs": 1000, "batch_size": 128},
}

PRESETS = {
    "full": {"train": {"epochs": 4000}, "seeds": 5},
    "quick": {"train": {"epochs": 1000}, "seeds": 3},
}


def merge(base: dict, override: dict) -> dict:
    """Recursive dict update; ``override`` wins, ``None`` values are ignored."""
    out = deepcopy(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = deepcopy(value)
    return out


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def parse_model(model: str):
    """``"udn"`` -> ``None``; ``"fixed:L"`` -> ``L``."""
    if model == "udn":
        return None
    kind, _, depth = model.partition(":")
    if kind == "fixed" and depth.isdigit() and int(depth) >= 1:
        return int(depth)
    raise ConfigError(f"model must be 'udn' or 'fixed:L', got {model!r}")


def parse_sweep(text: str) -> list:
    """``"a:b:step"`` -> ``[a, a+step, ..., b]`` (inclusive of ``b``)."""
    try:
        a, b, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"sweep must look like start:stop:step, got {text!r}") from None
    if step <= 0 or b < a:
        raise ConfigError(f"empty sweep {text!r}")
    n = int(math.floor((b - a) / step + 1e-9)) + 1
    return [a + i * step for i in range(n)]


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _train_config(cfg: dict, fixed, task: str) -> TrainConfig:
    settings = dict(cfg["train"])
    settings["seed"] = cfg["seed"]
    settings["task"] = task
    settings["fixed_depth"] = fixed
    return TrainConfig.from_dict(settings)


def _depth_summary(state, fixed):
    if fixed:
        dist = PointMass(fixed)
        return {"mean_depth": float(fixed), "q_pmf": dist.pmf().tolist(), "lambda": None}
    dist = state.depth_dist()
    return {"mean_depth": dist.mean(), "q_pmf": dist.pmf().tolist(), "lambda": state.lam}


# --------------------------------------------------------------------------
# Spiral runs


def resolve_spiral(override: dict) -> dict:
    cfg = merge(SPIRAL_DEFAULTS, override)
    unknown = set(cfg) - set(SPIRAL_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown spiral settings: {sorted(unknown)}")
    parse_model(cfg["model"])
    cfg["omega"] = float(cfg["omega"])
    cfg["train"] = _train_config(cfg, None, "classification").__dict__ | {"fixed_depth": None}
    return cfg


def run_spiral(config: dict, out_root, force: bool = False) -> dict:
    """Train one model on one ``D(omega)`` and write its artifacts.

    Returns the summary dictionary (read back from disk if the run already
    exists and ``force`` is false).
    """
    cfg = resolve_spiral(config)
    run_dir = Path(out_root) / f"spiral-{config_hash(cfg)}"
    summary_path = run_dir / "summary.json"
    if summary_path.exists() and not force:
        return json.loads(summary_path.read_text())
    run_dir.mkdir(parents=True, exist_ok=True)

    fixed = parse_model(cfg["model"])
    data = spiral_splits(cfg["omega"], cfg["n_per_split"], cfg["seed"], cfg["noise_scale"])
    gen = dense_generator(2, cfg["width"], 2)
    final, record = train(_train_config(cfg, fixed, "classification"), gen, data)
    best_epoch, best = best_epoch_selection(record.validation, record.checkpoints)
    test = evaluate(best, gen, data.subset("test"), PointMass(fixed) if fixed else None)

    at_best = _depth_summary(best, fixed)
    at_end = _depth_summary(final, fixed)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": "spiral",
        "config": cfg,
        "best_epoch": best_epoch,
        "test": test,
        "mean_depth": at_end["mean_depth"],
        "final_q_pmf": at_end["q_pmf"],
        "final_lambda": at_end["lambda"],
        "best_mean_depth": at_best["mean_depth"],
        "best_q_pmf": at_best["q_pmf"],
        "layers_created": final.created_count,
    }
    (run_dir / "runrecord.ndjson").write_text(record.to_ndjson())
    save_checkpoint(best, run_dir / "checkpoint.npz")
    _write_csv(run_dir / "plotdata" / "lambda_trajectory.csv",
               ["epoch", "lambda", "mean_depth", "m_q"],
               [[e["epoch"], e["lambda"], e["mean_depth"], e["m_q"]] for e in record.entries])
    point = [cfg["model"], cfg["omega"], cfg["seed"]]
    _write_csv(run_dir / "plotdata" / "accuracy_vs_omega.csv",
               ["model", "omega", "seed", "accuracy"], [point + [test["accuracy"]]])
    _write_csv(run_dir / "plotdata" / "depth_vs_omega.csv",
               ["model", "omega", "seed", "mean_depth"], [point + [summary["mean_depth"]]])
    _write_json(summary_path, summary)
    return summary


def spiral_matrix(base: dict, omegas, seeds, models) -> list:
    """One config per ``(model, omega, seed)``."""
    return [merge(base, {"model": model, "omega": omega, "seed": seed})
            for model in models for omega in omegas for seed in seeds]


# --------------------------------------------------------------------------
# Regression runs


def resolve_regress(override: dict) -> dict:
    cfg = merge(REGRESS_DEFAULTS, override)
    unknown = set(cfg) - set(REGRESS_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown regression settings: {sorted(unknown)}")
    if not cfg["data"] or cfg["target"] is None:
        raise ConfigError("regression needs both a data path and a target column")
    if cfg["repeats"] < 1:
        raise ConfigError("repeats must be at least 1")
    parse_model(cfg["model"])
    cfg["data"] = str(cfg["data"])
    cfg["train"] = _train_config(cfg, None, "regression").__dict__ | {"fixed_depth": None}
    return cfg


def run_regress(config: dict, out_root, force: bool = False) -> dict:
    """Repeat train/valid/test on ``repeats`` random splits of one table."""
    cfg = resolve_regress(config)
    target = cfg["target"]
    if isinstance(target, str) and target.lstrip("-").isdigit():
        target = int(target)
    table = load_table(cfg["data"], target, task="regression")
    run_dir = Path(out_root) / f"regress-{config_hash(cfg)}"
    summary_path = run_dir / "summary.json"
    if summary_path.exists() and not force:
        return json.loads(summary_path.read_text())
    run_dir.mkdir(parents=True, exist_ok=True)

    fixed = parse_model(cfg["model"])
    gen = dense_generator(table.n_features, cfg["width"], task="regression", sigma=cfg["sigma"])
    sizes = split_fractions(len(table), cfg["fractions"])
    repeats, lines = [], []
    for r in range(cfg["repeats"]):
        seed = cfg["seed"] + r
        data = standardize(split(table, sizes, seed))
        tc = _train_config(cfg, fixed, "regression")
        tc.seed = seed
        final, record = train(tc, gen, data)
        best_epoch, best = best_epoch_selection(record.validation, record.checkpoints)
        test = evaluate(best, gen, data.subset("test"), PointMass(fixed) if fixed else None)
        depth = _depth_summary(final, fixed)
        repeats.append({"repeat": r, "seed": seed, "best_epoch": best_epoch, "rmse": test["rmse"],
                        "mean_depth": depth["mean_depth"], "final_q_pmf": depth["q_pmf"]})
        lines += [json.dumps({"repeat": r, **e}) + "\n" for e in record.entries]

    rmse = np.array([r["rmse"] for r in repeats])
    depth = np.array([r["mean_depth"] for r in repeats])
    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": "regress",
        "config": cfg,
        "rmse_mean": float(rmse.mean()),
        "rmse_sd": float(rmse.std(ddof=1)) if len(rmse) > 1 else 0.0,
        "mean_depth": float(depth.mean()),
        "repeats": repeats,
    }
    (run_dir / "runrecord.ndjson").write_text("".join(lines))
    _write_json(summary_path, summary)
    return summary


# --------------------------------------------------------------------------
# Aggregation over run directories


def load_summaries(root, kind: str | None = None) -> list:
    out = []
    for path in sorted(Path(root).glob("*/summary.json")):
        s = json.loads(path.read_text())
        if kind is None or s.get("kind") == kind:
            out.append(s)
    return out


def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def aggregate_spiral(summaries) -> dict:
    """Per-model accuracy averaged over omega, then mean +- sd over seeds.

    Also returns per-``(model, omega)`` accuracy and depth points for the
    accuracy-vs-omega and depth-vs-omega plots.
    """
    by_model = {}
    for s in summaries:
        c = s["config"]
        by_model.setdefault(c["model"], {}).setdefault(c["seed"], {})[c["omega"]] = s
    table, acc_points, depth_points = [], [], []
    for model in sorted(by_model):
        seeds = by_model[model]
        per_seed = [np.mean([r["test"]["accuracy"] for r in runs.values()]) for runs in seeds.values()]
        mean, sd = _mean_sd(per_seed)
        omegas = sorted({w for runs in seeds.values() for w in runs})
        table.append({"model": model, "accuracy_mean": mean, "accuracy_sd": sd,
                      "n_seeds": len(seeds), "n_omegas": len(omegas)})
        for w in omegas:
            runs = [seeds[k][w] for k in seeds if w in seeds[k]]
            acc = _mean_sd([r["test"]["accuracy"] for r in runs])
            dep = _mean_sd([r["mean_depth"] for r in runs])
            acc_points.append([model, w, *acc, len(runs)])
            depth_points.append([model, w, *dep, len(runs)])
    return {"table": table, "accuracy_vs_omega": acc_points, "depth_vs_omega": depth_points}


def format_table(rows) -> str:
    """Model / mean accuracy +- sd, in percent."""
    lines = [f"{'model':<10} accuracy"]
    for r in rows:
        lines.append(f"{r['model']:<10} {100 * r['accuracy_mean']:.1f} ± {100 * r['accuracy_sd']:.1f}")
    return "\n".join(lines)


def aggregate_dir(root) -> dict:
    """Fold every finished run under ``root`` into ``aggregate.json`` and plot CSVs."""
    root = Path(root)
    spiral = load_summaries(root, "spiral")
    regress = load_summaries(root, "regress")
    if not spiral and not regress:
        raise ConfigError(f"no finished runs under {root}")
    result = {"schema_version": SCHEMA_VERSION, "runs": len(spiral) + len(regress)}
    if spiral:
        agg = aggregate_spiral(spiral)
        result["spiral"] = agg["table"]
        _write_csv(root / "plotdata" / "accuracy_vs_omega.csv",
                   ["model", "omega", "accuracy_mean", "accuracy_sd", "n"], agg["accuracy_vs_omega"])
        _write_csv(root / "plotdata" / "depth_vs_omega.csv",
                   ["model", "omega", "mean_depth_mean", "mean_depth_sd", "n"], agg["depth_vs_omega"])
    if regress:
        result["regress"] = [
            {"data": s["config"]["data"], "model": s["config"]["model"], "rmse_mean": s["rmse_mean"],
             "rmse_sd": s["rmse_sd"], "mean_depth": s["mean_depth"]}
            for s in regress
        ]
    _write_json(root / "aggregate.json", result)
    return result
