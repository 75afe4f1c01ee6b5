"""Command-line runner: ``udn verify-theorem1 | spiral | regress | aggregate``.

Exit codes: 0 success, 1 a checked property failed, 2 bad configuration or
input, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .autodiff import ConfigError, NonFiniteError
from .datasets import TableParseError
from .trainer import TrainingAborted
from .truncated_poisson import verify_theorem1

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("udn")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return cfg


def _train_flags(args) -> dict:
    return {
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "lambda_init": args.lambda_init,
        "prior_alpha": args.prior_alpha,
        "optimizer": args.optimizer,
    }


def cmd_verify_theorem1(args) -> int:
    cfg = ex.merge({"k_max": 70, "delta": 0.95}, _read_config(args.config))
    cfg = ex.merge(cfg, {"k_max": args.k_max})
    if cfg["k_max"] < 1:
        raise ConfigError("k-max must be at least 1")
    report = verify_theorem1(cfg["k_max"], cfg["delta"], upper=getattr(args, "upper_hook", None))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "margins.csv").write_text(report.to_csv())
    print(f"k=1..{cfg['k_max']}: min margin {report.margins.min():.4f}; wrote {out / 'margins.csv'}")
    if not report.ok:
        print(f"bound violated at k = {report.failures}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_spiral(args) -> int:
    file_cfg = _read_config(args.config)
    preset = ex.PRESETS[args.preset] if args.preset else {}
    sweep = args.sweep or file_cfg.pop("sweep", None)
    seeds = args.seeds or file_cfg.pop("seeds", None) or preset.get("seeds")
    models = args.model or file_cfg.pop("models", None)
    base = ex.merge({"train": preset.get("train", {})}, file_cfg)
    base = ex.merge(base, {"omega": args.omega, "seed": args.seed,
                           "noise_scale": args.noise_scale, "train": _train_flags(args)})

    omegas = ex.parse_sweep(sweep) if sweep else [base.get("omega", ex.SPIRAL_DEFAULTS["omega"])]
    first = base.get("seed", 0)
    seed_list = list(range(first, first + seeds)) if seeds else [first]
    if isinstance(models, str):
        models = [models]
    models = models or [base.get("model", "udn")]
    configs = ex.spiral_matrix(base, omegas, seed_list, models)
    for c in configs:
        ex.resolve_spiral(c)  # fail on bad settings before any training

    for c in configs:
        s = ex.run_spiral(c, args.out, force=args.force)
        print(f"{c['model']:<8} omega={c['omega']:<5g} seed={c['seed']}  "
              f"test acc {s['test']['accuracy']:.4f}  E[depth] {s['mean_depth']:.2f}")
    if len(configs) > 1:
        agg = ex.aggregate_dir(args.out)
        print(ex.format_table(agg["spiral"]))
    return EXIT_OK


def cmd_regress(args) -> int:
    file_cfg = _read_config(args.config)
    cfg = ex.merge(file_cfg, {"data": args.data, "target": args.target, "model": args.model,
                              "seed": args.seed, "repeats": args.repeats,
                              "train": _train_flags(args)})
    if cfg.get("data") and not Path(cfg["data"]).is_file():
        raise ConfigError(f"data file not found: {cfg['data']}")
    s = ex.run_regress(cfg, args.out, force=args.force)
    print(f"{s['config']['model']}: RMSE {s['rmse_mean']:.4f} ± {s['rmse_sd']:.4f} "
          f"over {len(s['repeats'])} splits; E[depth] {s['mean_depth']:.2f}")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    agg = ex.aggregate_dir(args.out)
    if "spiral" in agg:
        print(ex.format_table(agg["spiral"]))
    for r in agg.get("regress", []):
        print(f"{r['model']:<10} {r['data']}: RMSE {r['rmse_mean']:.4f} ± {r['rmse_sd']:.4f}")
    return EXIT_OK


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lambda-init", type=float)
    g.add_argument("--prior-alpha", type=float)
    g.add_argument("--optimizer", choices=["adam", "sgd_momentum"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udn", description="Unbounded-depth network experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-theorem1", help="check the support-size bounds, write margins.csv")
    p.add_argument("--k-max", type=int)
    p.add_argument("--config")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_verify_theorem1)

    p = sub.add_parser("spiral", help="train on the spiral benchmark")
    p.add_argument("--omega", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--model", action="append", help="udn or fixed:L; repeat for several")
    p.add_argument("--preset", choices=sorted(ex.PRESETS))
    p.add_argument("--sweep", help="omega range start:stop:step")
    p.add_argument("--seeds", type=int, help="number of consecutive seeds")
    p.add_argument("--noise-scale", type=float)
    p.add_argument("--config")
    p.add_argument("--out", default="runs")
    p.add_argument("--force", action="store_true", help="rerun even if results exist")
    _add_train_flags(p)
    p.set_defaults(func=cmd_spiral)

    p = sub.add_parser("regress", help="repeated-split regression on a table")
    p.add_argument("--data")
    p.add_argument("--target")
    p.add_argument("--model")
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--config")
    p.add_argument("--out", default="runs")
    p.add_argument("--force", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_regress)

    p = sub.add_parser("aggregate", help="summarise finished runs in a directory")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TableParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NonFiniteError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
