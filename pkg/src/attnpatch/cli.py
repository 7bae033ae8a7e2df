"""Command-line entry point: ``attnpatch {train,benchmark,sweep,verify-theorem}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from .data import SCHEMAS, DataError, TabularSchema, load_csv_tabular, load_mnist_half
from .models import PATCH_VARIANTS, VARIANTS, save_checkpoint
from .nw import PROBLEMS, verify_theorem1
from .plots import bar_chart, qq_plot, sweep_chart
from .training import (
    METRIC_MODES,
    NumericAbort,
    RunCache,
    TrainConfig,
    batch_size_sweep,
    monte_carlo,
    run_variant,
)

log = logging.getLogger("attnpatch")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _common(p):
    p.add_argument("--config", help="YAML or JSON run config")
    p.add_argument("--seed", type=int, help="master seed (train.seed)")
    p.add_argument("--jobs", type=int, help="worker processes for Monte-Carlo runs (train.jobs)")
    p.add_argument("--dataset", choices=("mnist_half", "activity", "crop"), help="dataset.name")
    p.add_argument("--variant", choices=VARIANTS, help="model.variant (train only)")
    p.add_argument("--ref-batch", type=int, help="train.ref_batch")
    p.add_argument("--epochs", type=int, help="train.epochs_base (train: the exact epoch budget)")
    p.add_argument("--out-dir", help="output.directory")
    p.add_argument("--metric-mode", choices=METRIC_MODES, help="train.metric_mode")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    epilog = (
        "config keys and defaults:\n"
        + "\n".join("  " + line for line in C.describe().splitlines())
        + f"\n\nenvironment overrides: {C.ENV_PREFIX}<SECTION>_<KEY>, e.g. {C.ENV_PREFIX}TRAIN_LR=0.001"
        + f"\nMNIST IDX files are looked up in ${C.ENV_PREFIX}DATA_DIR/mnist; "
        + f"{C.ENV_PREFIX}FLOAT32=1 switches the tensor engine to 32-bit."
        + "\n\nexit codes: 2 config error, 3 data error, 4 numeric abort"
    )
    parser = argparse.ArgumentParser(
        prog="attnpatch",
        description="Attention patch experiments and kernel regression checks.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("train", "train and evaluate one variant once"),
        ("benchmark", "Monte-Carlo comparison of all variants"),
        ("sweep", "TAP accuracy against reference batch size"),
        ("verify-theorem", "bias / variance scaling of the NW estimator"),
    ):
        _common(sub.add_parser(name, help=text, description=text, epilog=epilog,
                               formatter_class=argparse.RawDescriptionHelpFormatter))
    return parser


def resolve_config(args):
    """File, then environment, then flags."""
    cfg = C.load(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.jobs is not None:
        cfg.train.jobs = args.jobs
    if args.dataset is not None:
        cfg.dataset.name = args.dataset
    if args.variant is not None:
        if args.command != "train":
            raise C.ConfigError("--variant only applies to `train`; use train.variants for benchmarks")
        cfg.model.variant = args.variant
    if args.ref_batch is not None:
        variant = cfg.model.variant
        if args.command == "train" and variant not in PATCH_VARIANTS:
            raise C.ConfigError(f"--ref-batch given, but variant {variant!r} takes no reference data")
        cfg.train.ref_batch = args.ref_batch
    if args.epochs is not None:
        if args.command == "train":
            cfg.train.epochs = args.epochs
        else:
            cfg.train.epochs_base = args.epochs
    if args.out_dir is not None:
        cfg.output.directory = args.out_dir
    if args.metric_mode is not None:
        cfg.train.metric_mode = args.metric_mode
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg.dataset.name not in ("mnist_half", "activity", "crop"):
        raise C.ConfigError(f"dataset.name: unknown dataset {cfg.dataset.name!r}")
    if cfg.model.variant not in VARIANTS:
        raise C.ConfigError(f"model.variant: unknown variant {cfg.model.variant!r}")
    bad = [v for v in cfg.train.variants if v not in VARIANTS]
    if bad:
        raise C.ConfigError(f"train.variants: unknown variants {bad}")
    if cfg.train.metric_mode not in METRIC_MODES:
        raise C.ConfigError(f"train.metric_mode: expected one of {METRIC_MODES}")
    for key in ("ref_batch", "data_batch", "mc_runs", "jobs"):
        if getattr(cfg.train, key) < 1:
            raise C.ConfigError(f"train.{key}: must be positive")
    if cfg.theorem.problem not in PROBLEMS:
        raise C.ConfigError(f"theorem.problem: expected one of {sorted(PROBLEMS)}")
    if any(s < 1 for s in cfg.sweep.sizes):
        raise C.ConfigError("sweep.sizes: sizes must be positive")


def train_config(cfg):
    t = cfg.train
    try:
        return TrainConfig(
            lr=t.lr,
            adam_beta1=t.adam_beta1,
            adam_beta2=t.adam_beta2,
            adam_eps=t.adam_eps,
            data_batch=t.data_batch,
            ref_batch=t.ref_batch,
            epochs_base=cfg.epochs_base,
            mc_runs=t.mc_runs,
            seed=t.seed,
            n_labeled=cfg.dataset.n_labeled,
            n_reference=cfg.dataset.n_reference,
            hidden_dim=cfg.model.hidden_dim,
            dropout_rate=cfg.model.dropout_rate,
            eval_every=cfg.eval_every,
            metric_mode=t.metric_mode,
            stratify=cfg.dataset.stratify,
            jobs=t.jobs,
        )
    except ValueError as exc:
        raise C.ConfigError(str(exc)) from exc


def load_dataset(cfg):
    d = cfg.dataset
    if d.name == "mnist_half":
        return load_mnist_half(d.images, d.labels, d.source)
    if d.path is None:
        raise DataError(f"dataset.path is required for {d.name!r}")
    schema = TabularSchema.from_dict({"name": d.name, **d.schema}) if d.schema else SCHEMAS[d.name]
    try:
        return load_csv_tabular(d.path, schema)
    except FileNotFoundError as exc:
        raise DataError(f"cannot open {d.path}") from exc


def fresh_dir(root, command, cfg):
    """A new directory named by command, dataset, seed and time; never reused."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    subject = cfg.theorem.problem if command == "verify-theorem" else cfg.dataset.name
    base = Path(root) / f"{command}-{subject}-seed{cfg.train.seed}-{stamp}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if row.get(k) is None else row.get(k) for k in columns})


def _cache(cfg):
    if not cfg.output.cache:
        return None
    root = cfg.output.cache_dir or Path(cfg.output.directory) / "cache"
    return RunCache(Path(root) / f"{cfg.dataset.name}_runs.jsonl")


def cmd_train(cfg, out):
    ds = load_dataset(cfg)
    tc = train_config(cfg)
    variant = cfg.model.variant
    result, model, _ = run_variant(ds, variant, tc, run_index=0, epochs=cfg.train.epochs)
    write_json(out / "result.json", result.to_dict())
    rows = [
        {"epoch": e, "val_accuracy": a, "train_loss": result.train_loss[e - 1]}
        for e, a in zip(result.eval_epochs, result.val_accuracy)
    ]
    write_csv(out / "history.csv", rows, ["epoch", "val_accuracy", "train_loss"])
    if cfg.output.checkpoint:
        save_checkpoint(model, out / "model.npz")
    print(f"{variant}: final metric ({result.metric_mode}) = {result.final_metric:.4f}")
    return 0


def cmd_benchmark(cfg, out):
    ds = load_dataset(cfg)
    tc = train_config(cfg)
    rows, results = monte_carlo(
        ds, cfg.train.variants, tc, progress=lambda r: log.info("%s", r), cache=_cache(cfg)
    )
    write_csv(out / "summary.csv", rows, ["variant", "mean", "stderr", "runs", "failed"])
    write_json(
        out / "results.json",
        {"summary": rows, "runs": {v: [r.to_dict() for r in rs] for v, rs in results.items()}},
    )
    if cfg.output.plots:
        (out / "summary.svg").write_text(bar_chart(rows, title=f"{ds.name}: final metric"))
    for r in rows:
        flag = f"  ({r['failed']} failed)" if r["failed"] else ""
        print(f"{r['variant']:>14}  {r['mean']:.4f} +/- {r['stderr']:.4f}  n={r['runs']}{flag}")
    return 0


def cmd_sweep(cfg, out):
    ds = load_dataset(cfg)
    tc = train_config(cfg)
    points, baseline = batch_size_sweep(
        ds, cfg.sweep.sizes, tc, progress=lambda r: log.info("%s", r), cache=_cache(cfg)
    )
    cols = ["kind", "ref_batch", "ratio", "m", "epochs", "mean", "stderr", "runs", "failed"]
    write_csv(out / "curve.csv", points + [baseline], cols)
    write_json(out / "curve.json", {"points": points, "baseline": baseline})
    if cfg.output.plots:
        (out / "curve.svg").write_text(sweep_chart(points, baseline, title=f"{ds.name}: reference batch size"))
    for p in points + [baseline]:
        ratio = "-" if p["ratio"] is None else f"{p['ratio']:g}"
        print(f"{p['kind']:>8}  ratio={ratio:>5}  {p['mean']:.4f} +/- {p['stderr']:.4f}")
    return 0


def cmd_verify_theorem(cfg, out):
    th = cfg.theorem
    factory = PROBLEMS[th.problem]
    report = verify_theorem1(
        factory(sigma=th.sigma),
        n_values=th.n_values,
        alpha=th.alpha,
        trials=th.trials,
        grid=th.grid,
        seed=cfg.train.seed,
        noise_reps=th.noise_reps,
    )
    write_json(out / "theorem.json", report.to_dict())
    if th.qq_plot:
        (out / "qq.svg").write_text(qq_plot(report.residuals_at_mode))
    d = report.to_dict()
    print(f"problem={report.problem}  mu2={report.mu2:g}  R(k)={report.Rk:.6f}  sigma^2={report.sigma2:g}")
    print(f"variance slope vs n h^d: {d['variance_slope']:.3f}")
    bias = d["bias_slope"]
    print(f"bias slope vs h: {bias if isinstance(bias, str) else f'{bias:.3f}'}")
    print(f"rescaled variance / R(k) sigma^2 / p at mode: {report.rescaled_var_ratio:.3f}")
    for name, ok in report.checks.items():
        status = "n/a" if ok is None else ("pass" if ok else "FAIL")
        print(f"  {name:<18} {status:<5} ({report.tolerances[name]})")
    return 0


COMMANDS = {
    "train": cmd_train,
    "benchmark": cmd_benchmark,
    "sweep": cmd_sweep,
    "verify-theorem": cmd_verify_theorem,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        cfg = resolve_config(args)
        out = fresh_dir(cfg.output.directory, args.command, cfg)
        write_json(out / "config.json", cfg.to_dict())
        code = COMMANDS[args.command](cfg, out)
        print(f"results in {out}")
        return code
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
