"""``kd3lab`` command line.

Subcommands: gen-data, pretrain, distill, ablate, sweep, evaluate, export-features.
Data goes to files (or stdout for ``evaluate``); diagnostics go to stderr and
any failure exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import _accel
from .config import CliConfig, ConfigError, load_config
from .datagen import (
    DatasetFormatError,
    IdxFormatError,
    LabeledSet,
    Provenance,
    gen_shift_benchmark,
    load_dataset,
    save_dataset,
)
from .experiments import ablation_table, run_variant, teacher_arch
from .mixdist import perturb_batch
from .model import CheckpointError, forward_features, load_checkpoint, pretrain_teacher, save_checkpoint
from .numerics import Rng
from .trainer import FrozenClassifierViolation, _S_MIX, evaluate

log = logging.getLogger("kd3lab")

OUT_ENV = "KD3LAB_OUT"
DEFAULT_OUT = "kd3lab-out"
SWEEP_PARAMS = {"alpha_tradeoff": "alpha_tradeoff", "tau": "tau", "V_th": "V_th", "delta": "delta"}


class CliError(Exception):
    pass


def _finite(obj):
    """Replace NaN/inf with None so JSON output stays standard."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_finite(obj), indent=1, sort_keys=True) + "\n")


def _config(args, require_seed=True) -> CliConfig:
    if args.config is None:
        cfg = CliConfig(source="<command line>")
    else:
        cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if require_seed:
        cfg.require("seed")
    return cfg


def _out_dir(args, cfg: CliConfig | None) -> Path:
    if args.out is not None:
        out = Path(args.out)
    elif cfg is not None and cfg["out_dir"] is not None:
        out = cfg["out_dir"]
    else:
        out = Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)
    if args.dry_run:
        return out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise CliError(f"output directory {out} is not writable")
    return out


def _path(args_value, cfg: CliConfig | None, key: str, flag: str) -> Path:
    p = args_value if args_value is not None else (cfg[key] if cfg is not None else None)
    if p is None:
        raise ConfigError(f"missing required key: {key} (set it in the config or pass {flag})")
    p = Path(p)
    if not p.exists():
        raise CliError(f"{key}: no such file {p}")
    return p


def _check_dims(net, data: LabeledSet, what: str) -> None:
    if data.dim != net.extractor.input_dim:
        raise CliError(f"{what} has instance width {data.dim} but the checkpoint expects {net.extractor.input_dim}")
    if data.num_classes != net.num_classes:
        raise CliError(f"{what} has {data.num_classes} classes but the checkpoint has {net.num_classes}")


def _write_record(out: Path, rec, timing: bool, stem: str = "run_record") -> None:
    (out / f"{stem}.json").write_text(rec.to_json())
    rec.write_csv(out / f"{stem}_epochs.csv")
    if timing:
        _write_json(out / f"{stem}_timing.json", {"wall_clock_s": rec.wall_clock_s})


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    bench = dataclasses.replace(cfg.bench(), seed=cfg["seed"])
    out = _out_dir(args, cfg)
    if args.dry_run:
        print(f"dry run: config valid, would write 3 datasets to {out}")
        return 0
    train, pool, test = gen_shift_benchmark(bench)
    files = {"train": "train.kd3d", "pool": "pool.kd3d", "test": "test.kd3d"}
    for name, ds in zip(files, (train, pool, test)):
        save_dataset(ds, out / files[name])
    manifest = {
        "benchmark": dataclasses.asdict(bench),
        "files": files,
        "sizes": {"train": len(train), "pool": len(pool), "test": len(test)},
        "pool_provenance_counts": pool.provenance_counts(),
        "diagnostics": pool.meta.get("diagnostics", {}),
    }
    _write_json(out / "manifest.json", manifest)
    log.info("wrote %s", ", ".join(files.values()))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    data = load_dataset(_path(args.data, cfg, "train_data", "--data"))
    out = _out_dir(args, cfg)
    arch = teacher_arch(dataclasses.replace(cfg.bench(), dim=data.dim, num_classes=data.num_classes), cfg["teacher_hidden"])
    pre = cfg.pretrain()
    if args.dry_run:
        print(f"dry run: {len(data)} training instances, teacher layers {arch.layer_dims}")
        return 0
    teacher = pretrain_teacher(data, arch, pre, Rng(cfg["seed"], 10))
    save_checkpoint(teacher, out / "teacher.json")
    report = {"train_accuracy": teacher.meta["train_accuracy"]}
    if cfg["test_data"] is not None:
        test = load_dataset(_path(None, cfg, "test_data", ""))
        report["test_accuracy"] = evaluate(teacher, test)
    _write_json(out / "pretrain_report.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def _distill_inputs(args, cfg):
    teacher = load_checkpoint(_path(args.teacher, cfg, "teacher", "--teacher"))
    pool = load_dataset(_path(args.pool, cfg, "pool_data", "--pool"))
    test = load_dataset(_path(args.test, cfg, "test_data", "--test"))
    _check_dims(teacher, pool, "pool")
    _check_dims(teacher, test, "test set")
    if not teacher.classifier.frozen:
        raise CliError("teacher checkpoint has an unfrozen classifier; pretrain with this tool first")
    return teacher, pool, test


def _dump_batch(path: Path, pool: LabeledSet, train_cfg) -> None:
    x = pool.x[: train_cfg.batch_size]
    pb = perturb_batch(x, train_cfg.mix, Rng(train_cfg.seed, _S_MIX))
    d = x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "partner", "lambda", "gamma_mix", "beta_mix"]
                   + [f"x{j}" for j in range(d)] + [f"xhat{j}" for j in range(d)])
        for i in range(len(pb)):
            w.writerow([i, int(pb.partner[i])] + [repr(float(v)) for v in
                       (pb.lam[i], pb.gamma_mix[i], pb.beta_mix[i], *pb.x[i], *pb.xhat[i])])


def cmd_distill(args) -> int:
    cfg = _config(args)
    train_cfg = cfg.train()
    teacher, pool, test = _distill_inputs(args, cfg)
    out = _out_dir(args, cfg)
    if args.dry_run:
        print(f"dry run: variant {train_cfg.variant}, pool {len(pool)}, test {len(test)}, 0 epochs run")
        return 0
    if args.dump_batch:
        _dump_batch(out / "perturbed_batch.csv", pool, train_cfg)
    student, rec = run_variant(train_cfg.variant, teacher, pool, test, train_cfg, train_cfg.seed)
    _write_record(out, rec, args.timing)
    save_checkpoint(student, out / "student.json")
    print(json.dumps({"final_test_accuracy": rec.final_test_accuracy, "skipped_epochs": rec.skipped_epochs}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    train_cfg = cfg.train()
    bench = cfg.bench()
    seeds = list(args.seeds) if args.seeds else list(cfg["seeds"])
    variants = list(args.variants) if args.variants else list(cfg["variants"])
    for v in variants:
        dataclasses.replace(train_cfg, variant=v).validate()
    out = _out_dir(args, cfg)
    if args.dry_run:
        print(f"dry run: {len(variants)} variants x {len(seeds)} seeds")
        return 0
    runs = []

    def on_run(seed, variant, rec):
        last = rec.epochs[-1] if rec.epochs else None
        runs.append([seed, variant, repr(rec.final_test_accuracy),
                     repr(last.precision) if last else "", repr(last.recall) if last else "", rec.skipped_epochs])
        log.info("seed %d %s: %.4f", seed, variant, rec.final_test_accuracy)

    table = ablation_table(seeds, variants, train_cfg, bench, on_run=on_run)
    with open(out / "ablation_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "runs", "mean_accuracy", "std_accuracy", "margin_vs_full_points"])
        for row in table.rows():
            margin = repr(table.margin(row["variant"])) if "Full" in table.acc else ""
            w.writerow([row["variant"], row["runs"], repr(row["mean_accuracy"]), repr(row["std_accuracy"]), margin])
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "variant", "final_test_accuracy", "final_precision", "final_recall", "skipped_epochs"])
        w.writerows(runs)
    _write_json(out / "ablation_teachers.json", {"seeds": seeds, "teacher_test_accuracy": table.teacher_acc})
    return 0


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise CliError(f"unknown sweep parameter {args.param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    cfg = _config(args)
    cfgs = []
    for v in args.values:
        c = cfg.with_overrides(**{SWEEP_PARAMS[args.param]: v})
        c.source = f"{cfg.source} with {args.param}={v}"
        cfgs.append(c.train())
    teacher, pool, test = _distill_inputs(args, cfg)
    out = _out_dir(args, cfg)
    if args.dry_run:
        print(f"dry run: {len(cfgs)} values of {args.param}")
        return 0
    with open(out / f"sweep_{args.param}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([args.param, "final_test_accuracy", "final_precision", "final_recall", "skipped_epochs"])
        for v, tc in zip(args.values, cfgs):
            _, rec = run_variant(tc.variant, teacher, pool, test, tc, tc.seed)
            last = rec.epochs[-1] if rec.epochs else None
            w.writerow([repr(v), repr(rec.final_test_accuracy), repr(last.precision) if last else "",
                        repr(last.recall) if last else "", rec.skipped_epochs])
            fh.flush()
            log.info("%s=%r: %.4f", args.param, v, rec.final_test_accuracy)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args, require_seed=False) if args.config else None
    net = load_checkpoint(_path(args.checkpoint, cfg, "teacher", "--checkpoint"))
    data = load_dataset(_path(args.data, cfg, "test_data", "--data"))
    _check_dims(net, data, "dataset")
    if data.labels is None:
        raise CliError("dataset has no labels; cannot evaluate accuracy")
    if (data.labels < 0).any():
        raise CliError("dataset contains open-set instances (label -1); accuracy is undefined")
    if args.dry_run:
        print("dry run: checkpoint and dataset compatible")
        return 0
    print(f"accuracy {evaluate(net, data):.6f}")
    return 0


def cmd_export_features(args) -> int:
    cfg = _config(args, require_seed=False) if args.config else None
    net = load_checkpoint(_path(args.checkpoint, cfg, "teacher", "--checkpoint"))
    data = load_dataset(_path(args.data, cfg, "pool_data", "--data"))
    _check_dims(net, data, "dataset")
    out = _out_dir(args, cfg)
    if args.dry_run:
        print(f"dry run: would export {len(data)} rows")
        return 0
    d_f = net.extractor.feature_dim
    h = forward_features(net, data.x) if len(data) else np.zeros((0, d_f))
    with open(out / "features.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(d_f)] + ["label", "provenance"])
        for i in range(len(data)):
            label = "" if data.labels is None else int(data.labels[i])
            prov = "" if data.provenance is None else Provenance(int(data.provenance[i])).name
            w.writerow([repr(float(v)) for v in h[i]] + [label, prov])
    return 0


# -- parser -----------------------------------------------------------------


def _common(p: argparse.ArgumentParser, seed=True) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--out", type=Path, help=f"output directory (default: config out_dir, ${OUT_ENV}, or ./{DEFAULT_OUT})")
    if seed:
        p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--dry-run", action="store_true", help="validate inputs and exit without training")
    p.add_argument("--threads", type=int, default=1, help="worker threads for kernels and BLAS (results do not depend on it)")


def _distill_paths(p):
    p.add_argument("--teacher", type=Path, help="teacher checkpoint (JSON)")
    p.add_argument("--pool", type=Path, help="web pool dataset")
    p.add_argument("--test", type=Path, help="labeled test dataset")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kd3lab", description="desk-scale data-free distillation lab")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic shift benchmark")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain and freeze a teacher")
    _common(p)
    p.add_argument("--data", type=Path, help="labeled training dataset")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("distill", help="one distillation run")
    _common(p)
    _distill_paths(p)
    p.add_argument("--timing", action="store_true", help="also write wall-clock timing (not byte-reproducible)")
    p.add_argument("--dump-batch", action="store_true", help="write one perturbed batch as CSV")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("ablate", help="variants x seeds, regenerating benchmark and teacher per seed")
    _common(p)
    p.add_argument("--variants", nargs="+", help="variant names (default: config 'variants')")
    p.add_argument("--seeds", nargs="+", type=int, help="seed list (default: config 'seeds')")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="one distill run per parameter value")
    _common(p)
    _distill_paths(p)
    p.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)}")
    p.add_argument("--values", nargs="+", type=float, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="print test accuracy of a checkpoint")
    _common(p, seed=False)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-features", help="feature CSV for external plotting")
    _common(p, seed=False)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.set_defaults(func=cmd_export_features)
    return ap


_EXPECTED = (CliError, ConfigError, DatasetFormatError, IdxFormatError, CheckpointError,
             FrozenClassifierViolation, ValueError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.threads < 1:
            raise CliError("--threads must be >= 1")
        _accel.set_threads(args.threads)
        t0 = time.perf_counter()
        with threadpool_limits(limits=args.threads):
            rc = args.func(args)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        return rc
    except _EXPECTED as exc:
        print(f"kd3lab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
