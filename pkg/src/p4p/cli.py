"""Command-line surface binding the library into reproducible runs.

Exit codes: 0 success, 2 malformed config/flags/input files, 3 runtime
failure (non-finite activations, incompatible checkpoints, failed
verification gates). Every command accepts --seed and --config; a config
file supplies defaults that explicit flags override.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .errors import (ArchiveError, ConfigError, IncompatibleCheckpointError,
                     NanActivationError, PointFileError, ShapeError)

CONFIG_ERRORS = (ConfigError, PointFileError, FileNotFoundError,
                 IsADirectoryError, json.JSONDecodeError)


def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    with open(args.config) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _pick(args, cfg: dict, key: str, default):
    """Flag if given, else config value, else default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    return cfg.get(key, default)


# ---------------------------------------------------------------- commands

def _cmd_gen_data(args) -> int:
    from .data import (SyntheticTaskSpec, gen_parts4, gen_patches2d,
                       gen_shapes8, write_points)

    cfg = _load_config(args)
    family = _pick(args, cfg, "family", "shapes8")
    n_train = _pick(args, cfg, "train", 8)
    n_val = _pick(args, cfg, "val", 4)
    points = _pick(args, cfg, "points", 128)
    noise = _pick(args, cfg, "noise", 0.01)
    fmt = _pick(args, cfg, "fmt", "xyz")
    out = Path(_pick(args, cfg, "out", "data"))
    seed = args.seed or 0
    spec = SyntheticTaskSpec(family, n_train=n_train, n_val=n_val,
                             points=points, noise=noise, seed=seed)
    out.mkdir(parents=True, exist_ok=True)

    if family == "patches2d":
        tx, ty, vx, vy = gen_patches2d(spec)
        np.savez(out / "patches2d.npz", train_x=tx, train_y=ty,
                 val_x=vx, val_y=vy)
        print(f"wrote {out / 'patches2d.npz'}: {len(ty)} train, {len(vy)} val")
        return 0

    gen = gen_shapes8 if family == "shapes8" else gen_parts4
    index = {"family": family, "seed": seed, "samples": []}
    for split, clouds in zip(("train", "val"), gen(spec)):
        for i, cloud in enumerate(clouds):
            name = f"{split}_{i:03d}.{fmt}"
            write_points(cloud, out / name, fmt=fmt)
            label = cloud.labels
            entry = {"file": name, "split": split}
            if np.isscalar(label):
                entry["label"] = int(label)
            else:
                entry["labels"] = np.asarray(label).tolist()
            index["samples"].append(entry)
    with open(out / "index.json", "w") as f:
        json.dump(index, f, indent=1)
    print(f"wrote {len(index['samples'])} clouds to {out} (index.json)")
    return 0


def _experiment_config(args, cfg: dict) -> dict:
    """Overlay CLI flags onto a run_experiment config document."""
    cfg = dict(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg["epochs"] = args.epochs
    if getattr(args, "init", None):
        cfg["init"] = args.init
    if getattr(args, "freeze_backbone", False):
        cfg["freeze_backbone"] = True
    model = dict(cfg.get("model", {}))
    if getattr(args, "tokenizer_mode", None):
        model["input_mode"] = args.tokenizer_mode
    if getattr(args, "no_globals", False):
        model["no_globals"] = True
    if getattr(args, "no_pos", False):
        model["pos_mode"] = "none"
    if model:
        cfg["model"] = model
    return cfg


def _cmd_train(args) -> int:
    from .training import run_experiment

    cfg = _experiment_config(args, _load_config(args))
    workdir = Path(args.workdir or "run")
    summary = run_experiment(cfg, workdir, resume=args.resume)
    if "transfer" in summary:
        print(f"transfer: {summary['transfer']}")
    print(f"best metric {summary['best_metric']:.4f} at epoch "
          f"{summary['best_epoch']}; log at {summary['log']}")
    return 0


def _cmd_pretrain_toy(args) -> int:
    from .training import run_experiment
    from .transfer import load_archive, save_archive

    cfg = _load_config(args)
    config = {
        "task": "patches2d",
        "seed": args.seed if args.seed is not None else cfg.get("seed", 0),
        "epochs": _pick(args, cfg, "epochs", 3),
        "batch_size": _pick(args, cfg, "batch_size", 16),
        "data": cfg.get("data", {"train": 256, "val": 64}),
        "model": cfg.get("model", {"dim": 64, "depth": 2, "heads": 4,
                                   "patch": 4, "norm": "layer"}),
        "train": cfg.get("train", {"lr": 1e-3, "weight_decay": 1e-2,
                                   "label_smoothing": 0.1}),
    }
    workdir = Path(args.workdir or "pretrain")
    summary = run_experiment(config, workdir)
    arrays, meta = load_archive(workdir / "best")
    out = Path(args.out or (workdir / "image_backbone"))
    save_archive(arrays, out, meta=meta)
    print(f"best val OA {summary['best_metric']:.2f} at epoch "
          f"{summary['best_epoch']}; checkpoint at {out}.manifest.json")
    return 0


def _rebuild_from_meta(meta: dict, seed: int):
    from .pipeline import build_model, make_model_config

    if "model" not in meta:
        raise ConfigError("checkpoint meta lacks a model section; pass --config")
    cfg = make_model_config(**meta["model"])
    return build_model(cfg, seed=seed)


def _cmd_eval(args) -> int:
    from .pipeline import build_model, install_state, make_model_config
    from .training import _build_from_config, evaluate, validate_config
    from .transfer import load_archive

    arrays, meta = load_archive(args.ckpt)
    cfg = _load_config(args)
    if cfg:
        if args.seed is not None:
            cfg["seed"] = args.seed
        plan = validate_config({**cfg, "epochs": 0})
        train, val, model_cfg = _build_from_config(plan)
        model = build_model(model_cfg, seed=plan["seed"])
    else:
        if "plan" not in meta or "model" not in meta:
            raise ConfigError(
                "checkpoint meta lacks the experiment plan; pass --config")
        plan = validate_config({**meta["plan"], "epochs": 0})
        if args.seed is not None:
            plan["seed"] = args.seed
        train, val, _ = _build_from_config(plan)
        model = build_model(make_model_config(**meta["model"]),
                            seed=plan["seed"])
    weights = {n: a for n, a in arrays.items() if not n.startswith("opt.")}
    install_state(model, weights)
    samples = train if args.split == "train" else val
    metrics, loss = evaluate(model, samples, plan["train"]["label_smoothing"])
    print(json.dumps({"split": args.split, **metrics, "loss": loss}))
    return 0


def _cmd_transfer(args) -> int:
    from .pipeline import build_model, make_model_config
    from .training import validate_config
    from .transfer import TransferPolicy, load_archive, transfer_image_weights

    arrays, _ = load_archive(args.ckpt)
    cfg = _load_config(args)
    model_kw = cfg.get("model", cfg) if cfg else {}
    task = model_kw.pop("task", "cls") if isinstance(model_kw, dict) else "cls"
    model_cfg = make_model_config(task=task, **model_kw)
    model = build_model(model_cfg, seed=args.seed or 0)
    policy = TransferPolicy(transfer_cls=not args.no_cls,
                            freeze_backbone=args.freeze_backbone,
                            strict=args.strict)
    ckpt = {n: a for n, a in arrays.items() if not n.startswith("opt.")}
    report = transfer_image_weights(ckpt, model.params, policy)
    for field in ("matched", "skipped", "mismatched", "missing"):
        for name in getattr(report, field):
            print(f"{field:10s} {name}")
    print(report.summary())
    return 0


def _cmd_gradcheck(args) -> int:
    from .verification import FD_TOLERANCE, run_gradient_suites

    precision = args.precision or "f64"
    n_seeds = args.seeds or 3
    base = args.seed or 0
    started = time.perf_counter()
    results = run_gradient_suites(range(base, base + n_seeds), precision)
    tolerance = FD_TOLERANCE[precision]
    failed = []
    for name, result in results.items():
        status = "ok" if result.max_rel_error < tolerance else "FAIL"
        print(f"{name:12s} max rel err {result.max_rel_error:.3e} "
              f"({result.worst_tensor})  {status}")
        if status == "FAIL":
            failed.append(name)
    print(f"{len(results)} suites x {n_seeds} seeds in "
          f"{time.perf_counter() - started:.1f}s, tolerance {tolerance:g}")
    if failed:
        print(f"runtime failure: gradient suites failed: {failed}", file=sys.stderr)
        return 3
    return 0


def _cmd_bench(args) -> int:
    from .geometry import PointCloud, farthest_point_sample, knn_query
    from .geometry_reference import fps_reference, knn_reference

    n = args.n or 512
    k = args.k or 16
    centers = max(1, n // 8)
    rng = np.random.default_rng(args.seed or 0)
    pts = rng.normal(size=(n, 3))
    queries = pts[:centers]

    def clock(fn, repeat=3):
        best = np.inf
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        return best * 1e3

    rows = [
        ("fps", clock(lambda: farthest_point_sample(pts, centers)),
         clock(lambda: fps_reference(pts, centers))),
        ("knn", clock(lambda: knn_query(pts, queries, k)),
         clock(lambda: knn_reference(pts, queries, k))),
    ]
    print(f"n={n} centers={centers} k={k} (best of 3, ms)")
    print(f"{'kernel':8s} {'vectorized':>12s} {'brute force':>12s} {'speedup':>9s}")
    for name, fast, slow in rows:
        print(f"{name:8s} {fast:12.2f} {slow:12.2f} {slow / fast:8.1f}x")
    return 0


def _cmd_inspect_ckpt(args) -> int:
    from .transfer import load_archive

    arrays, meta = load_archive(args.ckpt)
    print(f"{'name':40s} {'dtype':5s} {'shape':16s} {'bytes':>10s}")
    total = 0
    for name, arr in arrays.items():
        kind = "f32" if arr.dtype == np.float32 else "f64"
        total += arr.nbytes
        print(f"{name:40s} {kind:5s} {str(list(arr.shape)):16s} {arr.nbytes:>10d}")
    print(f"{len(arrays)} tensors, {total} bytes")
    if meta:
        print(f"meta: {json.dumps(meta)[:200]}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p4p",
        description="point-cloud transformer toolkit: train, transfer, verify")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=str, default=None,
                       help="JSON file supplying defaults for flags")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", _cmd_gen_data, "write a synthetic dataset to disk")
    p.add_argument("--family", choices=("shapes8", "parts4", "patches2d"))
    p.add_argument("--train", type=int)
    p.add_argument("--val", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--fmt", choices=("xyz", "bin"))
    p.add_argument("--out", type=str)

    p = add("train", _cmd_train, "run a finetuning experiment from a config")
    p.add_argument("--workdir", type=str)
    p.add_argument("--epochs", type=int)
    p.add_argument("--init", type=str, help="checkpoint prefix to transfer from")
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--tokenizer-mode", choices=("relative", "abs_pos", "abs_feat"))
    p.add_argument("--no-globals", action="store_true")
    p.add_argument("--no-pos", action="store_true")
    p.add_argument("--resume", action="store_true")

    p = add("pretrain-toy", _cmd_pretrain_toy,
            "train the encoder on synthetic images and save a checkpoint")
    p.add_argument("--workdir", type=str)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", type=str)

    p = add("eval", _cmd_eval, "evaluate a checkpoint and print metrics")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")

    p = add("transfer", _cmd_transfer, "install image weights and print the report")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--no-cls", action="store_true")
    p.add_argument("--freeze-backbone", action="store_true")

    p = add("gradcheck", _cmd_gradcheck, "finite-difference gradient gate")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--seeds", type=int, help="number of seeds per suite")

    p = add("bench", _cmd_bench, "time geometry kernels against brute force")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)

    p = add("inspect-ckpt", _cmd_inspect_ckpt, "dump a checkpoint manifest table")
    p.add_argument("--ckpt", type=str, required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except IncompatibleCheckpointError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except ArchiveError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NanActivationError, ShapeError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
