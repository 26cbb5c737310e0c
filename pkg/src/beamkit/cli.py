"""``beamkit`` command line: gen, baseline, train, eval.

Exit codes: 0 success, 2 usage or configuration error, 3 malformed data or
checkpoint file, 4 numeric failure.  Every command accepts ``--config FILE``
holding ``key=value`` lines named after its flags; explicit flags win over
the file, which wins over the defaults.  Each command writes a run manifest
next to its main output (``<out>.run.json``).
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import scipy

from . import __version__
from .channels import (FADING_MODES, KINDS, Dataset, DatasetSpec, atomic_write, attach_labels, crc64, generate,
                       load, save)
from .errors import BeamkitError, ConfigError, FormatError, InvalidInputError
from .gnn import ArchSpec, load_params, save_params
from .sca import GRID_SCHEMES, ScaOptions, label_instances, worker_count
from .trainer import TrainConfig, check_compatible, evaluate, loss_csv, train

DEFAULTS = {
    "gen": {"gamma": 0.5, "xi": 0.5, "count": 1000, "seed": 0, "kind": "BOTH", "fading": "rayleigh"},
    "baseline": {"max_outer": 50, "tol": 1e-5, "grid_scheme": "best", "delta": 0.02},
    "train": {"scheme": "both", "strategy": "constant", "epochs": 400, "batch": 25, "lr": 1e-3,
              "lam": 10.0, "arch": "desk", "seed": 0, "sigmoid_sign": "decreasing", "eval_every": 1,
              "val_fraction": 0.1},
    "eval": {"mode": "select"},
}


class UsageError(BeamkitError):
    exit_code = 2


def _kind(value: str) -> str:
    v = value.upper()
    if v not in KINDS:
        raise argparse.ArgumentTypeError(f"kind must be one of {', '.join(k.lower() for k in KINDS)}")
    return v


def _flag(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beamkit", description="EE beamforming: datasets, baselines, GNN training")
    parser.add_argument("--version", action="version", version=f"beamkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a channel dataset")
    g.add_argument("--nt", type=int, help="transmit antennas N_T")
    g.add_argument("--k", type=int, action="append", help="user count; repeat for a various-K set")
    g.add_argument("--gamma", type=float, help="noise power per user")
    g.add_argument("--xi", type=float, help="per-user rate floor (bit/s/Hz)")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--kind", type=_kind, help="train, test or both")
    g.add_argument("--fading", choices=FADING_MODES)
    g.add_argument("--out", help="dataset path; the manifest goes to <out>.json")

    b = sub.add_parser("baseline", help="label a dataset with SCA or the grid oracle")
    b.add_argument("method", choices=("sca", "grid"))
    b.add_argument("--data")
    b.add_argument("--out", help="labels JSON")
    b.add_argument("--labeled-out", help="also write a copy of the dataset with labels attached")
    b.add_argument("--max-outer", type=int)
    b.add_argument("--tol", type=float, help="relative outer-loop tolerance (SCA)")
    b.add_argument("--grid-scheme", choices=GRID_SCHEMES)
    b.add_argument("--delta", type=float, help="grid power step")
    b.add_argument("--delta-alpha", type=float, help="grid hybrid-coefficient step (defaults to --delta)")
    b.add_argument("--workers", type=int, help="worker processes (capped by BEAMKIT_THREADS)")

    t = sub.add_parser("train", help="train the GNN (or the MLP baseline)")
    t.add_argument("--data")
    t.add_argument("--scheme", choices=("mmse", "hzm", "both"))
    t.add_argument("--heads", choices=("mmse", "hzm", "both"), help="heads to build (default: --scheme)")
    t.add_argument("--strategy", choices=("constant", "various"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda", dest="lam", type=float, help="QoS penalty factor")
    t.add_argument("--arch", choices=("desk", "full", "toy", "mlp"))
    t.add_argument("--residual", type=_flag, help="additive residual around attention layers")
    t.add_argument("--sigmoid-sign", choices=("decreasing", "standard"))
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--val-fraction", type=float)
    t.add_argument("--init", help="start from this checkpoint")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log", help="epoch log (JSON lines); default <out>.log.jsonl")
    t.add_argument("--csv", help="write the (epoch, loss) convergence curve here")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--mode", choices=("mmse", "hzm", "select"))
    e.add_argument("--labels", help="labels JSON from `baseline` (overrides labels stored in the dataset)")
    e.add_argument("--report", help="report JSON path; stdout when omitted")
    e.add_argument("--csv", help="per-sample CSV")
    e.add_argument("--timing", action="store_true", default=None,
                   help="add single-sample inference timing (100-pass warmup excluded)")

    for p in (g, b, t, e):
        p.add_argument("--config", help="key=value file mirroring the flag names")
    return parser


# configuration -------------------------------------------------------------------

def read_config(path) -> Dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def resolve(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the config file, then from the defaults."""
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    if args.config:
        aliases = {"lambda": "lam"}
        for key, raw in read_config(args.config).items():
            key = aliases.get(key, key)
            if key not in actions:
                raise ConfigError(f"unknown config key {key!r} for {args.command}")
            if getattr(args, key) is not None:
                continue
            act = actions[key]
            conv = act.type or (lambda s: s)
            try:
                if isinstance(act, argparse._AppendAction):
                    value = [conv(v.strip()) for v in raw.split(",") if v.strip()]
                elif isinstance(act, argparse._StoreTrueAction):
                    value = _flag(raw)
                else:
                    value = conv(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
            if act.choices is not None and value not in act.choices:
                raise ConfigError(f"{key} must be one of {list(act.choices)}")
            setattr(args, key, value)
    for key, value in DEFAULTS.get(args.command, {}).items():
        if getattr(args, key) is None:
            setattr(args, key, value)
    return args


def require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


# manifests -----------------------------------------------------------------------

def versions() -> dict:
    return {"beamkit": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def snapshot(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())}


def run_manifest_path(out) -> Path:
    return Path(str(out) + ".run.json")


def write_run_manifest(out, args, argv, started: float, inputs=None, outputs=None, seeds=None) -> str:
    path = run_manifest_path(out)
    manifest = {
        "command": ["beamkit", *argv],
        "config": snapshot(args),
        "seeds": seeds or {},
        "inputs": inputs or {},
        "outputs": outputs or {},
        "versions": versions(),
        "wall_time_s": time.perf_counter() - started,
    }
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n", "w")
    return path.name


def dataset_checksum(path) -> Optional[str]:
    try:
        return json.loads(Path(str(path) + ".json").read_text())["checksum"]["value"]
    except (OSError, ValueError, KeyError):
        return None


def json_dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# commands -------------------------------------------------------------------------

def cmd_gen(args, argv, started) -> int:
    require(args, "nt", "k", "count", "out")
    if len(set(args.k)) != len(args.k):
        raise UsageError("--k values must be distinct")
    spec = DatasetSpec(n_antennas=args.nt, k_users_list=tuple(args.k), gamma=args.gamma, xi=args.xi,
                       count=args.count, seed=args.seed, kind=args.kind, fading=args.fading)
    ds = generate(spec)
    ds.meta["run_manifest"] = run_manifest_path(args.out).name
    manifest = save(ds, args.out)
    write_run_manifest(args.out, args, argv, started, seeds={"dataset": spec.seed},
                       outputs={str(args.out): manifest["checksum"]["value"]})
    print(f"wrote {spec.count} samples (N_T={spec.n_antennas}, K={list(spec.k_users_list)}) to {args.out}")
    return 0


def cmd_baseline(args, argv, started) -> int:
    require(args, "data", "out")
    ds = load(args.data)
    opts = ScaOptions(max_outer=args.max_outer, rel_tol=args.tol)
    records = label_instances(args.method, ds.samples, [ds.config_for(i) for i in range(len(ds))], opts,
                              args.grid_scheme, args.delta, args.delta_alpha, args.workers)
    feasible = [r for r in records if r["feasible"]]
    labels = [r["ee"] if r["feasible"] else None for r in records]
    doc = {
        "method": args.method,
        "dataset": {"path": str(args.data), "checksum": dataset_checksum(args.data)},
        "options": {"max_outer": args.max_outer, "tol": args.tol, "grid_scheme": args.grid_scheme,
                    "delta": args.delta, "delta_alpha": args.delta_alpha},
        "labels": labels,
        "records": records,
        "run_manifest": run_manifest_path(args.out).name,
    }
    atomic_write(args.out, json_dump(doc), "w")
    outputs = {str(args.out): None}
    if args.labeled_out:
        values = np.array([np.nan if v is None else v for v in labels], dtype=np.float64)
        labeled = attach_labels(ds, values, source=f"{args.method}:{Path(args.out).name}")
        labeled.meta["run_manifest"] = run_manifest_path(args.out).name
        outputs[str(args.labeled_out)] = save(labeled, args.labeled_out)["checksum"]["value"]
    write_run_manifest(args.out, args, argv, started, inputs={str(args.data): dataset_checksum(args.data)},
                       outputs=outputs)
    iters = [r["iterations"] for r in records if "iterations" in r]
    mean_iters = f"{np.mean(iters):.2f}" if iters else "n/a"
    print(f"{args.method}: feasible {len(feasible)}/{len(records)}, mean iterations {mean_iters}, "
          f"workers {worker_count(args.workers)}")
    return 0


def read_labels(path, count: int) -> np.ndarray:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InvalidInputError(f"cannot read labels {path}: {exc}") from None
    except ValueError as exc:
        raise FormatError(f"labels file {path} is not JSON: {exc}") from None
    labels = doc.get("labels") if isinstance(doc, dict) else None
    if not isinstance(labels, list) or len(labels) != count:
        raise FormatError(f"labels file {path} must hold {count} labels")
    return np.array([np.nan if v is None else float(v) for v in labels], dtype=np.float64)


def cmd_train(args, argv, started) -> int:
    require(args, "data", "out")
    ds = load(args.data)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, lam=args.lam,
                      strategy=args.strategy, scheme=args.scheme, seed=args.seed,
                      eval_every=args.eval_every, val_fraction=args.val_fraction)
    init = None
    if args.init:
        init, _ = load_params(args.init)
        arch = init.arch
    else:
        heads = args.heads or args.scheme
        schemes = ("MMSE", "HZM") if heads == "both" else (heads.upper(),)
        k = ds.spec.k_users_list[0] if args.arch == "mlp" and not ds.spec.various else None
        arch = ArchSpec.named(args.arch, ds.spec.n_antennas, k_users=k, schemes=schemes,
                              sigmoid_sign=args.sigmoid_sign, residual=bool(args.residual))
    check_compatible(ds, cfg, arch)
    log_path = args.log or str(args.out) + ".log.jsonl"
    result = train(ds, cfg, arch, log_path=log_path, init=init)
    history = [{k: v for k, v in r.items() if k != "wall_time"} for r in result.history]
    digest = json.dumps(history, sort_keys=True)
    metadata = {
        "dataset_checksum": dataset_checksum(args.data),
        "train_k": list(ds.spec.k_users_list),
        "train_config": cfg.to_dict(),
        "epochs": cfg.epochs,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "loss_history_crc64": crc64(digest.encode()),
        "run_manifest": run_manifest_path(args.out).name,
    }
    save_params(result.params, args.out, metadata)
    outputs = {str(args.out): None, log_path: None}
    if args.csv:
        atomic_write(args.csv, loss_csv(result.history), "w")
        outputs[str(args.csv)] = None
    write_run_manifest(args.out, args, argv, started, inputs={str(args.data): dataset_checksum(args.data)},
                       outputs=outputs, seeds={"train": cfg.seed})
    last = result.history[-1]
    print(f"trained {cfg.epochs} epochs: final train loss {last['train_loss']:.6g}, "
          f"best val loss {result.best_val_loss:.6g} at epoch {result.best_epoch}; saved {args.out}")
    return 0


def cmd_eval(args, argv, started) -> int:
    require(args, "model", "data")
    params, meta = load_params(args.model)
    ds = load(args.data)
    if args.labels:
        ds = Dataset(ds.spec, ds.samples, read_labels(args.labels, len(ds)), ds.meta)
    report = evaluate(ds, params, args.mode, timing=bool(args.timing), train_k=meta.get("train_k"))
    doc = report.to_dict()
    doc["model"] = {"path": str(args.model), "train_k": meta.get("train_k")}
    doc["dataset"] = {"path": str(args.data), "checksum": dataset_checksum(args.data),
                      "labels": "file" if args.labels else ("stored" if ds.labels is not None else "none")}
    if ds.meta.get("labels_on_train_set"):
        doc["notes"].append("labels were computed on a TRAIN dataset")
    text = json_dump(doc)
    if args.report:
        doc["run_manifest"] = run_manifest_path(args.report).name
        atomic_write(args.report, json_dump(doc), "w")
        outputs = {str(args.report): None}
        if args.csv:
            atomic_write(args.csv, report.samples_csv(), "w")
            outputs[str(args.csv)] = None
        write_run_manifest(args.report, args, argv, started, inputs={str(args.data): dataset_checksum(args.data),
                                                                     str(args.model): None}, outputs=outputs)
        opt = "n/a" if report.optimality is None else f"{report.optimality:.4f}"
        print(f"feasibility {report.feasibility_rate:.4f}, optimality {opt}; report in {args.report}")
    else:
        if args.csv:
            atomic_write(args.csv, report.samples_csv(), "w")
        sys.stdout.write(text)
    return 0


COMMANDS = {"gen": cmd_gen, "baseline": cmd_baseline, "train": cmd_train, "eval": cmd_eval}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.perf_counter()
    try:
        args = resolve(parser, args)
        return COMMANDS[args.command](args, argv, started)
    except BeamkitError as exc:
        print(f"beamkit {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"beamkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError) as exc:
        print(f"beamkit {args.command}: numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
