"""Unsupervised training on the penalty loss and the evaluation metrics."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .channels import Dataset, atomic_write
from .core import RATE_TOL
from .errors import ConfigError, InvalidInputError, TrainingAbort
from .gnn import MODES, ArchSpec, Batch, GnnModel, GnnParams, SchemeOutcome, forward, select_scheme

STRATEGIES = ("constant", "various")
TRAIN_SCHEMES = ("MMSE", "HZM", "both")


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 25
    lr: float = 1e-3
    lam: float = 10.0
    strategy: str = "constant"
    scheme: str = "both"
    seed: int = 0
    eval_every: int = 1
    val_fraction: float = 0.1

    def __post_init__(self):
        self.scheme = self.scheme.upper() if self.scheme.lower() != "both" else "both"
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch size and eval_every must be positive")
        if not self.lr > 0 or not self.lam >= 0:
            raise ConfigError("learning rate must be positive and the penalty factor nonnegative")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.scheme not in TRAIN_SCHEMES:
            raise ConfigError(f"scheme must be one of {TRAIN_SCHEMES}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")

    @property
    def schemes(self) -> tuple:
        return ("MMSE", "HZM") if self.scheme == "both" else (self.scheme,)

    def to_dict(self) -> dict:
        return asdict(self)


def check_compatible(ds: Dataset, cfg: TrainConfig, arch: ArchSpec):
    if cfg.strategy == "various" and not ds.spec.various:
        raise ConfigError("the various strategy needs a dataset with several user counts")
    if cfg.strategy == "constant" and ds.spec.various:
        raise ConfigError("the constant strategy needs a single-K dataset")
    if ds.spec.kind == "TEST":
        raise ConfigError("cannot train on a TEST-only dataset")
    missing = [s for s in cfg.schemes if s not in arch.schemes]
    if missing:
        raise ConfigError(f"architecture has no head for {missing}")
    if ds.spec.n_antennas != arch.n_antennas:
        raise ConfigError(f"dataset N_T={ds.spec.n_antennas} but architecture expects {arch.n_antennas}")
    if arch.kind == "mlp" and ds.spec.k_users_list != (arch.k_users,):
        raise ConfigError("the MLP variant trains on a single user count equal to its input size")


# batching ------------------------------------------------------------------------

def split_indices(ds: Dataset, val_fraction: float, seed: int):
    """Seeded train/validation split of sample indices (validation gets ``ceil`` of the share)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    order = rng.permutation(len(ds))
    n_val = max(1, int(math.ceil(val_fraction * len(ds))))
    if n_val >= len(ds):
        raise InvalidInputError("dataset too small to hold out a validation split")
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def group_by_k(ds: Dataset, indices) -> Dict[int, np.ndarray]:
    ks = np.array([ds.samples[i].k_users for i in indices])
    indices = np.asarray(indices)
    return {k: indices[ks == k] for k in ds.spec.k_users_list if np.any(ks == k)}


def batch_schedule(ds: Dataset, indices, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """One epoch of K-homogeneous batches, cycling through the user counts in spec order.

    Each group is shuffled and cut into batches; batches are then taken one per
    user count in turn until every group is exhausted.
    """
    groups = group_by_k(ds, indices)
    queues = []
    for k in ds.spec.k_users_list:
        if k not in groups:
            continue
        members = groups[k][rng.permutation(len(groups[k]))]
        queues.append([members[s:s + batch_size] for s in range(0, len(members), batch_size)])
    out = []
    while any(queues):
        for q in queues:
            if q:
                out.append(q.pop(0))
    return out


def make_batch(ds: Dataset, indices) -> Batch:
    return Batch.from_samples([ds.samples[i] for i in indices], [ds.config_for(i) for i in indices])


# training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: GnnParams
    history: List[dict]
    best_epoch: int
    best_val_loss: float
    initial_val_loss: float
    batch_log: List[dict] = field(default_factory=list, repr=False)
    final_params: Optional[GnnParams] = field(default=None, repr=False)


def dataset_loss(model: GnnModel, ds: Dataset, indices, lam: float, schemes, batch_size: int = 256) -> float:
    """Sample-weighted mean loss in inference mode (running batch-norm statistics)."""
    total, n = 0.0, 0
    for k, members in group_by_k(ds, indices).items():
        for s in range(0, len(members), batch_size):
            chunk = members[s:s + batch_size]
            loss = model.loss(make_batch(ds, chunk), lam, schemes, training=False)
            total += float(loss.data) * len(chunk)
            n += len(chunk)
    return total / n


def _first_bad_sample(model: GnnModel, batch: Batch, lam: float, schemes) -> int:
    branches = model.branches(batch, schemes, training=False)
    for i in range(len(batch)):
        vals = [br.penalty_loss(batch.floors, lam).data[i] for br in branches.values()]
        if not all(np.isfinite(vals)):
            return i
    return 0


def format_log_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train(ds: Dataset, cfg: TrainConfig, arch: ArchSpec, log_path=None,
          progress: Optional[Callable[[dict], None]] = None, init: Optional[GnnParams] = None) -> TrainResult:
    """Train with Adam; the returned parameters are those of the best validation epoch."""
    check_compatible(ds, cfg, arch)
    train_idx, val_idx = split_indices(ds, cfg.val_fraction, cfg.seed)
    params = init.copy() if init is not None else GnnParams.init(arch, cfg.seed)
    model = GnnModel(params)
    opt = ad.Adam(params.parameters(), lr=cfg.lr)
    schemes = cfg.schemes
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))

    initial_val = dataset_loss(model, ds, val_idx, cfg.lam, schemes)
    best = (initial_val, 0, params.copy())
    history, batch_log, lines = [], [], []
    start = time.perf_counter()
    batch_index = 0
    for epoch in range(1, cfg.epochs + 1):
        weighted, seen = 0.0, 0
        for members in batch_schedule(ds, train_idx, cfg.batch_size, shuffle_rng):
            batch = make_batch(ds, members)
            with ad.Tape() as tape:
                loss = model.loss(batch, cfg.lam, schemes, training=True)
            if not np.isfinite(loss.data):
                local = _first_bad_sample(model, batch, cfg.lam, schemes)
                raise TrainingAbort(f"non-finite loss at epoch {epoch}, batch {batch_index}",
                                    batch_index=batch_index, sample_index=int(members[local]),
                                    last_good=best[2])
            grads = ad.backward(tape, loss, params.parameters())
            try:
                opt.step(grads, batch_index)
            except TrainingAbort as exc:
                exc.last_good = best[2]
                raise
            batch_log.append({"epoch": epoch, "batch": batch_index, "k_users": batch.k_users,
                              "size": len(members)})
            weighted += float(loss.data) * len(members)
            seen += len(members)
            batch_index += 1
        record = {"epoch": epoch, "train_loss": weighted / seen}
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            val = dataset_loss(model, ds, val_idx, cfg.lam, schemes)
            record["val_loss"] = val
            if val < best[0]:
                best = (val, epoch, params.copy())
        else:
            record["val_loss"] = None
        record["wall_time"] = time.perf_counter() - start
        history.append(record)
        if log_path is not None:
            lines.append(format_log_line(record))
            atomic_write(log_path, "\n".join(lines) + "\n", mode="w")
        if progress is not None:
            progress(record)
    return TrainResult(best[2], history, best[1], best[0], initial_val, batch_log, params)


def loss_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_loss"])
    for r in history:
        writer.writerow([r["epoch"], repr(r["train_loss"]), "" if r["val_loss"] is None else repr(r["val_loss"])])
    return buf.getvalue()


def strip_timing(records: Sequence[dict]) -> List[dict]:
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


# evaluation ----------------------------------------------------------------------

@dataclass
class EvalReport:
    n_samples: int
    mode: str
    feasibility_rate: float
    optimality: Optional[float]
    scalability: Optional[float]
    mean_ee: float
    per_scheme: Dict[str, dict]
    selected_histogram: Dict[str, int]
    per_sample: List[dict] = field(default_factory=list, repr=False)
    timing: Optional[dict] = None
    notes: List[str] = field(default_factory=list)

    def to_dict(self, include_samples: bool = False) -> dict:
        d = {
            "n_samples": self.n_samples,
            "mode": self.mode,
            "feasibility_rate": self.feasibility_rate,
            "optimality": self.optimality,
            "scalability": self.scalability,
            "mean_ee": self.mean_ee,
            "per_scheme": self.per_scheme,
            "selected_histogram": self.selected_histogram,
            "notes": list(self.notes),
        }
        if self.timing is not None:
            d["timing"] = self.timing
        if include_samples:
            d["per_sample"] = self.per_sample
        return d

    def samples_csv(self) -> str:
        buf = io.StringIO()
        cols = ["index", "k_users", "selected", "ee", "feasible", "label", "ratio"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.per_sample:
            writer.writerow({c: row.get(c) for c in cols})
        return buf.getvalue()


def _ratio_stats(ee: np.ndarray, feasible: np.ndarray, labels: Optional[np.ndarray]):
    if labels is None:
        return None, np.full(ee.shape, np.nan)
    usable = feasible & np.isfinite(labels) & (labels > 0)
    ratios = np.full(ee.shape, np.nan)
    ratios[usable] = ee[usable] / labels[usable]
    if not np.any(usable):
        return None, ratios
    return float(np.mean(ratios[usable])), ratios


def summarize(ee, feasible, selected, labels, k_users, mode: str = "select",
              per_scheme: Optional[Dict[str, dict]] = None, off_distribution: bool = False) -> EvalReport:
    """Metrics from per-sample outcomes; ratio metrics become ``None`` without labels."""
    ee = np.asarray(ee, dtype=np.float64)
    feasible = np.asarray(feasible, dtype=bool)
    labels = None if labels is None else np.asarray(labels, dtype=np.float64)
    optimality, ratios = _ratio_stats(ee, feasible, labels)
    notes = []
    if labels is None:
        notes.append("no labels: optimality unavailable")
    elif optimality is None:
        notes.append("no feasible labelled sample: optimality undefined")
    rows = []
    for i in range(len(ee)):
        rows.append({
            "index": i, "k_users": int(k_users[i]), "selected": selected[i], "ee": float(ee[i]),
            "feasible": bool(feasible[i]),
            "label": None if labels is None or not np.isfinite(labels[i]) else float(labels[i]),
            "ratio": None if not np.isfinite(ratios[i]) else float(ratios[i]),
        })
    return EvalReport(
        n_samples=len(ee), mode=mode,
        feasibility_rate=float(np.mean(feasible)) if len(ee) else 0.0,
        optimality=None if off_distribution else optimality,
        scalability=optimality if off_distribution else None,
        mean_ee=float(np.mean(ee)) if len(ee) else 0.0,
        per_scheme=per_scheme or {}, selected_histogram=dict(sorted(Counter(selected).items())),
        per_sample=rows, notes=notes)


def time_inference(ds: Dataset, params: GnnParams, mode: str, warmup: int = 100, repeats: int = 1) -> dict:
    """Single-sample forward latency; the first ``warmup`` passes are discarded."""
    n = len(ds)
    for j in range(min(warmup, n * repeats) if warmup else 0):
        forward(ds.samples[j % n], ds.config_for(j % n), params, mode)
    times = []
    for _ in range(repeats):
        for i in range(n):
            t0 = time.perf_counter()
            forward(ds.samples[i], ds.config_for(i), params, mode)
            times.append(time.perf_counter() - t0)
    return {"mean_s": statistics.fmean(times), "median_s": statistics.median(times),
            "samples": len(times), "warmup": warmup}


def evaluate(ds: Dataset, params: GnnParams, mode: str = "select", timing: bool = False,
             train_k: Optional[Sequence[int]] = None, batch_size: int = 256,
             rate_tol: float = RATE_TOL) -> EvalReport:
    """Run the model over ``ds`` and report feasibility, EE ratios against labels and timing.

    ``train_k`` (the user counts seen in training) decides whether ratios are
    reported as optimality (in-distribution) or scalability.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {tuple(MODES)}")
    schemes = MODES[mode]
    model = GnnModel(params)
    n = len(ds)
    per = {s: {"ee": np.zeros(n), "feasible": np.zeros(n, dtype=bool)} for s in schemes}
    for k, members in group_by_k(ds, range(n)).items():
        for s in range(0, len(members), batch_size):
            chunk = members[s:s + batch_size]
            batch = make_batch(ds, chunk)
            for name, br in model.branches(batch, schemes, training=False).items():
                per[name]["ee"][chunk] = br.ee.data
                per[name]["feasible"][chunk] = br.feasible(batch.floors, rate_tol)
    selected, ee, feasible = [], np.zeros(n), np.zeros(n, dtype=bool)
    for i in range(n):
        outcomes = {s: SchemeOutcome(s, float(per[s]["ee"][i]), bool(per[s]["feasible"][i])) for s in schemes}
        name, ok = select_scheme(outcomes.get("MMSE"), outcomes.get("HZM"))
        selected.append(name)
        ee[i], feasible[i] = per[name]["ee"][i], ok
    labels = ds.labels
    breakdown = {}
    for s in schemes:
        opt, _ = _ratio_stats(per[s]["ee"], per[s]["feasible"], labels)
        breakdown[s] = {"feasibility_rate": float(np.mean(per[s]["feasible"])) if n else 0.0,
                        "ratio": opt, "mean_ee": float(np.mean(per[s]["ee"])) if n else 0.0}
    ks = [c.k_users for c in ds.samples]
    off = train_k is not None and any(k not in set(train_k) for k in ks)
    report = summarize(ee, feasible, selected, labels, ks, mode, breakdown, off)
    if timing:
        report.timing = time_inference(ds, params, mode)
    return report
