"""Experiment driver: build, partition, train, evaluate, checkpoint.

Randomness comes from one ``SeedSequence(cfg.seed)`` split into independent
streams for initialisation, training-batch order, partition batches and the
random partition, so changing one component never perturbs another.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint, partition
from . import tensor as T
from .config import CifarData, ExperimentConfig, IdxData, SyntheticData, parse_config
from .data import BatchIterator, Dataset, load_cifar_binary, load_idx, synthetic_moe_task, train_test_split
from .models import Network, build_network
from .nn import TemperaturePlan, temperature_at
from .optim import SGD, LrSchedule, lr_at

DIVERGENCE_LIMIT = 1e4
CHECKPOINT_NAME = "checkpoint.padck"


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, step: int, loss: float, last_good: Path | None):
        where = f"; last good checkpoint kept at {last_good}" if last_good else ""
        super().__init__(f"loss {loss} at epoch {epoch}, step {step}{where}")
        self.epoch, self.step, self.loss, self.last_good = epoch, step, loss, last_good


@dataclass
class Streams:
    init: np.random.Generator
    shuffle_seed: int
    partition_seed: int
    random_partition: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> Streams:
        init, shuffle, part, rand = np.random.SeedSequence(seed).spawn(4)
        return cls(np.random.default_rng(init), int(shuffle.generate_state(1)[0]),
                   int(part.generate_state(1)[0]), np.random.default_rng(rand))


@dataclass
class StepInfo:
    epoch: int
    step: int
    loss: float
    lr: float
    tau: float
    model: Network


@dataclass
class TrainResult:
    config: ExperimentConfig
    model: Network
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    partition: partition.PartitionResult | None = None
    files: list[Path] = field(default_factory=list)


# -- data ------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _load_cached(key: str) -> tuple[Dataset, Dataset]:
    spec = json.loads(key)
    kind = spec["kind"]
    if kind == "idx":
        d = IdxData(**spec)
        train = load_idx(d.train_images, d.train_labels, subset=d.train_subset)
        test = load_idx(d.test_images, d.test_labels, stats=(train.mean, train.std), subset=d.test_subset)
    elif kind == "cifar":
        d = CifarData(**spec)
        train = load_cifar_binary(d.train_files, subset=d.train_subset, seed=d.subset_seed)
        test = load_cifar_binary(d.test_files, stats=(train.mean, train.std), subset=d.test_subset,
                                 seed=d.subset_seed)
    else:
        d = SyntheticData(**spec)
        full = synthetic_moe_task(d.seed, d.dim, d.classes, d.train_size + d.test_size, d.noise,
                                  d.clusters_per_class)
        train, test = train_test_split(full, d.test_size)
    for ds in (train, test):
        ds.inputs.setflags(write=False)
        ds.labels.setflags(write=False)
    return train, test


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train and test splits; normalisation statistics come from the train split."""
    train, test = _load_cached(json.dumps(cfg.data.model_dump(mode="json"), sort_keys=True))
    if train.sample_shape != tuple(cfg.model.input_shape):
        raise ValueError(f"data samples are {list(train.sample_shape)} but model.input_shape is "
                         f"{cfg.model.input_shape}")
    if train.num_classes > cfg.model.num_classes:
        raise ValueError(f"data has {train.num_classes} classes, model only {cfg.model.num_classes}")
    return train, test


# -- evaluation ------------------------------------------------------------------

def evaluate(model: Network, dataset: Dataset, tau: float = 1.0, batch_size: int = 500) -> dict[str, float]:
    """Top-1 accuracy and mean cross-entropy over the whole split; no state changes."""
    correct, loss_sum = 0, 0.0
    with T.no_grad():
        for i in range(0, len(dataset), batch_size):
            x = dataset.inputs[i:i + batch_size]
            y = dataset.labels[i:i + batch_size]
            logits = model(x, tau)
            loss_sum += float(T.cross_entropy(logits, y, reduction="sum").data)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    return {"accuracy": correct / len(dataset), "loss": loss_sum / len(dataset)}


# -- checkpointing ---------------------------------------------------------------

def save_checkpoint(path, model: Network, cfg: ExperimentConfig, extra: dict | None = None) -> Path:
    meta = {"config": cfg.model_dump(mode="json"), "layout": model.layout(), **(extra or {})}
    checkpoint.save(path, model.state_dict(), meta)
    return Path(path)


def load_checkpoint(path, cfg: ExperimentConfig | None = None) -> tuple[Network, ExperimentConfig, dict]:
    """Rebuild the model a checkpoint was written from and restore its state.

    With ``cfg`` given, the checkpoint must match that config's model shapes.
    """
    state, meta = checkpoint.load(path)
    if cfg is None:
        cfg = parse_config(meta["config"])
    model = build_network(cfg.model, cfg.method, np.random.default_rng(0), cfg.pad)
    model.load_state(state, meta.get("layout", {}))
    return model, cfg, meta


# -- training --------------------------------------------------------------------

def _optim_params(model: Network, partitioned: bool) -> dict:
    # scale factors stay fixed until a partition exists for them to balance
    return {n: p for n, p in model.named_parameters() if partitioned or ".scales." not in n}


def _lambda_values(model: Network) -> dict[str, list[float]]:
    return {name: list(layer.lambdas()) for name, layer in model.pad_layers()}


def _ratios(model: Network) -> dict[str, float]:
    return {name: layer.mask.dynamic_ratio for name, layer in model.pad_layers()}


def train(cfg: ExperimentConfig, out_dir=None, callback: Callable[[StepInfo], None] | None = None,
          data: tuple[Dataset, Dataset] | None = None) -> TrainResult:
    """Run one experiment; with ``out_dir`` writes report.csv, summary.json,
    partition.jsonl and the checkpoint."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = data if data is not None else load_data(cfg)
    streams = Streams.from_seed(cfg.seed)
    model = build_network(cfg.model, cfg.method, streams.init, cfg.pad)
    result = TrainResult(cfg, model)
    plan = TemperaturePlan(cfg.temperature.start, cfg.temperature.end, cfg.temperature.anneal_epochs)
    oc = cfg.optim
    batches = BatchIterator(train_ds, oc.batch_size, streams.shuffle_seed)
    total = max(1, cfg.epochs * len(batches))
    sched = LrSchedule(oc.lr, int(round(oc.warmup_frac * total)), total)
    pad_on = cfg.pad_active
    partitioned = not pad_on
    opt = SGD(_optim_params(model, partitioned), oc.lr, oc.momentum, oc.weight_decay,
              no_decay={n for n, _ in model.named_parameters() if ".scales." in n})
    ckpt = out / CHECKPOINT_NAME if out is not None else None
    last_good = None
    step = 0
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        tau = temperature_at(plan, epoch)
        if not partitioned and epoch == cfg.pad.partition_epoch:
            result.partition = _partition(cfg, model, train_ds, streams,
                                          cfg.pad.partition_tau or tau)
            partitioned = True
            opt.rebind(_optim_params(model, True))
        loss_sum, seen = 0.0, 0
        for x, y in batches.batches(epoch):
            lr = lr_at(sched, step)
            opt.zero_grad()
            loss = T.cross_entropy(model(x, tau), y)
            value = float(loss.data)
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise TrainingDiverged(epoch, step, value, last_good)
            loss.backward()
            opt.step(lr)
            step += 1
            loss_sum += value * len(y)
            seen += len(y)
            if callback is not None:
                callback(StepInfo(epoch, step, value, lr, tau, model))
        row = {"epoch": epoch + 1, "train_loss": loss_sum / seen, "tau": tau}
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            ev = evaluate(model, test_ds, tau)
            row.update(test_accuracy=ev["accuracy"], test_loss=ev["loss"])
        else:
            row.update(test_accuracy=math.nan, test_loss=math.nan)
        row["dynamic_ratios"] = _ratios(model)
        row["lambdas"] = _lambda_values(model)
        row["wall_clock_s"] = time.perf_counter() - started
        result.rows.append(row)
        if ckpt is not None:
            last_good = save_checkpoint(ckpt, model, cfg, {"epoch": epoch + 1})
    compaction = []
    if pad_on and partitioned and cfg.pad.compact and cfg.epochs > 0:
        compaction = [layer.compact(name).__dict__ for name, layer in model.pad_layers()]
    final_tau = temperature_at(plan, max(cfg.epochs - 1, 0))
    final = evaluate(model, test_ds, final_tau)
    result.summary = _summary(cfg, model, result, final, compaction)
    if out is not None:
        result.files += _write_outputs(out, cfg, model, result)
    return result


def _partition(cfg: ExperimentConfig, model: Network, train_ds: Dataset, streams: Streams,
               tau: float) -> partition.PartitionResult:
    p = cfg.pad
    stream = BatchIterator(train_ds, cfg.optim.batch_size, streams.partition_seed).stream()
    return partition.run_method(p.method, model, stream, p.kappa, p.effective_steps, p.batches,
                                p.budget, tau, streams.random_partition)


def _summary(cfg, model, result, final, compaction) -> dict:
    """Everything except timing, so reruns compare bitwise."""
    return {
        "name": cfg.name,
        "method": cfg.method,
        "seed": cfg.seed,
        "kappa": cfg.pad.kappa if cfg.pad_active else None,
        "epochs": cfg.epochs,
        "test_accuracy": final["accuracy"],
        "test_loss": final["loss"],
        "train_loss": [r["train_loss"] for r in result.rows],
        "epoch_test_accuracy": [r["test_accuracy"] for r in result.rows],
        "dynamic_ratios": _ratios(model),
        "lambdas": _lambda_values(model),
        "stored_scalars": checkpoint.scalar_count(model.state_dict()),
        "compaction": compaction,
    }


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_json(path, obj) -> Path:
    Path(path).write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")
    return Path(path)


def _write_outputs(out: Path, cfg, model, result: TrainResult) -> list[Path]:
    files = [write_report_csv(out / "report.csv", result.rows), write_json(out / "summary.json", result.summary)]
    files.append(save_checkpoint(out / CHECKPOINT_NAME, model, cfg, {"epoch": cfg.epochs}))
    if result.partition is not None:
        result.partition.write_jsonl(out / "partition.jsonl")
        files.append(out / "partition.jsonl")
    return files


def write_report_csv(path, rows: list[dict]) -> Path:
    fields = ["epoch", "train_loss", "test_accuracy", "test_loss", "tau", "dynamic_ratios", "lambdas",
              "wall_clock_s"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "dynamic_ratios": json.dumps(r["dynamic_ratios"], sort_keys=True),
                        "lambdas": json.dumps(r["lambdas"], sort_keys=True)})
    return Path(path)


# -- multi-seed ------------------------------------------------------------------

def aggregate(values: list[float]) -> dict[str, float]:
    """Mean and sample standard deviation (``ddof=1``; 0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}


def run_seeds(cfg: ExperimentConfig, seeds: list[int], out_dir=None) -> dict:
    """Independent runs differing only in seed; reports mean +- sample std."""
    runs = []
    for s in seeds:
        sub = cfg.model_copy(update={"seed": s})
        res = train(sub, Path(out_dir) / f"seed-{s}" if out_dir is not None else None)
        runs.append(res.summary)
    return {"runs": runs, "test_accuracy": aggregate([r["test_accuracy"] for r in runs])}
