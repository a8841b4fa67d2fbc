"""Adam training loop with checkpoints, a metrics log and resume."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..autodiff import Tape
from ..errors import ConfigError, NumericError
from ..heads import HeadConfig, VariationalHead, load_head, make_head, save_head
from ..io import config_hash, read_csv, write_csv, append_csv
from .datasets import Batch, ToyDataset, make_dataset
from .losses import controlled_vfm_loss, vfm_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss", "grad_norm", "seconds")
CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.csv"


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    head: HeadConfig = field(default_factory=HeadConfig)
    dataset: dict = field(default_factory=lambda: {"kind": "gauss_mixture_2d"})
    conditioned: bool = False
    eval_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    categorical_weight: float = 1.0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if isinstance(self.head, dict):
            self.head = HeadConfig.from_dict(self.head)
        for name in ("steps", "batch_size", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if "kind" not in self.dataset:
            raise ConfigError("dataset spec needs a 'kind'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head"] = self.head.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / self.steps))
        return self.lr


def resolve_head_config(config: TrainConfig, dataset: ToyDataset) -> HeadConfig:
    """Head config with the label settings implied by the dataset."""
    d = config.head.to_dict()
    d["conditioned"] = config.conditioned
    if config.conditioned:
        if dataset.prop is None:
            raise ConfigError(f"dataset {dataset.kind!r} has no labels; cannot train a conditioned head")
        if dataset.prop.name == "component_index":
            d["label_kind"] = "categorical"
            d["n_label_classes"] = len(dataset.prop.params["centers"])
        else:
            d["label_kind"] = "continuous"
    return HeadConfig.from_dict(d)


def build(config: TrainConfig) -> tuple[ToyDataset, VariationalHead]:
    ds = make_dataset(config.dataset)
    return ds, make_head(ds.space, resolve_head_config(config, ds), config.seed)


def loss_fn(head: VariationalHead):
    return controlled_vfm_loss if head.config.conditioned else vfm_loss


def eval_loss(head: VariationalHead, dataset: ToyDataset, n: int = 4096, seed: int = 12345,
              y_override=None, categorical_weight: float = 1.0) -> float:
    """Loss on a fixed batch and fixed times, so that different heads are compared on identical draws."""
    batch = dataset.sample(n, np.random.default_rng([seed, 1]))
    if y_override is not None:
        batch = Batch(batch.x0, batch.x1, np.full(n, float(y_override)))
    rng = np.random.default_rng([seed, 2])
    return float(loss_fn(head)(head, batch, rng, categorical_weight=categorical_weight).value)


@dataclass
class TrainResult:
    head: VariationalHead
    rows: list
    steps_done: int
    checkpoint: Optional[Path] = None


def _rngs(seed: int):
    return np.random.default_rng([seed, 101]), np.random.default_rng([seed, 202])


def _save(head, path, config, step, data_rng, time_rng):
    save_head(head, path, {"train_config": config.to_dict(), "config_hash": config_hash(config.to_dict()),
                           "train_step": step, "rng_data": data_rng.bit_generator.state,
                           "rng_time": time_rng.bit_generator.state})


def train(config: TrainConfig, out_dir=None, resume: bool = False) -> TrainResult:
    """Run Adam on the VFM (or controlled VFM) loss.

    With ``out_dir`` a checkpoint is written every ``eval_every`` steps and
    metrics rows are appended to ``metrics.csv``. Each row averages loss and
    gradient norm over the steps since the previous row. A non-finite loss
    stops the run with the last good parameters saved.
    """
    dataset, head = build(config)
    data_rng, time_rng = _rngs(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / CHECKPOINT_NAME if out else None
    metrics = out / METRICS_NAME if out else None
    start = 0
    rows: list = []
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if resume and ckpt is not None and ckpt.exists():
        head, meta = load_head(ckpt)
        if meta.get("config_hash") != config_hash(config.to_dict()):
            raise ConfigError("checkpoint was written by a different train config")
        start = int(meta["train_step"])
        data_rng.bit_generator.state = meta["rng_data"]
        time_rng.bit_generator.state = meta["rng_time"]
        if metrics.exists():
            rows = [{"step": int(r["step"]), "loss": float(r["loss"]), "grad_norm": float(r["grad_norm"]),
                     "seconds": float(r["seconds"])} for r in read_csv(metrics) if int(r["step"]) <= start]
        write_csv(metrics, METRICS_HEADER, [[r[k] for k in METRICS_HEADER] for r in rows])
        log.info("resuming at step %d", start)
    elif metrics is not None:
        write_csv(metrics, METRICS_HEADER, [])

    objective = loss_fn(head)
    params = head.params
    t0 = time.perf_counter()
    acc_loss = acc_grad = 0.0
    acc_n = 0
    for step in range(start + 1, config.steps + 1):
        batch = dataset.sample(config.batch_size, data_rng)
        leaves = params.leaves()
        try:
            with Tape() as tape:
                loss = objective(head, batch, time_rng, params=leaves, categorical_weight=config.categorical_weight)
                if not np.isfinite(loss.value):
                    raise NumericError(f"non-finite loss at step {step}", index=step)
                tape.backward(loss)
        except NumericError as exc:
            if ckpt is not None:
                _save(head, ckpt, config, step - 1, data_rng, time_rng)
            raise NumericError(f"training aborted at step {step}: {exc}", index=step) from exc
        params.collect(leaves)
        gnorm = params.grad_norm()
        params.adam_step(config.lr_at(step - 1), config.beta1, config.beta2, config.eps_adam)
        acc_loss += float(loss.value)
        acc_grad += gnorm
        acc_n += 1
        if step % config.eval_every == 0 or step == config.steps:
            row = {"step": step, "loss": acc_loss / acc_n, "grad_norm": acc_grad / acc_n,
                   "seconds": time.perf_counter() - t0}
            rows.append(row)
            acc_loss = acc_grad = 0.0
            acc_n = 0
            log.info("step %d loss %.5f grad %.3f", step, row["loss"], row["grad_norm"])
            if out:
                append_csv(metrics, METRICS_HEADER, [[row[k] for k in METRICS_HEADER]])
                _save(head, ckpt, config, step, data_rng, time_rng)
    return TrainResult(head, rows, config.steps, ckpt)
