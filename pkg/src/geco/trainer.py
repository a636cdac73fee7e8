"""Action normalisation, minibatching and the training loop for both heads."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from .baseline import rf_loss_and_grads
from .errors import ConfigError, DivergenceError
from .field import geco_loss_and_grads
from .net import AdamHyper, FieldParams, NetworkSpec, OptimizerState, adam_step, init_network, save_checkpoint
from .rng import make_rng
from .schedule import DecaySchedule
from .tasks import Dataset

HEADS = ("geco", "rectified_flow")


@dataclass(frozen=True)
class Normalizer:
    shift: np.ndarray
    scale: np.ndarray

    def normalize(self, chunk):
        return (np.asarray(chunk, dtype=np.float64) - self.shift) / self.scale

    def denormalize(self, chunk):
        return np.asarray(chunk, dtype=np.float64) * self.scale + self.shift

    def to_dict(self) -> dict:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["shift"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))


def fit_normalizer(chunks) -> Normalizer:
    """Per-dimension mean shift and max-deviation scale, so data lands in [-1, 1]."""
    chunks = chunks.chunks if isinstance(chunks, Dataset) else np.asarray(chunks, dtype=np.float64)
    chunks = np.atleast_2d(chunks)
    if chunks.shape[0] == 0:
        raise ValueError("cannot fit a normalizer to an empty dataset")
    shift = chunks.mean(axis=0)
    scale = np.abs(chunks - shift).max(axis=0)
    scale[scale == 0] = 1.0
    return Normalizer(shift, scale)


def make_batches(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index arrays drawn with replacement."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if not 1 <= batch_size:
        raise ValueError("batch_size must be >= 1")
    while True:
        yield rng.integers(0, n, size=batch_size)


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    seed: int = 0
    head: str = "geco"
    hidden_dims: tuple[int, ...] = (256, 256, 256)
    activation: str = "tanh"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: DecaySchedule = field(default_factory=DecaySchedule)
    log_every: int = 100

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    @property
    def hyper(self) -> AdamHyper:
        return AdamHyper(self.lr, self.beta1, self.beta2, self.eps)

    def network_spec(self, chunk_dim: int, cond_dim: int) -> NetworkSpec:
        extra = 1 if self.head == "rectified_flow" else 0
        return NetworkSpec(chunk_dim + cond_dim + extra, chunk_dim, self.hidden_dims, self.activation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["decay"] = {"scale": self.decay.scale, "onset": self.decay.onset}
        return d


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def add(self, step: int, loss: float, wall: float):
        self.records.append({"step": step, "loss": loss, "wall_time": wall})

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass
class TrainResult:
    params: FieldParams
    normalizer: Normalizer
    log: TrainingLog
    metadata: dict

    def checkpoint(self) -> bytes:
        return save_checkpoint(self.params, metadata=self.metadata)


class TrainingDiverged(DivergenceError):
    def __init__(self, step: int, last_good: FieldParams, log: TrainingLog):
        super().__init__(f"training diverged at step {step}")
        self.step = step
        self.last_good = last_good
        self.log = log


def loss_and_grads(config: TrainConfig, params, conditions, chunks, rng):
    if config.head == "geco":
        return geco_loss_and_grads(params, conditions, chunks, config.decay, rng)
    return rf_loss_and_grads(params, conditions, chunks, rng)


def train(config: TrainConfig, dataset: Dataset, extra_metadata: Optional[dict] = None) -> TrainResult:
    """Run ``config.steps`` Adam updates on normalised chunks.

    The log holds the mean minibatch loss over each ``log_every`` window
    (step 0 holds the loss of the untouched initial network).
    """
    normalizer = fit_normalizer(dataset)
    chunks = normalizer.normalize(dataset.chunks)
    conds = dataset.conditions
    spec = config.network_spec(dataset.chunk_dim, dataset.cond_dim)
    params = init_network(spec, config.seed)
    state = OptimizerState.for_params(params, config.hyper)
    batches = make_batches(dataset, config.batch_size, make_rng(config.seed, "data"))
    noise = make_rng(config.seed, "noise")
    log = TrainingLog()
    t0 = time.perf_counter()
    window: list[float] = []
    for step in range(config.steps):
        idx = next(batches)
        try:
            loss, grads = loss_and_grads(config, params, conds[idx], chunks[idx], noise)
            new_params, state = adam_step(params, grads, state)
        except DivergenceError:
            raise TrainingDiverged(step, params, log) from None
        if step == 0:
            log.add(0, loss, time.perf_counter() - t0)
        params = new_params
        window.append(loss)
        if (step + 1) % config.log_every == 0:
            log.add(step + 1, float(np.mean(window)), time.perf_counter() - t0)
            window = []
    metadata = {
        "head": config.head,
        "train_config": config.to_dict(),
        "normalizer": normalizer.to_dict(),
        "chunk_dim": dataset.chunk_dim,
        "cond_dim": dataset.cond_dim,
        "steps_done": config.steps,
    }
    if dataset.spec is not None:
        metadata["task"] = dataset.spec.to_dict()
    metadata.update(extra_metadata or {})
    return TrainResult(params, normalizer, log, metadata)
