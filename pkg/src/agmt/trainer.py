"""Adam optimisation of the composed model, training loop and AGMT1 checkpoints."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import ClassBalancedSampler, Dataset, LabeledBatch, SamplerConfig
from .errors import CheckpointError, NumericError
from .losses import LossTerms, total_loss
from .model import Model

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AGMT1"


class Adam:
    """Adam with closed-form bias correction and per-parameter learning rates."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 lr_overrides: Optional[dict] = None, clip: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip = clip
        self.lr_overrides = dict(lr_overrides or {})
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def gradients(self) -> dict:
        """Current gradients; parameters outside the graph count as zero-gradient."""
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in self.params.items()}
        if self.clip > 0.0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip:
                grads = {name: g * (self.clip / norm) for name, g in grads.items()}
        return grads

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in self.gradients().items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            lr = self.lr_overrides.get(name, self.lr)
            self.params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class StepRecord:
    step: int
    total: float
    metric: float
    diversity: float
    l2: float

    def to_line(self) -> str:
        return (f"step={self.step} total={self.total!r} metric={self.metric!r} "
                f"diversity={self.diversity!r} l2={self.l2!r}")


def _first_non_finite(named: dict) -> Optional[str]:
    for name, value in named.items():
        arr = value.data if isinstance(value, T.Tensor) else value
        if arr is not None and not np.all(np.isfinite(arr)):
            return name
    return None


def compute_loss(model: Model, batch: LabeledBatch, config: TrainConfig) -> tuple:
    """Forward pass and combined objective. Returns (terms, named intermediates)."""
    emb, attn = model.forward(batch.images)
    terms = total_loss(
        emb, batch.labels, config.metric_params(),
        eta=model.eta,
        diversity=config.diversity_params(),
        lambda1=config.loss.lambda1,
        lambda2=config.loss.lambda2,
        weights=model.decay_weights(),
    )
    named = {"embeddings": emb}
    if attn is not None:
        named["attention"] = attn
    named.update({"loss.metric": terms.metric, "loss.diversity": terms.diversity,
                  "loss.l2": terms.l2, "loss.total": terms.total})
    return terms, named


def train_step(model: Model, batch: LabeledBatch, optimizer: Adam, config: TrainConfig) -> LossTerms:
    """One forward/backward/update. Returns the loss terms measured before the update."""
    bad = _first_non_finite(model.named_parameters())
    if bad:
        raise NumericError(f"non-finite parameter before step: {bad}")
    optimizer.zero_grad()
    # overflow surfaces through the explicit checks below, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        terms, named = compute_loss(model, batch, config)
        bad = _first_non_finite(named)
        if bad:
            raise NumericError(f"non-finite value in forward pass: first at {bad}")
        T.backward(terms.total)
    bad = _first_non_finite({f"grad[{n}]": p.grad for n, p in model.named_parameters().items()})
    if bad:
        raise NumericError(f"non-finite gradient: {bad}")
    optimizer.step()
    return terms


class Trainer:
    """Model, optimiser and sampler for one run. State is fully determined by
    (config, train set, step)."""

    def __init__(self, config: TrainConfig, train_set: Dataset):
        self.config = config
        self.train_set = train_set
        self.model = Model(config.model_config(), config.metric_params(), config.train.seed)
        overrides = {"loss.eta": config.loss.lr_eta} if self.model.eta is not None else {}
        self.optimizer = Adam(
            self.model.named_parameters(), config.train.lr,
            betas=(config.train.adam_beta1, config.train.adam_beta2),
            eps=config.train.adam_eps, lr_overrides=overrides, clip=config.train.clip,
        )
        sampler_cfg = SamplerConfig(config.train.classes_per_batch, config.train.samples_per_class, config.train.seed)
        self.sampler = ClassBalancedSampler(train_set, sampler_cfg, augment=config.data.augment)
        self.history: list = []

    @property
    def step(self) -> int:
        return self.sampler.step

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.train_set) // self.sampler.config.batch_size)

    def train_step(self, batch: Optional[LabeledBatch] = None) -> StepRecord:
        step = self.sampler.step
        if batch is None:
            batch = self.sampler.next_batch()
        terms = train_step(self.model, batch, self.optimizer, self.config)
        rec = StepRecord(step, terms.total.item(), terms.metric.item(), terms.diversity.item(), terms.l2.item())
        self.history.append(rec)
        return rec

    def run(self, epochs: Optional[int] = None, on_step: Optional[Callable] = None,
            on_epoch: Optional[Callable] = None) -> list:
        """Train until ``epochs`` full epochs have elapsed (counting resumed steps)."""
        epochs = self.config.train.epochs if epochs is None else epochs
        target = epochs * self.steps_per_epoch
        while self.step < target:
            rec = self.train_step()
            if on_step:
                on_step(rec)
            if self.step % self.steps_per_epoch == 0 and on_epoch:
                on_epoch(self.step // self.steps_per_epoch)
        return self.history

    # checkpoint plumbing
    def state_records(self) -> dict:
        records = {name: p.data for name, p in self.model.named_parameters().items()}
        for name in self.optimizer.m:
            records[f"adam.m/{name}"] = self.optimizer.m[name]
            records[f"adam.v/{name}"] = self.optimizer.v[name]
        records["adam.step"] = np.array(float(self.optimizer.t))
        records["sampler.step"] = np.array(float(self.sampler.step))
        return records

    def load_records(self, records: dict) -> None:
        expected = self.state_records()
        missing = [n for n in expected if n not in records]
        if missing:
            raise CheckpointError(f"checkpoint lacks record {missing[0]!r}")
        extra = [n for n in records if n not in expected]
        if extra:
            raise CheckpointError(f"checkpoint has unexpected record {extra[0]!r} for this config")
        for name, arr in expected.items():
            if records[name].shape != arr.shape:
                raise CheckpointError(
                    f"record {name!r} has shape {records[name].shape}, config expects {arr.shape}")
        params = self.model.named_parameters()
        for name, p in params.items():
            p.data[...] = records[name]
            self.optimizer.m[name][...] = records[f"adam.m/{name}"]
            self.optimizer.v[name][...] = records[f"adam.v/{name}"]
        self.optimizer.t = int(records["adam.step"])
        self.sampler.step = int(records["sampler.step"])

    def save(self, path) -> None:
        save_checkpoint(self.state_records(), path)

    def load(self, path) -> None:
        self.load_records(load_checkpoint(path))


def restore_model(model: Model, records: dict) -> None:
    """Copy parameter records into ``model``; optimizer records are ignored."""
    for name, p in model.named_parameters().items():
        if name not in records:
            raise CheckpointError(f"checkpoint lacks record {name!r}")
        if records[name].shape != p.shape:
            raise CheckpointError(f"record {name!r} has shape {records[name].shape}, config expects {p.shape}")
        p.data[...] = records[name]


# ---------------------------------------------------------------------------
# AGMT1 format: magic, u64 record count, then per record
#   u32 name length, utf-8 name, u32 ndim, ndim x u64 extents, float64 LE data
# ---------------------------------------------------------------------------

def encode_checkpoint(records: dict) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<Q", len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> dict:
    if buf[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:len(CHECKPOINT_MAGIC)]!r}")
    pos = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<Q", take(8))
    records = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: undecodable record name") from exc
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        records[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes")
    return records


def save_checkpoint(records: dict, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(records))
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    return decode_checkpoint(buf, str(path))
