"""Adam optimisation, the epoch loop, evaluation and throughput measurement."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import data as D
from . import metrics as M
from .errors import ConfigError, ContractError, NumericError
from .losses import LossSpec, compute_loss
from .models import forward, predict_mask
from .tensor import Tensor, no_grad

RUNLOG_FIELDS = ("epoch", "train_loss", "val_iou", "val_f1", "val_precision", "val_recall", "val_accuracy")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 12
    epochs: int = 1000
    loss: str = "combine1"
    seed: int = 0
    eval_every: int = 1
    threshold: float = 0.5

    def __post_init__(self):
        problems = []
        if not self.lr > 0:
            problems.append("lr must be positive")
        if self.weight_decay < 0:
            problems.append("weight_decay must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("betas must lie in [0, 1)")
        if not self.eps > 0:
            problems.append("eps must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            problems.append("batch_size and eval_every must be positive, epochs nonnegative")
        if not 0 < self.threshold < 1:
            problems.append("threshold must lie in (0, 1)")
        if problems:
            raise ConfigError("invalid training config: " + "; ".join(problems))
        LossSpec.named(self.loss)

    @property
    def loss_spec(self):
        return LossSpec.named(self.loss)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- optimiser ---------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, state, config):
    """One Adam update over ``(name, tensor)`` pairs, using each tensor's ``grad``.

    Weight decay enters as an L2 term added to the gradient before the moment
    updates. All gradients are checked before anything is modified.
    """
    grads = []
    for name, p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name}")
        grads.append(g)
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for (name, p), g in zip(params, grads):
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype)
    return state


# -- run log -----------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val: M.MetricReport | None
    seconds: float

    def csv_row(self):
        row = [str(self.epoch), f"{self.train_loss:.6f}"]
        if self.val is None:
            return row + [""] * 5
        v = self.val
        return row + [f"{x:.6f}" for x in (v.iou, v.f1, v.precision, v.recall, v.accuracy)]


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    model: object = None

    def __len__(self):
        return len(self.records)

    @property
    def losses(self):
        return [r.train_loss for r in self.records]

    @property
    def val_ious(self):
        return [r.val.iou for r in self.records if r.val is not None]

    def csv_rows(self):
        return [list(RUNLOG_FIELDS)] + [r.csv_row() for r in self.records]

    def timing_rows(self):
        return [["epoch", "seconds"]] + [[str(r.epoch), f"{r.seconds:.6f}"] for r in self.records]


# -- loop --------------------------------------------------------------

def stack(samples):
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]).astype(np.float32))


def train_epoch(model, samples, config, state, epoch):
    """One pass over ``samples`` in the ``(seed, epoch)`` batch order; returns the mean loss."""
    by_id = {s.id: s for s in samples}
    params = model.named_parameters()
    spec = config.loss_spec
    total, count = 0.0, 0
    for b, ids in enumerate(D.batches(sorted(by_id), config.batch_size, config.seed, epoch)):
        images, masks = stack([by_id[i] for i in ids])
        loss = compute_loss(forward(model, Tensor(images)), masks, spec)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
        for _, p in params:
            p.grad = None
        loss.backward()
        adam_step(params, state, config)
        total += value * len(ids)
        count += len(ids)
    return total / max(count, 1)


def train(model, train_samples, val_samples, config, callback=None):
    """Train for ``config.epochs`` epochs, evaluating every ``eval_every`` epochs.

    ``callback(record)`` runs after each epoch. Epoch indices start at 1.
    """
    log = RunLog(model=model)
    state = AdamState()
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        loss = train_epoch(model, train_samples, config, state, epoch)
        report = None
        if val_samples and epoch % config.eval_every == 0:
            report = evaluate(model, val_samples, config.threshold, config.batch_size).micro
        record = EpochRecord(epoch, loss, report, time.perf_counter() - start)
        log.records.append(record)
        if callback is not None:
            callback(record)
    return log


@dataclass
class Evaluation:
    micro: M.MetricReport
    macro: M.MetricReport
    per_image: list  # (id, MetricReport)

    @property
    def per_image_iou(self):
        return [(i, r.iou) for i, r in self.per_image]


def predict_batches(model, samples, threshold=0.5, batch_size=12):
    """Yield ``(sample, predicted mask)`` in input order."""
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images, _ = stack(chunk)
            masks = predict_mask(forward(model, Tensor(images)), threshold)
            yield from zip(chunk, masks)


def evaluate(model, samples, threshold=0.5, batch_size=12):
    """Pooled (micro) and per-image averaged (macro) metrics plus per-image reports."""
    if not samples:
        raise ContractError("evaluation needs at least one sample")
    per_image = []
    for sample, pred in predict_batches(model, samples, threshold, batch_size):
        per_image.append((sample.id, M.MetricReport.from_counts(M.confusion_counts(pred, sample.mask))))
    pooled = M.ConfusionCounts()
    for _, r in per_image:
        pooled = pooled + r.counts
    return Evaluation(M.MetricReport.from_counts(pooled), M.MetricReport.macro([r for _, r in per_image]), per_image)


def measure_throughput(model, samples, batch_size=12, warmup=1):
    """Forward-only images per second; the first ``warmup`` batches are not timed."""
    if not samples:
        raise ContractError("throughput needs at least one sample")
    images, _ = stack(samples)
    with no_grad():
        for _ in range(warmup):
            forward(model, Tensor(images[:batch_size]))
        start = time.perf_counter()
        for i in range(0, len(images), batch_size):
            forward(model, Tensor(images[i:i + batch_size]))
        elapsed = time.perf_counter() - start
    return len(images) / elapsed
