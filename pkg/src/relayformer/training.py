"""Training loop and evaluation: warmup-then-decay learning rate schedule,
momentum SGD with weight decay, cross-entropy loss, and confusion-matrix
metrics.

The schedule has two phases: a linear warmup from ``lr_start`` to
``lr_peak`` over ``warmup_steps`` optimizer steps, then per-step
exponential decay of the peak rate by ``decay_gamma``. Both phases agree
at the boundary.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as tz
from .data import Dataset, assemble_batch, random_rotation_augment
from .model import ActionRecognizer
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the failing step."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 200
    warmup_steps: int = 700
    lr_start: float = 4e-7
    lr_peak: float = 5e-4
    decay_gamma: float = 0.9996
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment_max_angle: float = 0.3
    drop_attention_p: float = 0.0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.lr_start <= self.lr_peak:
            raise ValueError(
                f"need 0 < lr_start <= lr_peak, got {self.lr_start}, {self.lr_peak}")
        if not 0.0 < self.decay_gamma < 1.0:
            raise ValueError(f"decay_gamma must sit in (0, 1), got {self.decay_gamma}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        return self


# Published per-dataset settings: batch size, epoch budget, warmup range and
# the phase-two decay factor, keyed by the benchmark they were quoted for.
PRESETS: dict[str, TrainConfig] = {
    "ntu60": TrainConfig(batch_size=32, epochs=120, lr_start=3e-7, lr_peak=0.0006,
                         decay_gamma=0.9985),
    "ntu120": TrainConfig(batch_size=32, epochs=120, lr_start=2e-7, lr_peak=0.0008,
                          decay_gamma=0.9991),
    "uav": TrainConfig(batch_size=128, epochs=65, lr_start=1e-7, lr_peak=0.0005,
                       decay_gamma=0.9993),
}


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Learning rate at a given optimizer step (step 0 = first update)."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac
    return cfg.lr_peak * cfg.decay_gamma ** (step - cfg.warmup_steps)


class SgdOptimizer:
    """Momentum SGD with decoupled-into-gradient weight decay.

    ``velocity = momentum * velocity + grad + weight_decay * param`` then
    ``param -= lr * velocity``.
    """

    def __init__(self, params: list[Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        for p, vel in zip(self.params, self.velocities):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                grad = grad + self.weight_decay * p.data
            vel *= self.momentum
            vel += grad
            p.data -= (lr * vel).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: list[Tensor], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0,
             velocities: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """One functional update; returns the velocity state for chaining."""
    if velocities is None:
        velocities = [np.zeros_like(p.data) for p in params]
    for p, vel in zip(params, velocities):
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            grad = grad + weight_decay * p.data
        vel *= momentum
        vel += grad
        p.data -= (lr * vel).astype(p.dtype)
    return velocities


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true classes.

    Computed through log-softmax for stability; the gradient with respect
    to the logits is ``softmax(logits) - one_hot(labels)`` averaged over
    the batch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    log_probs = tz.log_softmax(logits)
    picked = tz.take(tz.reshape(log_probs, (b * k,)), labels + np.arange(b) * k, axis=0)
    return tz.neg(tz.reduce_mean(picked))


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


def write_history_csv(history: list[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc"])
        for row in history:
            writer.writerow([row.epoch, f"{row.lr:.10g}", f"{row.train_loss:.6f}",
                             f"{row.train_acc:.4f}", f"{row.val_acc:.4f}"])


def train(model: ActionRecognizer, dataset: Dataset, cfg: TrainConfig,
          quiet: bool = True) -> list[EpochStats]:
    """Seeded mini-batch training; returns per-epoch history.

    Rotation augmentation and drop attention run in training mode only.
    All randomness (shuffling, augmentation, drop attention) derives from
    ``cfg.seed``, so identical seeds produce bit-identical parameters.
    """
    cfg.validate()
    train_samples = dataset.split("train")
    has_val = bool(dataset.splits.get("val"))
    shuffle_rng = np.random.default_rng(cfg.seed)
    augment_rng = np.random.default_rng(cfg.seed + 1)
    drop_rng = np.random.default_rng(cfg.seed + 2)
    optimizer = SgdOptimizer(model.parameters(), cfg.momentum, cfg.weight_decay)
    model.config.drop_attention_p = cfg.drop_attention_p
    history: list[EpochStats] = []
    step = 0
    for epoch in range(cfg.epochs):
        model.train(True)
        order = shuffle_rng.permutation(len(train_samples))
        losses = []
        hits = 0
        for start in range(0, len(order), cfg.batch_size):
            chosen = order[start:start + cfg.batch_size]
            clips = []
            labels = []
            for i in chosen:
                sample = train_samples[int(i)]
                coords = sample.coordinates
                if cfg.augment_max_angle > 0.0 and dataset.channels == 3:
                    coords = random_rotation_augment(coords, cfg.augment_max_angle, augment_rng)
                clips.append(coords)
                labels.append(sample.label)
            batch = Tensor(assemble_batch(clips, model.config.frames))
            labels = np.asarray(labels)
            lr = lr_schedule(step, cfg)
            optimizer.zero_grad()
            logits = model.forward(batch, rng=drop_rng)
            loss = cross_entropy(logits, labels)
            if not np.isfinite(loss.data).all():
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            optimizer.step(lr)
            step += 1
            losses.append(loss.item())
            hits += int((logits.data.argmax(axis=1) == labels).sum())
        val_acc = evaluate(model, dataset, split="val").accuracy if has_val else float("nan")
        stats = EpochStats(
            epoch=epoch,
            lr=lr_schedule(step - 1, cfg) if step else cfg.lr_start,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            train_acc=hits / len(train_samples) if train_samples else float("nan"),
            val_acc=val_acc,
        )
        history.append(stats)
        if not quiet:
            print(f"epoch {epoch:4d}  lr {stats.lr:.3e}  loss {stats.train_loss:.4f}  "
                  f"train {stats.train_acc:.3f}  val {stats.val_acc:.3f}")
    return history


# -- evaluation --------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(true_labels: np.ndarray, predicted: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """Counts with true classes on rows, predictions on columns."""
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(true_labels, predicted):
        matrix[int(t), int(p)] += 1
    return matrix


def metrics_from_confusion(confusion: np.ndarray) -> Metrics:
    total = confusion.sum()
    if total == 0:
        raise ValueError("empty evaluation set")
    diag = np.diag(confusion).astype(np.float64)
    col = confusion.sum(axis=0).astype(np.float64)
    row = confusion.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(col > 0, diag / col, 0.0)
        recall = np.where(row > 0, diag / row, 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    return Metrics(
        accuracy=float(diag.sum() / total),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        confusion=confusion,
    )


def evaluate(model: ActionRecognizer, dataset: Dataset, split: str = "test",
             batch_size: int = 32) -> Metrics:
    """Deterministic eval-mode metrics over one split."""
    samples = dataset.split(split)
    was_training = model.training
    model.eval()
    predicted = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            batch = Tensor(assemble_batch([s.coordinates for s in chunk],
                                          model.config.frames))
            probs = model.predict_proba(batch)
            predicted.extend(probs.data.argmax(axis=1).tolist())
    finally:
        model.train(was_training)
    truth = np.array([s.label for s in samples])
    confusion = confusion_matrix(truth, np.array(predicted), dataset.num_classes)
    return metrics_from_confusion(confusion)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
