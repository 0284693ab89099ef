"""End-to-end gradient verification harness.

Builds a small float64 network, evaluates the classification loss on a
synthetic batch, and compares every parameter's reverse-mode gradient
against the central finite-difference oracle, reporting the worst
relative error per parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import assemble_batch, synth_dataset
from .model import ActionRecognizer, ModelConfig, build_model, tiny_config
from .tensor import Tensor, finite_difference_gradient, max_relative_error
from .training import cross_entropy


@dataclass
class GradCheckEntry:
    name: str
    size: int
    max_rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    threshold: float

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.threshold

    def offenders(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_error > self.threshold]


def gradcheck_batch(config: ModelConfig, seed: int, batch_size: int = 2):
    """Deterministic float64 batch and labels matching a model config."""
    data = synth_dataset(config.num_classes, 1 + (batch_size - 1) // config.num_classes,
                         config.num_joints, config.frames, seed=seed)
    clips = [s.coordinates for s in data.samples[:batch_size]]
    labels = np.array([s.label for s in data.samples[:batch_size]])
    batch = assemble_batch(clips, config.frames).astype(np.float64)
    return batch, labels


def run_gradient_check(
    config: ModelConfig | None = None,
    seed: int = 0,
    eps: float = 1e-4,
    threshold: float = 1e-3,
    batch_size: int = 2,
) -> GradCheckReport:
    """Compare reverse-mode and finite-difference gradients parameter by
    parameter on a training-mode forward (batch statistics active)."""
    config = config or tiny_config()
    model = build_model(config, seed=seed, dtype=np.float64)
    model.train(True)
    # nudge every parameter off special points (the classifier output layer
    # starts at zero, which would structurally zero most gradient paths and
    # make the comparison vacuous)
    nudge = np.random.default_rng(seed + 1)
    for _, param in model.named_parameters():
        param.data += nudge.normal(0.0, 0.05, param.shape)
    batch_data, labels = gradcheck_batch(config, seed)

    def loss_value(*_ignored) -> Tensor:
        return cross_entropy(model.forward(Tensor(batch_data)), labels)

    model.zero_grad()
    loss_value().backward()
    entries = []
    for name, param in model.named_parameters():
        auto = param.grad if param.grad is not None else np.zeros_like(param.data)
        (fd,) = finite_difference_gradient(loss_value, [param], eps=eps)
        entries.append(GradCheckEntry(
            name=name, size=param.size,
            max_rel_error=max_relative_error(auto, fd),
        ))
    return GradCheckReport(entries=entries, threshold=threshold)
