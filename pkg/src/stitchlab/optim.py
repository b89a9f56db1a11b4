"""Optimizer settings and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch


@dataclass
class Hyperparams:
    """Optimizer settings shared by zoo and stitch training.

    Defaults are those used for vanilla stitches: momentum SGD, lr 0.01,
    momentum 0.9, weight decay 0.01, batch 256, four epochs, cosine decay
    after a linear warmup.
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.01
    batch_size: int = 256
    epochs: int = 4
    warmup_fraction: float = 0.05
    seed: int = 0
    augment: str = "crop_flip"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive; momentum and weight decay non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 0.5:
            raise ValueError("warmup_fraction must lie in [0, 0.5]")

    @classmethod
    def vanilla(cls, **kw) -> "Hyperparams":
        return cls(**kw)

    @classmethod
    def similarity(cls, **kw) -> "Hyperparams":
        return cls(**{"epochs": 30, **kw})

    def replace(self, **kw) -> "Hyperparams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def lr_at(step: int, total_steps: int, hp: Hyperparams) -> float:
    """Linear warmup from 0 to ``hp.learning_rate``, then half-cosine decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    lr = hp.learning_rate
    warmup = round(hp.warmup_fraction * total_steps)
    if step < warmup:
        return lr * step / warmup
    return lr * (1.0 + math.cos(math.pi * (step - warmup) / (total_steps - warmup))) / 2.0


def sgd_for(params, hp: Hyperparams) -> torch.optim.SGD:
    """Momentum SGD; weight decay only on tensors with more than one dimension (conv/linear weights)."""
    params = [p for p in params if p.requires_grad]
    decay = [p for p in params if p.ndim > 1]
    no_decay = [p for p in params if p.ndim <= 1]
    groups = [{"params": decay, "weight_decay": hp.weight_decay}]
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return torch.optim.SGD(groups, lr=hp.learning_rate, momentum=hp.momentum)
