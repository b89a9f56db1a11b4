"""Stitch optimization: task-trained (vanilla) and similarity-trained stitches."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetSplit
from .optim import Hyperparams, lr_at, sgd_for
from .stitching import Stitch, StitchedNetwork, assemble
from .zoo import ModelHandle, TrainingError, evaluate

log = logging.getLogger(__name__)

__all__ = [
    "Hyperparams", "lr_at", "TrainReport", "FrozenInvariantError", "TrainingError",
    "train_stitch_task", "train_stitch_similarity", "finite_difference_check", "FDResult",
]


class FrozenInvariantError(AssertionError):
    """Sender or receiver state changed during stitch training."""


@dataclass
class TrainReport:
    regime: str
    hyperparams: dict
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    steps: int = 0
    stitch_digest: str = ""
    frozen_digest: str = ""

    @property
    def final_accuracy(self) -> float:
        return self.epoch_accuracy[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _param_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for p in module.state_dict().values():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _check_frozen(net: StitchedNetwork) -> None:
    if net.current_digest() != net.frozen_digest:
        raise FrozenInvariantError("frozen sender/receiver state changed during stitch training")


def _drop_last(split: DatasetSplit, hp: Hyperparams) -> bool:
    return split.size >= hp.batch_size


def _fit(net: StitchedNetwork, train: DatasetSplit, hp: Hyperparams,
         loss_fn: Callable, on_epoch: Callable[[int], float], regime: str) -> TrainReport:
    device = net.sender.device
    opt = sgd_for(net.trainable_parameters(), hp)
    drop = _drop_last(train, hp)
    total = train.num_batches(hp.batch_size, drop) * hp.epochs
    report = TrainReport(regime, hp.to_dict(), frozen_digest=net.frozen_digest)
    start = time.time()
    step = 0
    for epoch in range(hp.epochs):
        net.train()
        running, seen = 0.0, 0
        for b in train.batches(hp.batch_size, seed=hp.seed, epoch=epoch, augment=hp.augment, drop_last=drop):
            for g in opt.param_groups:
                g["lr"] = lr_at(step, total, hp)
            b = b.to(device)
            loss = loss_fn(b)
            if not torch.isfinite(loss):
                raise TrainingError(f"{regime} stitch: non-finite loss {loss.item()}", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running += loss.item() * len(b)
            seen += len(b)
            step += 1
        net.eval()
        report.epoch_loss.append(running / seen)
        report.epoch_accuracy.append(on_epoch(epoch))
        log.debug("%s epoch %d loss %.5f acc %.4f", regime, epoch, report.epoch_loss[-1], report.epoch_accuracy[-1])
    report.steps = step
    report.wall_clock = time.time() - start
    report.stitch_digest = _param_digest(net.stitch)
    _check_frozen(net)
    return report


def train_stitch_task(net: StitchedNetwork, train: DatasetSplit, test: DatasetSplit,
                      hp: Hyperparams) -> tuple[StitchedNetwork, TrainReport]:
    """Train only the stitch by cross-entropy through the frozen receiver suffix.

    ``report.final_accuracy`` is the stitched network's test accuracy, which is
    the similarity value for this layer pair.

    Raises:
        TrainingError: non-finite loss.
        FrozenInvariantError: sender or receiver state changed.
    """
    report = _fit(
        net, train, hp,
        loss_fn=lambda b: F.cross_entropy(net(b.images), b.labels),
        on_epoch=lambda epoch: evaluate(net, test),
        regime="vanilla",
    )
    return net, report


def train_stitch_similarity(sender: ModelHandle, i: int, receiver: ModelHandle, j: int,
                            stitch: Stitch, train: DatasetSplit, hp: Hyperparams,
                            test: DatasetSplit | None = None) -> tuple[Stitch, TrainReport]:
    """Train ``stitch`` to minimize the mean squared error between its output and ``receiver.prefix(j)``.

    The loss averages over batch and tensor elements. Per-epoch accuracy is
    the task accuracy of the resulting stitched network on ``test`` (or on
    ``train`` without augmentation if no test split is given).
    """
    net = assemble(sender, i, receiver, j, stitch)

    def loss_fn(b):
        with torch.no_grad():
            target = net.expected(b.images)
        return F.mse_loss(net.provided(b.images), target)

    eval_split = test if test is not None else train
    report = _fit(net, train, hp, loss_fn, lambda epoch: evaluate(net, eval_split), regime="similarity")
    return net.stitch, report


@torch.no_grad()
def similarity_loss(net: StitchedNetwork, split: DatasetSplit, batch_size: int = 500) -> float:
    """Mean squared error between provided and expected representations over a split."""
    net.eval()
    total, count = 0.0, 0
    for b in split.batches(batch_size):
        b = b.to(net.sender.device)
        d = net.provided(b.images) - net.expected(b.images)
        total += float(d.double().pow(2).sum())
        count += d.numel()
    return total / count


@dataclass
class FDResult:
    passed: bool
    max_relative_error: float
    checked: int

    def __bool__(self) -> bool:
        return self.passed


def autograd_gradients(stitch: Stitch, activation: torch.Tensor, loss: Callable) -> list[torch.Tensor]:
    params = list(stitch.parameters())
    out = loss(stitch(activation))
    return list(torch.autograd.grad(out, params))


def finite_difference_check(stitch: Stitch, activation: torch.Tensor, tolerance: float = 1e-4, *,
                            dtype: torch.dtype = torch.float64, eps: float | None = None,
                            max_entries: int = 2000, seed: int = 0,
                            gradient_fn: Callable | None = None) -> FDResult:
    """Compare analytic stitch gradients against central differences.

    The scalar loss is a fixed random linear functional of the stitch output
    plus half its squared norm, so gradients are generically non-zero. The
    stitch is copied to ``dtype`` first; the original is left untouched.
    ``gradient_fn(stitch, activation, loss)`` replaces autograd, which lets
    a deliberately wrong gradient be checked.
    """
    s = copy.deepcopy(stitch).to(dtype=dtype, device="cpu")
    x = activation.detach().to(dtype=dtype, device="cpu")
    if eps is None:
        eps = 1e-4 if dtype == torch.float64 else 5e-2
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        probe = torch.randn(s(x).shape, generator=g, dtype=torch.float64)

    def loss(y):
        y = y.double()
        return (y * probe).sum() + 0.5 * (y * y).sum()

    grads = (gradient_fn or autograd_gradients)(s, x, loss)
    params = list(s.parameters())
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    flat_ids = np.arange(total)
    if total > max_entries:
        flat_ids = np.sort(np.random.default_rng(seed).choice(total, max_entries, replace=False))
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    with torch.no_grad():
        for fid in flat_ids:
            k = int(np.searchsorted(offsets, fid, side="right") - 1)
            p, local = params[k].view(-1), int(fid - offsets[k])
            orig = p[local].item()
            p[local] = orig + eps
            up = loss(s(x)).item()
            p[local] = orig - eps
            down = loss(s(x)).item()
            p[local] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[k].reshape(-1)[local].item()
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return FDResult(worst < tolerance, worst, len(flat_ids))
