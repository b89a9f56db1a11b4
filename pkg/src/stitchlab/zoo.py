"""The Small ResNet family: construction, slicing, training and persistence.

An architecture is a 4-tuple of residual blocks per stage, each entry 1 or 2,
so the family has 16 members from ``R1111`` (ResNet10) to ``R2222``
(ResNet18). Stitch point 0 is the stem output; point ``k`` is the output of
the ``k``-th residual block.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import math
import time
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetSplit, normalization_constants
from .optim import Hyperparams, lr_at, sgd_for

log = logging.getLogger(__name__)

STAGE_CHANNELS = (64, 128, 256, 512)
STAGE_SIZES = (32, 16, 8, 4)
INPUT_SHAPE = (3, 32, 32)
NUM_CLASSES = 10

#: Pseudo stitch index denoting the raw network input (used for image generation).
INPUT_INDEX = -1

CHECKPOINT_SCHEMA = 1


class ShapeError(ValueError):
    """An activation does not have the shape required at a stitch point."""


class TrainingError(RuntimeError):
    """Optimization diverged (non-finite loss)."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class ArchSpec:
    blocks_per_stage: tuple[int, int, int, int]

    def __post_init__(self):
        b = tuple(self.blocks_per_stage)
        if len(b) != 4 or any(v not in (1, 2) for v in b):
            raise ValueError(f"blocks_per_stage must be four entries from {{1, 2}}, got {b}")
        object.__setattr__(self, "blocks_per_stage", b)

    @property
    def name(self) -> str:
        return "R" + "".join(map(str, self.blocks_per_stage))

    @property
    def num_blocks(self) -> int:
        return sum(self.blocks_per_stage)

    @classmethod
    def parse(cls, name: str) -> "ArchSpec":
        s = name.strip()
        if len(s) != 5 or s[0].upper() != "R" or not s[1:].isdigit():
            raise ValueError(f"not a Small ResNet name: {name!r}")
        try:
            return cls(tuple(int(c) for c in s[1:]))
        except ValueError as e:
            raise ValueError(f"not a Small ResNet name: {name!r} ({e})") from None

    def __str__(self) -> str:
        return self.name


class TensorShape(NamedTuple):
    channels: int
    height: int
    width: int


class StitchPoint(NamedTuple):
    index: int
    shape: TensorShape


def enumerate_archs() -> list[ArchSpec]:
    """All 16 Small ResNets in lexicographic order (``R1111`` ... ``R2222``)."""
    return [ArchSpec(b) for b in itertools.product((1, 2), repeat=4)]


def stage_of_blocks(arch: ArchSpec) -> list[int]:
    return [s for s, n in enumerate(arch.blocks_per_stage) for _ in range(n)]


def stitch_points(arch: ArchSpec) -> list[StitchPoint]:
    points = [StitchPoint(0, TensorShape(STAGE_CHANNELS[0], STAGE_SIZES[0], STAGE_SIZES[0]))]
    for k, s in enumerate(stage_of_blocks(arch), start=1):
        points.append(StitchPoint(k, TensorShape(STAGE_CHANNELS[s], STAGE_SIZES[s], STAGE_SIZES[s])))
    return points


def point_shape(arch: ArchSpec, index: int) -> TensorShape:
    if index == INPUT_INDEX:
        return TensorShape(*INPUT_SHAPE)
    if not 0 <= index <= arch.num_blocks:
        raise IndexError(f"{arch.name} has stitch points 0..{arch.num_blocks}, got {index}")
    return stitch_points(arch)[index].shape


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SmallResNet(nn.Module):
    """CIFAR-style ResNet: 3x3 stem (no max-pool), four stages, GAP + linear head."""

    def __init__(self, arch: ArchSpec, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.arch = arch
        self.stem = nn.Sequential(
            nn.Conv2d(3, STAGE_CHANNELS[0], 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(STAGE_CHANNELS[0]),
            nn.ReLU(inplace=True),
        )
        blocks = []
        in_ch = STAGE_CHANNELS[0]
        for s, n in enumerate(arch.blocks_per_stage):
            for b in range(n):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(BasicBlock(in_ch, STAGE_CHANNELS[s], stride))
                in_ch = STAGE_CHANNELS[s]
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(in_ch, num_classes)

    def prefix(self, x: torch.Tensor, i: int) -> torch.Tensor:
        """Output at stitch point ``i`` (``INPUT_INDEX`` returns ``x``)."""
        if i == INPUT_INDEX:
            return x
        h = self.stem(x)
        for block in self.blocks[:i]:
            h = block(h)
        return h

    def suffix(self, h: torch.Tensor, j: int) -> torch.Tensor:
        """Logits from an activation at stitch point ``j``; layers up to ``j`` are skipped."""
        if j == INPUT_INDEX:
            h = self.stem(h)
            j = 0
        for block in self.blocks[j:]:
            h = block(h)
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(h, 1), 1))

    def forward(self, x):
        return self.suffix(self.prefix(x, 0), 0)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            nn.init.uniform_(m.weight, -bound, bound)
            nn.init.uniform_(m.bias, -bound, bound)


@dataclass
class ModelHandle:
    """A network plus provenance. Treated as immutable outside a training run."""

    arch: ArchSpec
    module: SmallResNet
    provenance: str = "random_control"
    seed: int = 0
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.arch.name

    @property
    def label(self) -> str:
        return f"{self.arch.name}_s{self.seed}_{self.provenance}"

    @property
    def device(self) -> torch.device:
        return next(self.module.parameters()).device

    def to(self, device) -> "ModelHandle":
        self.module.to(device)
        return self

    def __call__(self, x):
        return self.module(x)


def build_model(arch: ArchSpec, seed: int) -> ModelHandle:
    """Randomly initialized network; identical parameters for identical ``(arch, seed)``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = SmallResNet(arch)
        init_weights(module)
    module.eval()
    return ModelHandle(arch, module, "random_control", seed)


def parameter_shapes(model: ModelHandle | nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    m = model.module if isinstance(model, ModelHandle) else model
    return [(n, tuple(p.shape)) for n, p in m.named_parameters()]


def _check_shape(model: ModelHandle, j: int, h: torch.Tensor) -> None:
    want = tuple(point_shape(model.arch, j))
    got = tuple(h.shape[1:])
    if h.ndim != 4 or got != want:
        raise ShapeError(f"{model.name} stitch point {j} expects activations of shape (batch, {', '.join(map(str, want))}), got {tuple(h.shape)}")


def forward_prefix(model: ModelHandle, i: int, batch) -> torch.Tensor:
    x = batch.images if hasattr(batch, "images") else batch
    point_shape(model.arch, i)
    return model.module.prefix(x, i)


def forward_suffix(model: ModelHandle, j: int, activation: torch.Tensor) -> torch.Tensor:
    _check_shape(model, j, activation)
    return model.module.suffix(activation, j)


@torch.no_grad()
def predict(model: nn.Module | ModelHandle, split: DatasetSplit, batch_size: int = 500) -> np.ndarray:
    """Argmax predictions in split order, with normalization layers in inference mode."""
    m = model.module if isinstance(model, ModelHandle) else model
    was_training = m.training
    m.eval()
    device = next(m.parameters()).device
    try:
        preds = [m(b.images.to(device)).argmax(1).cpu() for b in split.batches(batch_size)]
    finally:
        m.train(was_training)
    return torch.cat(preds).numpy()


def evaluate(model: nn.Module | ModelHandle, split: DatasetSplit, batch_size: int = 500) -> float:
    """Fraction of argmax-correct predictions; never touches parameters or statistics."""
    if split.size == 0:
        raise ValueError("cannot evaluate on an empty split")
    return float((predict(model, split, batch_size) == split.labels).mean())


def train_network(
    model: ModelHandle,
    train: DatasetSplit,
    test: DatasetSplit | None,
    hp: Hyperparams,
    *,
    log_every: int = 0,
) -> ModelHandle:
    """Train a copy of ``model`` with cross-entropy; the input handle is left untouched.

    Raises:
        TrainingError: the loss became NaN or infinite.
    """
    module = copy.deepcopy(model.module)
    module.requires_grad_(True)
    device = next(module.parameters()).device
    opt = sgd_for(module.parameters(), hp)
    steps_per_epoch = train.num_batches(hp.batch_size, drop_last=train.size >= hp.batch_size)
    total = steps_per_epoch * hp.epochs
    step = 0
    history = []
    start = time.time()
    module.train()
    for epoch in range(hp.epochs):
        running, seen = 0.0, 0
        for b in train.batches(hp.batch_size, seed=hp.seed, epoch=epoch, augment=hp.augment,
                               drop_last=train.size >= hp.batch_size):
            for g in opt.param_groups:
                g["lr"] = lr_at(step, total, hp)
            b = b.to(device)
            loss = F.cross_entropy(module(b.images), b.labels)
            if not torch.isfinite(loss):
                raise TrainingError(f"{model.name}: non-finite loss {loss.item()}", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running += loss.item() * len(b)
            seen += len(b)
            step += 1
            if log_every and step % log_every == 0:
                log.info("%s step %d/%d loss %.4f", model.name, step, total, loss.item())
        history.append(running / seen)
    module.eval()
    module.requires_grad_(False)
    out = ModelHandle(
        model.arch, module, "trained", model.seed,
        train_accuracy=evaluate(module, train),
        test_accuracy=evaluate(module, test) if test is not None else None,
        extra={"hyperparams": hp.to_dict(), "epoch_loss": history, "wall_clock": time.time() - start,
               "train_size": train.size, "data_source": train.source},
    )
    return out


def module_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer (including normalization statistics)."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(memoryview(t.detach().cpu().contiguous().numpy()).cast("B"))
    return h.hexdigest()


_digest_cache: "weakref.WeakKeyDictionary[nn.Module, tuple]" = weakref.WeakKeyDictionary()


def _version_key(module: nn.Module) -> tuple:
    return tuple((n, t.data_ptr(), t._version) for n, t in module.state_dict(keep_vars=True).items())


def state_digest(*modules: nn.Module, cached: bool = False) -> str:
    """Combined digest of ``modules``.

    With ``cached`` a module's digest is reused while none of its tensors has
    been modified in place since it was computed (tracked by tensor version
    counters). Writes through ``.data`` bypass those counters, so invariant
    checks use the uncached path.
    """
    parts = []
    for m in modules:
        if cached:
            key = _version_key(m)
            hit = _digest_cache.get(m)
            if hit is None or hit[0] != key:
                hit = (key, module_digest(m))
                _digest_cache[m] = hit
            parts.append(hit[1])
        else:
            parts.append(module_digest(m))
    if len(parts) == 1:
        return parts[0]
    return hashlib.sha256("".join(parts).encode()).hexdigest()


def _save_tensors(module: nn.Module, directory: Path) -> dict:
    tensors = {}
    counters = {}
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy()
        if name.endswith("num_batches_tracked"):
            counters[name] = int(arr)
            continue
        arr.astype("<f4").tofile(directory / f"{name}.f32")
        tensors[name] = list(arr.shape)
    return {"tensors": tensors, "counters": counters}


def _load_tensors(module: nn.Module, directory: Path, layout: dict) -> None:
    state = module.state_dict()
    expected = {k for k in state if not k.endswith("num_batches_tracked")}
    if set(layout["tensors"]) != expected:
        raise CheckpointError(f"{directory}: tensor names do not match the architecture")
    new = {}
    for name, shape in layout["tensors"].items():
        path = directory / f"{name}.f32"
        if not path.is_file():
            raise CheckpointError(f"missing tensor file {path}")
        arr = np.fromfile(path, dtype="<f4")
        if arr.size != int(np.prod(shape)) or list(state[name].shape) != shape:
            raise CheckpointError(f"{path}: shape mismatch")
        new[name] = torch.from_numpy(arr.reshape(shape).astype(np.float32))
    for name, v in layout["counters"].items():
        new[name] = torch.tensor(v, dtype=torch.long)
    for name in state:
        if name.endswith("num_batches_tracked") and name not in new:
            new[name] = state[name]
    module.load_state_dict(new)


def write_manifest(directory: Path, manifest: dict) -> None:
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(directory / "manifest.json")


def read_manifest(directory: str | Path, kind: str | None = None) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise CheckpointError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"{path}: schema version {manifest.get('schema_version')!r} is incompatible with {CHECKPOINT_SCHEMA}"
        )
    if kind is not None and manifest.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {manifest.get('kind')!r}")
    return manifest


def save_checkpoint(model: ModelHandle, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layout = _save_tensors(model.module, path)
    write_manifest(path, {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": "network",
        "arch": model.arch.name,
        "seed": model.seed,
        "provenance": model.provenance,
        "train_accuracy": model.train_accuracy,
        "test_accuracy": model.test_accuracy,
        "normalization": normalization_constants(),
        "digest": state_digest(model.module),
        "extra": model.extra,
        **layout,
    })
    return path


def load_checkpoint(path: str | Path, device=None) -> ModelHandle:
    path = Path(path)
    manifest = read_manifest(path, kind="network")
    arch = ArchSpec.parse(manifest["arch"])
    module = SmallResNet(arch)
    _load_tensors(module, path, manifest)
    module.eval()
    module.requires_grad_(False)
    if device is not None:
        module.to(device)
    return ModelHandle(arch, module, manifest["provenance"], manifest["seed"],
                       manifest["train_accuracy"], manifest["test_accuracy"], manifest.get("extra", {}))
