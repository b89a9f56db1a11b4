"""Stitch planning, stitch layers, and frozen stitched networks.

A stitch maps the sender's activation at point ``i`` into the activation
space the receiver expects at point ``j``. Spatial sizes in the family differ
by powers of two, so one of three transforms always fits:

* ``project_1x1``       equal spatial size, 1x1 convolution
* ``downsample_conv``   sender ``k`` times larger, ``k x k`` convolution with stride ``k``
* ``upsample_project``  sender ``k`` times smaller, nearest upsample by ``k`` then 1x1 convolution
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .zoo import (
    CHECKPOINT_SCHEMA,
    ModelHandle,
    TensorShape,
    _check_shape,
    _load_tensors,
    _save_tensors,
    point_shape,
    read_manifest,
    state_digest,
    write_manifest,
)

KINDS = ("project_1x1", "downsample_conv", "upsample_project")


class UnsupportedGeometryError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class StitchSpec:
    kind: str
    factor: int
    in_shape: TensorShape
    out_shape: TensorShape

    @property
    def in_channels(self) -> int:
        return self.in_shape[0]

    @property
    def out_channels(self) -> int:
        return self.out_shape[0]

    @property
    def kernel_size(self) -> int:
        return self.factor if self.kind == "downsample_conv" else 1

    def to_dict(self) -> dict:
        return {"kind": self.kind, "factor": self.factor,
                "in_shape": list(self.in_shape), "out_shape": list(self.out_shape)}

    @classmethod
    def from_dict(cls, d: dict) -> "StitchSpec":
        return cls(d["kind"], d["factor"], TensorShape(*d["in_shape"]), TensorShape(*d["out_shape"]))


def plan_stitch(sender_shape, receiver_shape) -> StitchSpec:
    """Pick the transform between two activation shapes ``(channels, height, width)``.

    Raises:
        UnsupportedGeometryError: spatial sizes are not powers of two, not
            square-compatible, or not related by an integer factor.
    """
    src, dst = TensorShape(*sender_shape), TensorShape(*receiver_shape)
    for s in (src, dst):
        if not (_is_pow2(s.height) and _is_pow2(s.width)) or s.channels < 1:
            raise UnsupportedGeometryError(f"spatial dims must be powers of two, got {tuple(s)}")
    if src.height * dst.width != src.width * dst.height:
        raise UnsupportedGeometryError(f"aspect ratios differ: {tuple(src)} -> {tuple(dst)}")
    if src.height == dst.height:
        return StitchSpec("project_1x1", 1, src, dst)
    if src.height > dst.height:
        return StitchSpec("downsample_conv", src.height // dst.height, src, dst)
    return StitchSpec("upsample_project", dst.height // src.height, src, dst)


def nearest_upsample(activation: torch.Tensor, k: int) -> torch.Tensor:
    """Copy every element into a ``k x k`` block of equal values (no interpolation)."""
    if not _is_pow2(k):
        raise ValueError(f"upsample factor must be a power of two, got {k}")
    if k == 1:
        return activation
    return activation.repeat_interleave(k, dim=-2).repeat_interleave(k, dim=-1)


def mean_pool(activation: torch.Tensor, k: int) -> torch.Tensor:
    """Non-overlapping ``k x k`` mean pooling by repeated pairwise halving.

    Pairwise averaging keeps every intermediate exact when a block holds equal
    values, so this inverts ``nearest_upsample`` bit for bit.
    """
    if not _is_pow2(k):
        raise ValueError(f"pool factor must be a power of two, got {k}")
    x = activation
    while k > 1:
        x = (x[..., 0::2, :] + x[..., 1::2, :]) / 2
        x = (x[..., :, 0::2] + x[..., :, 1::2]) / 2
        k //= 2
    return x


class Stitch(nn.Module):
    """Convolution with bias, preceded by nearest upsampling for ``upsample_project``."""

    def __init__(self, spec: StitchSpec):
        super().__init__()
        self.spec = spec
        k = spec.kernel_size
        self.conv = nn.Conv2d(spec.in_channels, spec.out_channels, k, stride=k, bias=True)

    def forward(self, x):
        if self.spec.kind == "upsample_project":
            x = nearest_upsample(x, self.spec.factor)
        return self.conv(x)

    def set_identity(self) -> "Stitch":
        if self.spec.kernel_size != 1 or self.spec.in_channels != self.spec.out_channels:
            raise ValueError("identity initialization needs a 1x1 convolution with equal channel counts")
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[:, :, 0, 0] = torch.eye(self.spec.in_channels)
            self.conv.bias.zero_()
        return self


def build_stitch(spec: StitchSpec, seed: int = 0, init: str = "auto") -> Stitch:
    """Parameterized stitch for ``spec``.

    ``init="auto"`` uses the identity map when the convolution is 1x1 with
    equal channel counts, otherwise fan-out scaled normal weights and a zero
    bias. ``"identity"`` and ``"random"`` force one or the other.
    """
    if init not in ("auto", "identity", "random"):
        raise ValueError(f"unknown init {init!r}")
    identity_ok = spec.kernel_size == 1 and spec.in_channels == spec.out_channels
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        stitch = Stitch(spec)
        nn.init.kaiming_normal_(stitch.conv.weight, mode="fan_out", nonlinearity="linear")
        nn.init.zeros_(stitch.conv.bias)
    if init == "identity" or (init == "auto" and identity_ok):
        stitch.set_identity()
    return stitch


def num_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class StitchedNetwork(nn.Module):
    """``receiver.suffix(j, stitch(sender.prefix(i, x)))`` with sender and receiver frozen.

    Sender and receiver have gradients disabled and always run with
    normalization layers in inference mode, whatever ``train()`` is called with.
    """

    def __init__(self, sender: ModelHandle, i: int, receiver: ModelHandle, j: int, stitch: Stitch):
        super().__init__()
        self.sender, self.receiver = sender, receiver
        self.i, self.j = i, j
        self.stitch = stitch
        for m in (sender.module, receiver.module):
            m.requires_grad_(False)
            m.eval()
        self.frozen_digest = state_digest(sender.module, receiver.module, cached=True)

    def current_digest(self) -> str:
        """Recomputed from scratch on every call."""
        return state_digest(self.sender.module, self.receiver.module)

    def train(self, mode: bool = True):
        self.training = mode
        self.stitch.train(mode)
        self.sender.module.eval()
        self.receiver.module.eval()
        return self

    def trainable_parameters(self):
        return list(self.stitch.parameters())

    def provided(self, x: torch.Tensor) -> torch.Tensor:
        """Stitch output for input images ``x``."""
        return self.stitch(self.sender.module.prefix(x, self.i))

    def expected(self, x: torch.Tensor) -> torch.Tensor:
        """Receiver's own representation at ``j``."""
        return self.receiver.module.prefix(x, self.j)

    def forward(self, x):
        return self.receiver.module.suffix(self.provided(x), self.j)

    def describe(self) -> dict:
        return {
            "sender": self.sender.arch.name, "sender_seed": self.sender.seed,
            "sender_provenance": self.sender.provenance, "i": self.i,
            "receiver": self.receiver.arch.name, "receiver_seed": self.receiver.seed,
            "receiver_provenance": self.receiver.provenance, "j": self.j,
            "spec": self.stitch.spec.to_dict(), "frozen_digest": self.frozen_digest,
        }


def assemble(sender: ModelHandle, i: int, receiver: ModelHandle, j: int, stitch: Stitch) -> StitchedNetwork:
    """Join two frozen networks with ``stitch`` between sender point ``i`` and receiver point ``j``.

    Raises:
        AssemblyError: an index is invalid or the stitch does not map the
            sender's shape at ``i`` onto the receiver's shape at ``j``.
    """
    try:
        src, dst = point_shape(sender.arch, i), point_shape(receiver.arch, j)
    except IndexError as e:
        raise AssemblyError(str(e)) from e
    if i < 0:
        raise AssemblyError("sender index must be a stitch point >= 0")
    spec = stitch.spec
    if tuple(spec.in_shape) != tuple(src) or tuple(spec.out_shape) != tuple(dst):
        raise AssemblyError(
            f"stitch maps {tuple(spec.in_shape)} -> {tuple(spec.out_shape)} but "
            f"{sender.name}[{i}] is {tuple(src)} and {receiver.name}[{j}] is {tuple(dst)}"
        )
    stitch.to(sender.device)
    return StitchedNetwork(sender, i, receiver, j, stitch)


def stitch_between(sender: ModelHandle, i: int, receiver: ModelHandle, j: int,
                   seed: int = 0, init: str = "auto") -> StitchedNetwork:
    """Plan, build and assemble in one call."""
    spec = plan_stitch(point_shape(sender.arch, i), point_shape(receiver.arch, j))
    return assemble(sender, i, receiver, j, build_stitch(spec, seed, init))


def save_stitch(net: StitchedNetwork, path: str | Path, regime: str, extra: dict | None = None) -> Path:
    """Stitch checkpoint: same on-disk layout as network checkpoints."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layout = _save_tensors(net.stitch, path)
    write_manifest(path, {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": "stitch",
        "regime": regime,
        **net.describe(),
        "extra": extra or {},
        **layout,
    })
    return path


def load_stitch(path: str | Path) -> tuple[Stitch, dict]:
    path = Path(path)
    manifest = read_manifest(path, kind="stitch")
    stitch = Stitch(StitchSpec.from_dict(manifest["spec"]))
    _load_tensors(stitch, path, manifest)
    return stitch, manifest


def load_stitched(path: str | Path, sender: ModelHandle, receiver: ModelHandle) -> StitchedNetwork:
    """Rebuild a stitched network, refusing frozen networks that differ from the recorded ones."""
    stitch, manifest = load_stitch(path)
    net = assemble(sender, manifest["i"], receiver, manifest["j"], stitch)
    if net.frozen_digest != manifest["frozen_digest"]:
        raise AssemblyError(f"{path}: sender/receiver parameters differ from those the stitch was trained against")
    return net
