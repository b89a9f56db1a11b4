"""Sweeps over stitch points: similarity matrices, triangle statistic, MSE tables, image generation.

Experiment directory layout::

    matrices/<sender>__<receiver>__<regime>.csv
    entries/<sender>__<receiver>__<regime>/<i>_<j>/      stitch checkpoint + manifest + report
    similarity/<sender>__<receiver>/<i>_<j>/             similarity-trained stitch checkpoints
    stats/mse_<scope>.csv
    images/<sender>_<i>_<n>.png
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import DatasetSplit, make_synthetic, load_cifar10
from .optim import Hyperparams
from .stitching import (
    StitchedNetwork,
    assemble,
    build_stitch,
    load_stitch,
    load_stitched,
    plan_stitch,
    save_stitch,
)
from .training import train_stitch_similarity, train_stitch_task
from .zoo import (
    INPUT_INDEX,
    ArchSpec,
    ModelHandle,
    TrainingError,
    build_model,
    evaluate,
    load_checkpoint,
    point_shape,
)

log = logging.getLogger(__name__)

REGIMES = ("trained_trained", "random_sender", "random_receiver", "random_random")
PAIRINGS = ("EV", "ES", "SV")
STATISTICS = ("min", "mean", "max", "std")
SCOPES = ("diagonals", "all_stitches")


class MatrixParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class IncompleteMatrixError(ValueError):
    def __init__(self, holes: list[tuple[int, int]]):
        super().__init__(f"matrix has holes at {holes}")
        self.holes = holes


class MissingCheckpointsError(FileNotFoundError):
    def __init__(self, missing: list[str]):
        super().__init__("missing zoo checkpoints: " + ", ".join(missing))
        self.missing = missing


# ---------------------------------------------------------------------------
# Budget profiles


@dataclass(frozen=True)
class BudgetProfile:
    """How much data and how many epochs a run spends.

    ``zoo_epochs`` is our choice (the base-network budget is not given for
    the zoo); stitch epochs are 4 (vanilla) and 30 (similarity-trained).
    """

    name: str
    source: str
    train_fraction: float = 1.0
    zoo_epochs: int = 60
    stitch_epochs: int = 4
    similarity_epochs: int = 30
    max_archs: int | None = None
    synthetic_train: int = 0
    synthetic_test: int = 0
    batch_size: int = 256

    def load(self, data_root=None) -> tuple[DatasetSplit, DatasetSplit]:
        if self.source == "synthetic":
            return (make_synthetic(self.synthetic_train, seed=0, role="train"),
                    make_synthetic(self.synthetic_test, seed=1, role="test"))
        train = load_cifar10(data_root, "train")
        if self.train_fraction < 1.0:
            train = train.subset(fraction=self.train_fraction, seed=0)
        return train, load_cifar10(data_root, "test")

    def zoo_hparams(self, seed: int = 0) -> Hyperparams:
        return Hyperparams(epochs=self.zoo_epochs, batch_size=self.batch_size, seed=seed)

    def vanilla_hparams(self, seed: int = 0) -> Hyperparams:
        return Hyperparams(epochs=self.stitch_epochs, batch_size=self.batch_size, seed=seed)

    def similarity_hparams(self, seed: int = 0) -> Hyperparams:
        return Hyperparams(epochs=self.similarity_epochs, batch_size=self.batch_size, seed=seed)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


PROFILES = {
    "paper": BudgetProfile("paper", "cifar10"),
    "desk": BudgetProfile("desk", "cifar10", train_fraction=0.25, zoo_epochs=40, max_archs=2),
    "smoke": BudgetProfile("smoke", "synthetic", zoo_epochs=1, stitch_epochs=1, similarity_epochs=1,
                           synthetic_train=128, synthetic_test=64, batch_size=64),
}


# ---------------------------------------------------------------------------
# Similarity matrices


@dataclass
class SimilarityMatrix:
    sender_arch: ArchSpec
    receiver_arch: ArchSpec
    regime: str
    entries: np.ndarray
    notes: dict = field(default_factory=dict)
    manifests: dict = field(default_factory=dict)

    def __post_init__(self):
        want = (self.sender_arch.num_blocks + 1, self.receiver_arch.num_blocks + 1)
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.shape != want:
            raise ValueError(f"grid must be {want}, got {self.entries.shape}")
        vals = self.entries[~np.isnan(self.entries)]
        if vals.size and (vals.min() < 0 or vals.max() > 1):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def stem(self) -> str:
        return matrix_stem(self.sender_arch, self.receiver_arch, self.regime)

    def holes(self) -> list[tuple[int, int]]:
        return [tuple(map(int, ij)) for ij in np.argwhere(np.isnan(self.entries))]

    def to_csv(self) -> str:
        return matrix_to_csv(self.entries)

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / "matrices" / f"{self.stem}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, self.to_csv())
        return path


def matrix_stem(sender: ArchSpec, receiver: ArchSpec, regime: str) -> str:
    return f"{sender.name}__{receiver.name}__{regime}"


def matrix_to_csv(entries: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i\\j", *range(entries.shape[1])])
    for i, row in enumerate(entries):
        w.writerow([i, *("NA" if np.isnan(v) else f"{v:.4f}" for v in row)])
    return buf.getvalue()


def read_matrix_csv(path: str | Path) -> np.ndarray:
    """Parse a matrix CSV; holes (``NA``) become NaN.

    Raises:
        MatrixParseError: with the 1-based line number of the first bad line.
    """
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    if not rows:
        raise MatrixParseError("empty file", 1)
    header = rows[0]
    try:
        cols = [int(c) for c in header[1:]]
    except ValueError:
        raise MatrixParseError("header must list integer receiver indices", 1) from None
    if not cols or cols != list(range(len(cols))):
        raise MatrixParseError("header must list receiver indices 0..J", 1)
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(cols) + 1:
            raise MatrixParseError(f"expected {len(cols) + 1} fields, got {len(row)}", n)
        try:
            if int(row[0]) != n - 2:
                raise MatrixParseError(f"expected sender index {n - 2}, got {row[0]}", n)
            vals = [math.nan if c.strip() == "NA" else float(c) for c in row[1:]]
        except ValueError:
            raise MatrixParseError(f"non-numeric cell in {row}", n) from None
        if any(not (math.isnan(v) or 0.0 <= v <= 1.0) for v in vals):
            raise MatrixParseError("accuracy outside [0, 1]", n)
        out.append(vals)
    if not out:
        raise MatrixParseError("no data rows", 2)
    return np.array(out, dtype=np.float64)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def entry_seed(base: int, i: int, j: int) -> int:
    return base * 1000 + i * 10 + j


def similarity_matrix(sender: ModelHandle, receiver: ModelHandle, train: DatasetSplit, test: DatasetSplit,
                      hp: Hyperparams, regime: str = "trained_trained", out_dir: str | Path | None = None,
                      extra_manifest: dict | None = None) -> SimilarityMatrix:
    """Train a vanilla stitch for every ``(i, j)`` and record its test accuracy.

    With ``out_dir`` each finished entry is persisted (stitch checkpoint plus
    manifest, renamed into place when complete) and skipped on later calls,
    so an interrupted sweep resumes where it stopped. A failed entry becomes
    a NaN hole with the error recorded in ``notes``.
    """
    I, J = sender.arch.num_blocks, receiver.arch.num_blocks
    entries = np.full((I + 1, J + 1), np.nan)
    result = SimilarityMatrix(sender.arch, receiver.arch, regime, entries)
    entry_root = Path(out_dir) / "entries" / result.stem if out_dir is not None else None
    for i in range(I + 1):
        for j in range(J + 1):
            done = entry_root / f"{i}_{j}" if entry_root else None
            if done is not None and (done / "manifest.json").is_file():
                m = json.loads((done / "manifest.json").read_text())
                if m["extra"].get("status") == "ok":
                    entries[i, j] = m["extra"]["accuracy"]
                else:
                    result.notes[(i, j)] = m["extra"].get("error", "failed")
                result.manifests[(i, j)] = str(done)
                continue
            ehp = hp.replace(seed=entry_seed(hp.seed, i, j))
            spec = plan_stitch(point_shape(sender.arch, i), point_shape(receiver.arch, j))
            net = assemble(sender, i, receiver, j, build_stitch(spec, seed=ehp.seed))
            status = {"status": "ok"}
            try:
                _, report = train_stitch_task(net, train, test, ehp)
                entries[i, j] = report.final_accuracy
                status.update(accuracy=report.final_accuracy, report=report.to_dict())
            except TrainingError as e:
                result.notes[(i, j)] = str(e)
                status = {"status": "failed", "error": str(e)}
                log.warning("%s (%d, %d) failed: %s", result.stem, i, j, e)
            if entry_root is not None:
                tmp = entry_root / f".{i}_{j}.partial"
                if tmp.exists():
                    shutil.rmtree(tmp)
                save_stitch(net, tmp, "vanilla", {**status, "hyperparams": ehp.to_dict(), **(extra_manifest or {})})
                if done.exists():
                    shutil.rmtree(done)
                tmp.rename(done)
                result.manifests[(i, j)] = str(done)
    return result


def reevaluate_entry(entry_dir: str | Path, sender: ModelHandle, receiver: ModelHandle,
                     test: DatasetSplit) -> float:
    """Recompute a matrix entry from its stitch checkpoint."""
    return evaluate(load_stitched(entry_dir, sender, receiver), test)


# ---------------------------------------------------------------------------
# Triangle statistic


@dataclass(frozen=True)
class TriangleStat:
    lower_mean: float
    strict_upper_mean: float
    I: int
    J: int

    @property
    def gap(self) -> float:
        return self.lower_mean - self.strict_upper_mean


def lower_region(rows: int, cols: int) -> np.ndarray:
    """Boolean mask of cells with ``j / J <= i / I`` (cross-multiplied, so single rows/columns work)."""
    I, J = rows - 1, cols - 1
    i = np.arange(rows)[:, None]
    j = np.arange(cols)[None, :]
    return j * I <= i * J


def triangle_stat(matrix: SimilarityMatrix | np.ndarray) -> TriangleStat:
    """Mean accuracy in the lower-left triangle versus the strict upper remainder.

    An empty region has mean NaN.

    Raises:
        IncompleteMatrixError: the matrix has holes.
    """
    e = matrix.entries if isinstance(matrix, SimilarityMatrix) else np.asarray(matrix, dtype=np.float64)
    holes = [tuple(map(int, ij)) for ij in np.argwhere(np.isnan(e))]
    if holes:
        raise IncompleteMatrixError(holes)
    mask = lower_region(*e.shape)
    lower = float(e[mask].mean()) if mask.any() else math.nan
    upper = float(e[~mask].mean()) if (~mask).any() else math.nan
    return TriangleStat(lower, upper, e.shape[0] - 1, e.shape[1] - 1)


# ---------------------------------------------------------------------------
# EV / ES / SV statistics


@dataclass
class StitchPair:
    """Vanilla and similarity-trained stitched networks for one ``(sender, i, receiver, j)``."""

    vanilla: StitchedNetwork
    similarity: StitchedNetwork

    def __post_init__(self):
        a, b = self.vanilla, self.similarity
        if (a.i, a.j, a.sender.label, a.receiver.label) != (b.i, b.j, b.sender.label, b.receiver.label):
            raise ValueError("vanilla and similarity stitches must share sender, receiver and layers")

    @property
    def is_diagonal(self) -> bool:
        return self.vanilla.i == self.vanilla.j


@dataclass
class MseStatsTable:
    scope: str
    values: dict  # (pairing, statistic) -> float
    count: int

    def row(self) -> list[float]:
        return [self.values[(p, s)] for s in STATISTICS for p in PAIRINGS]

    @staticmethod
    def header() -> list[str]:
        return [f"{s}_{p}" for s in STATISTICS for p in PAIRINGS]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerow([repr(v) for v in self.row()])
        return buf.getvalue()


def sequential_sum(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Left-to-right float64 accumulation (a fixed, reproducible summation order)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[axis] == 0:
        return np.zeros(np.delete(values.shape, axis))
    return np.take(np.cumsum(values, axis=axis), -1, axis=axis)


def per_example_mse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared difference averaged over every non-batch element, one value per example."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cannot compare tensors of shapes {a.shape} and {b.shape}")
    d = (a - b).reshape(a.shape[0], -1)
    return sequential_sum(d * d, axis=1) / d.shape[1]


def summarize(values: np.ndarray) -> dict[str, float]:
    """min / mean / max / population standard deviation, sums accumulated left to right."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return {s: math.nan for s in STATISTICS}
    mean = float(sequential_sum(v)) / v.size
    var = float(sequential_sum((v - mean) ** 2)) / v.size
    return {"min": float(v.min()), "mean": mean, "max": float(v.max()), "std": math.sqrt(var)}


def mse_table(records: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], scope: str) -> MseStatsTable:
    """Statistics over the cartesian product of examples and layer pairs.

    ``records`` holds one ``(expected, vanilla, similarity)`` triple of arrays
    per layer pair, each shaped ``(examples, ...)``. Values are ordered pair
    by pair, then example by example.
    """
    per = {p: [] for p in PAIRINGS}
    for expected, vanilla, similar in records:
        per["EV"].append(per_example_mse(expected, vanilla))
        per["ES"].append(per_example_mse(expected, similar))
        per["SV"].append(per_example_mse(similar, vanilla))
    values, count = {}, 0
    for p in PAIRINGS:
        flat = np.concatenate(per[p]) if per[p] else np.zeros(0)
        count = flat.size
        for s, v in summarize(flat).items():
            values[(p, s)] = v
    return MseStatsTable(scope, values, count)


@torch.no_grad()
def collect_representations(pair: StitchPair, data: DatasetSplit, batch_size: int = 500):
    """Expected, vanilla-provided and similarity-provided representations for every example (no augmentation)."""
    v, s = pair.vanilla, pair.similarity
    v.eval()
    s.eval()
    device = v.sender.device
    E, V, S = [], [], []
    for b in data.batches(batch_size):
        x = b.images.to(device)
        E.append(v.expected(x).cpu().numpy())
        V.append(v.provided(x).cpu().numpy())
        S.append(s.provided(x).cpu().numpy())
    return np.concatenate(E), np.concatenate(V), np.concatenate(S)


def mse_statistics(pairs: Iterable[StitchPair], data: DatasetSplit,
                   batch_size: int = 500) -> dict[str, MseStatsTable]:
    """EV / ES / SV tables for the ``diagonals`` (``i == j``) and ``all_stitches`` scopes."""
    pairs = list(pairs)
    records = [collect_representations(p, data, batch_size) for p in pairs]
    diag = [r for p, r in zip(pairs, records) if p.is_diagonal]
    return {"diagonals": mse_table(diag, "diagonals"), "all_stitches": mse_table(records, "all_stitches")}


def pair_mean_mse(pair: StitchPair, data: DatasetSplit, batch_size: int = 500) -> dict[str, float]:
    table = mse_table([collect_representations(pair, data, batch_size)], "pair")
    return {p: table.values[(p, "mean")] for p in PAIRINGS}


def write_stats(tables: dict[str, MseStatsTable], out_dir: str | Path) -> list[Path]:
    d = Path(out_dir) / "stats"
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for scope, table in tables.items():
        path = d / f"mse_{scope}.csv"
        _atomic_write(path, table.to_csv())
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Image generation


def denormalize(images: torch.Tensor, split: DatasetSplit) -> np.ndarray:
    """Normalized ``(n, 3, 32, 32)`` tensors to ``uint8`` HWC arrays."""
    mean = torch.tensor(split.mean).view(1, 3, 1, 1)
    std = torch.tensor(split.std).view(1, 3, 1, 1)
    x = (images.detach().cpu() * std + mean).clamp(0, 1)
    return (x.permute(0, 2, 3, 1).numpy() * 255.0).round().astype(np.uint8)


def generate_images(sender: ModelHandle, i: int, train: DatasetSplit, hp: Hyperparams,
                    examples: DatasetSplit | None = None, count: int = 8,
                    receiver: ModelHandle | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stitch sender point ``i`` into input space and return ``(generated, original)`` image pairs.

    The stitch is trained as a vanilla stitch whose receiver is the whole
    network (``receiver`` defaults to the sender) consuming raw input. Images
    come back as ``uint8`` arrays of shape ``(32, 32, 3)``.
    """
    receiver = receiver or sender
    spec = plan_stitch(point_shape(sender.arch, i), point_shape(receiver.arch, INPUT_INDEX))
    net = assemble(sender, i, receiver, INPUT_INDEX, build_stitch(spec, seed=hp.seed))
    eval_split = examples or train
    net, _ = train_stitch_task(net, train, eval_split, hp)
    idx = np.arange(min(count, eval_split.size))
    b = eval_split.batch(idx)
    with torch.no_grad():
        generated = net.provided(b.images.to(sender.device)).cpu()
    return list(zip(denormalize(generated, eval_split), denormalize(b.images, eval_split)))


def side_by_side(generated: np.ndarray, original: np.ndarray, gap: int = 2) -> np.ndarray:
    h = generated.shape[0]
    spacer = np.full((h, gap, 3), 255, dtype=np.uint8)
    return np.concatenate([generated, spacer, original], axis=1)


def write_image_pairs(pairs, sender: ModelHandle, i: int, out_dir: str | Path) -> list[Path]:
    from PIL import Image

    d = Path(out_dir) / "images"
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for n, (gen, orig) in enumerate(pairs):
        path = d / f"{sender.name}_{i}_{n}.png"
        Image.fromarray(side_by_side(gen, orig)).save(path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Full sweeps


def zoo_path(zoo_dir: str | Path, arch: ArchSpec, seed: int, provenance: str) -> Path:
    return Path(zoo_dir) / f"{arch.name}_s{seed}_{provenance}"


def regime_roles(regime: str) -> tuple[str, str]:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; choose from {REGIMES}")
    return {
        "trained_trained": ("trained", "trained"),
        "random_sender": ("random_control", "trained"),
        "random_receiver": ("trained", "random_control"),
        "random_random": ("random_control", "random_control"),
    }[regime]


def load_zoo_model(zoo_dir: str | Path, arch: ArchSpec, seed: int, provenance: str, device=None) -> ModelHandle:
    """Trained models must exist on disk; random controls are rebuilt from their seed if absent."""
    path = zoo_path(zoo_dir, arch, seed, provenance)
    if (path / "manifest.json").is_file():
        return load_checkpoint(path, device)
    if provenance == "random_control":
        return build_model(arch, seed).to(device or "cpu")
    raise MissingCheckpointsError([str(path)])


def required_checkpoints(zoo_dir, archs, regimes, sender_seed: int, receiver_seed: int) -> list[Path]:
    need = []
    for regime in regimes:
        s_prov, r_prov = regime_roles(regime)
        for a in archs:
            if s_prov == "trained":
                need.append(zoo_path(zoo_dir, a, sender_seed, "trained"))
            if r_prov == "trained":
                need.append(zoo_path(zoo_dir, a, receiver_seed, "trained"))
    return sorted(set(need))


def run_full_sweep(archs: Sequence[ArchSpec], regimes: Sequence[str], profile: BudgetProfile,
                   zoo_dir: str | Path, out_dir: str | Path, train: DatasetSplit, test: DatasetSplit,
                   seed: int = 0, device=None) -> list[SimilarityMatrix]:
    """One similarity matrix per ordered arch pair and regime.

    The sender uses zoo seed ``seed`` and the receiver ``seed + 1``, so even
    same-architecture pairs compare independently initialized networks.

    Raises:
        MissingCheckpointsError: trained checkpoints required by a regime are absent.
    """
    missing = [str(p) for p in required_checkpoints(zoo_dir, archs, regimes, seed, seed + 1)
               if not (p / "manifest.json").is_file()]
    if missing:
        raise MissingCheckpointsError(missing)
    out_dir = Path(out_dir)
    results = []
    cache: dict = {}

    def get(arch, s, prov):
        key = (arch, s, prov)
        if key not in cache:
            cache[key] = load_zoo_model(zoo_dir, arch, s, prov, device)
        return cache[key]

    hp = profile.vanilla_hparams(seed)
    for regime in regimes:
        s_prov, r_prov = regime_roles(regime)
        for a in archs:
            for b in archs:
                stem = matrix_stem(a, b, regime)
                log.info("sweep %s", stem)
                m = similarity_matrix(get(a, seed, s_prov), get(b, seed + 1, r_prov), train, test, hp,
                                      regime, out_dir, {"profile": profile.name})
                m.write(out_dir)
                results.append(m)
    return results
