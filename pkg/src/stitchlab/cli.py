"""Command line interface.

    stitchlab zoo train|eval   train / evaluate the Small ResNet zoo (plus random controls)
    stitchlab sweep            similarity matrices for every ordered arch pair and regime
    stitchlab stats            EV / ES / SV mean-squared-error tables
    stitchlab genimg           stitch intermediate layers into input space
    stitchlab plot             heatmap from a matrix CSV

Settings resolve as: command-line flags, then environment
(``STITCHLAB_DATA_ROOT``, ``STITCHLAB_OUT``), then ``--config`` file
(YAML or JSON), then defaults. The resolved configuration is written to
``<out>/config.json`` before any work starts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import yaml

from . import experiments as ex
from .data import DATA_ROOT_ENV, cifar10_available
from .reporting import plot_csv
from .stitching import load_stitched, plan_stitch, build_stitch, assemble
from .training import train_stitch_similarity
from .zoo import ArchSpec, build_model, enumerate_archs, evaluate, load_checkpoint, point_shape, save_checkpoint, train_network

log = logging.getLogger("stitchlab")

OUT_ENV = "STITCHLAB_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_root: str | None = None
    out: str = "stitchlab_runs"
    profile: str = "paper"
    seed: int = 0
    device: str = "auto"
    archs: list[str] = field(default_factory=lambda: [a.name for a in enumerate_archs()])
    regimes: list[str] = field(default_factory=lambda: ["trained_trained"])
    scope: str = "both"

    @property
    def arch_specs(self) -> list[ArchSpec]:
        return [ArchSpec.parse(a) for a in self.archs]

    @property
    def budget(self) -> ex.BudgetProfile:
        return ex.PROFILES[self.profile]

    @property
    def torch_device(self) -> torch.device:
        if self.device == "auto":
            return torch.device("cuda" if torch.cuda.is_available() else "cpu")
        return torch.device(self.device)

    @property
    def zoo_dir(self) -> Path:
        return Path(self.out) / "zoo"

    def validate(self, needs_data: bool = True) -> None:
        try:
            specs = self.arch_specs
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if not specs:
            raise ConfigError("no architectures selected")
        if self.profile not in ex.PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(ex.PROFILES)}")
        limit = self.budget.max_archs
        if limit is not None and len(specs) > limit:
            raise ConfigError(f"profile {self.profile!r} allows at most {limit} architectures, got {len(specs)}")
        for r in self.regimes:
            if r not in ex.REGIMES:
                raise ConfigError(f"unknown regime {r!r}; choose from {list(ex.REGIMES)}")
        if self.scope not in ("both", *ex.SCOPES):
            raise ConfigError(f"unknown scope {self.scope!r}")
        if self.device not in ("auto", "cpu") and not self.device.startswith("cuda"):
            raise ConfigError(f"unknown device {self.device!r}")
        if needs_data and self.budget.source == "cifar10":
            if self.data_root is None:
                raise ConfigError(f"profile {self.profile!r} needs CIFAR-10: pass --data-root or set {DATA_ROOT_ENV}")
            if not Path(self.data_root).is_dir():
                raise ConfigError(f"data root does not exist: {self.data_root}")
            if not cifar10_available(self.data_root):
                raise ConfigError(f"no CIFAR-10 binary batches under {self.data_root}")
        out = Path(self.out)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"output path is not a directory: {out}")

    def dump(self) -> Path:
        out = Path(self.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


_CONFIG_KEYS = {"data_root", "out", "profile", "seed", "device", "archs", "regimes", "scope"}


def _split_list(value) -> list[str]:
    if isinstance(value, str):
        value = [value]
    out = []
    for v in value:
        out.extend(s.strip() for s in str(v).split(",") if s.strip())
    return out


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    values: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping")
        unknown = set(loaded) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        values.update(loaded)
    if environ.get(DATA_ROOT_ENV):
        values["data_root"] = environ[DATA_ROOT_ENV]
    if environ.get(OUT_ENV):
        values["out"] = environ[OUT_ENV]
    for key in _CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    for key in ("archs", "regimes"):
        if key in values:
            values[key] = _split_list(values[key])
    if "seed" in values:
        values["seed"] = int(values["seed"])
    return RunConfig(**values)


# ---------------------------------------------------------------------------


def _zoo_seeds(cfg: RunConfig) -> list[int]:
    return [cfg.seed, cfg.seed + 1]


def cmd_zoo(cfg: RunConfig, action: str) -> int:
    train, test = cfg.budget.load(cfg.data_root)
    device = cfg.torch_device
    rows = []
    for arch in cfg.arch_specs:
        for seed in _zoo_seeds(cfg):
            control = build_model(arch, seed).to(device)
            control.test_accuracy = evaluate(control, test)
            trained_dir = ex.zoo_path(cfg.zoo_dir, arch, seed, "trained")
            if action == "train":
                if (trained_dir / "manifest.json").is_file():
                    trained = load_checkpoint(trained_dir, device)
                    log.info("%s exists, skipping", trained_dir)
                else:
                    trained = train_network(control, train, test, cfg.budget.zoo_hparams(seed), log_every=50)
                    trained.extra["profile"] = cfg.profile
                    save_checkpoint(trained, trained_dir)
                save_checkpoint(control, ex.zoo_path(cfg.zoo_dir, arch, seed, "random_control"))
                rows.append((arch.name, seed, "trained", trained.train_accuracy, trained.test_accuracy))
            else:
                if (trained_dir / "manifest.json").is_file():
                    trained = load_checkpoint(trained_dir, device)
                    rows.append((arch.name, seed, "trained", trained.train_accuracy, evaluate(trained, test)))
            rows.append((arch.name, seed, "random_control", None, control.test_accuracy))
    summary = cfg.zoo_dir / f"summary_{action}.csv"
    summary.parent.mkdir(parents=True, exist_ok=True)
    with summary.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["arch", "seed", "provenance", "train_accuracy", "test_accuracy"])
        w.writerows([[a, s, p, "" if tr is None else f"{tr:.4f}", f"{te:.4f}"] for a, s, p, tr, te in rows])
    for a, s, p, _, te in rows:
        print(f"{a}\tseed={s}\t{p}\ttest_accuracy={te:.4f}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    train, test = cfg.budget.load(cfg.data_root)
    archs = cfg.arch_specs
    ex.run_full_sweep(archs, cfg.regimes, cfg.budget, cfg.zoo_dir, cfg.out, train, test,
                      seed=cfg.seed, device=cfg.torch_device)
    for regime in cfg.regimes:
        for a in archs:
            for b in archs:
                print(Path(cfg.out) / "matrices" / f"{ex.matrix_stem(a, b, regime)}.csv")
    return 0


def stitch_pairs(cfg: RunConfig, train, test) -> list[ex.StitchPair]:
    """Vanilla stitches from a finished trained_trained sweep, each paired with a similarity-trained stitch."""
    seed = cfg.seed
    hp = cfg.budget.similarity_hparams(seed)
    pairs = []
    diagonal_only = cfg.scope == "diagonals"
    for a in cfg.arch_specs:
        sender = ex.load_zoo_model(cfg.zoo_dir, a, seed, "trained", cfg.torch_device)
        for b in cfg.arch_specs:
            receiver = ex.load_zoo_model(cfg.zoo_dir, b, seed + 1, "trained", cfg.torch_device)
            stem = ex.matrix_stem(a, b, "trained_trained")
            for i in range(a.num_blocks + 1):
                for j in range(b.num_blocks + 1):
                    if diagonal_only and i != j:
                        continue
                    vdir = Path(cfg.out) / "entries" / stem / f"{i}_{j}"
                    if not (vdir / "manifest.json").is_file():
                        raise FileNotFoundError(f"vanilla stitch missing (run sweep first): {vdir}")
                    vanilla = load_stitched(vdir, sender, receiver)
                    sdir = Path(cfg.out) / "similarity" / f"{a.name}__{b.name}" / f"{i}_{j}"
                    if (sdir / "manifest.json").is_file():
                        similar = load_stitched(sdir, sender, receiver)
                    else:
                        spec = plan_stitch(point_shape(a, i), point_shape(b, j))
                        ehp = hp.replace(seed=ex.entry_seed(seed, i, j))
                        stitch, report = train_stitch_similarity(sender, i, receiver, j,
                                                                 build_stitch(spec, seed=ehp.seed), train, ehp, test)
                        similar = assemble(sender, i, receiver, j, stitch)
                        ex.save_stitch(similar, sdir, "similarity",
                                       {"report": report.to_dict(), "accuracy": report.final_accuracy})
                    pairs.append(ex.StitchPair(vanilla, similar))
    return pairs


def cmd_stats(cfg: RunConfig) -> int:
    train, test = cfg.budget.load(cfg.data_root)
    pairs = stitch_pairs(cfg, train, test)
    tables = ex.mse_statistics(pairs, test)
    if cfg.scope != "both":
        tables = {cfg.scope: tables[cfg.scope]}
    for path in ex.write_stats(tables, cfg.out):
        print(path)
    return 0


def cmd_genimg(cfg: RunConfig) -> int:
    train, test = cfg.budget.load(cfg.data_root)
    hp = cfg.budget.vanilla_hparams(cfg.seed)
    for a in cfg.arch_specs:
        sender = ex.load_zoo_model(cfg.zoo_dir, a, cfg.seed, "trained", cfg.torch_device)
        for i in range(a.num_blocks + 1):
            if list((Path(cfg.out) / "images").glob(f"{a.name}_{i}_*.png")):
                continue
            pairs = ex.generate_images(sender, i, train, hp, examples=test)
            for p in ex.write_image_pairs(pairs, sender, i, cfg.out):
                print(p)
    return 0


def cmd_plot(csv_path: str, out_path: str) -> int:
    print(plot_csv(csv_path, out_path))
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file with run settings")
    p.add_argument("--archs", action="append", help="comma-separated Small ResNet names, e.g. R1111,R2222")
    p.add_argument("--profile", choices=sorted(ex.PROFILES))
    p.add_argument("--regime", dest="regimes", action="append", help=f"one of {', '.join(ex.REGIMES)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--out")
    p.add_argument("--device")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stitchlab", description="Cross-architecture model stitching for Small ResNets")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    zoo = sub.add_parser("zoo", help="train or evaluate the network zoo")
    zoo.add_argument("action", choices=["train", "eval"])
    _common(zoo)
    for name, help_ in (("sweep", "similarity matrices"), ("genimg", "stitch-generated images")):
        _common(sub.add_parser(name, help=help_))
    stats = sub.add_parser("stats", help="EV/ES/SV mean-squared-error tables")
    _common(stats)
    stats.add_argument("--scope", choices=["both", *ex.SCOPES])
    plot = sub.add_parser("plot", help="heatmap from a matrix CSV")
    plot.add_argument("csv")
    plot.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "plot":
            return cmd_plot(args.csv, args.out)
        cfg = resolve_config(args)
        cfg.validate(needs_data=True)
        cfg.dump()
        if args.command == "zoo":
            return cmd_zoo(cfg, args.action)
        return {"sweep": cmd_sweep, "stats": cmd_stats, "genimg": cmd_genimg}[args.command](cfg)
    except (ConfigError, ex.MatrixParseError, ex.MissingCheckpointsError, FileNotFoundError) as e:
        print(f"stitchlab: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any failure must give a non-zero exit
        log.debug("failure", exc_info=True)
        print(f"stitchlab: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
