import os
from pathlib import Path

import numpy as np
import pytest
import torch

from stitchlab.data import RECORD_BYTES, RECORDS_PER_FILE, TEST_FILES, TRAIN_FILES, cifar10_available, make_synthetic
from stitchlab.zoo import ArchSpec, build_model

torch.set_num_threads(max(1, os.cpu_count() or 1))


def write_fake_cifar(root: Path, records: int = RECORDS_PER_FILE, seed: int = 0) -> Path:
    """CIFAR-10 binary layout filled with random bytes and valid labels."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for name in TRAIN_FILES + TEST_FILES:
        buf = rng.integers(0, 256, size=(records, RECORD_BYTES), dtype=np.uint8)
        buf[:, 0] = np.arange(records) % 10
        buf.tofile(root / name)
    return root


@pytest.fixture(scope="session")
def fake_cifar(tmp_path_factory):
    return write_fake_cifar(tmp_path_factory.mktemp("cifar") / "cifar-10-batches-bin")


@pytest.fixture(scope="session")
def r1111():
    return ArchSpec.parse("R1111")


@pytest.fixture(scope="session")
def random_r1111(r1111):
    return build_model(r1111, 0)


@pytest.fixture(scope="session")
def tiny_split():
    return make_synthetic(16, 11, role="test")


def cifar_root():
    root = os.environ.get("STITCHLAB_DATA_ROOT")
    return root if root and cifar10_available(root) else None


requires_cifar = pytest.mark.skipif(
    cifar_root() is None,
    reason="CIFAR-10 binary batches not found; set STITCHLAB_DATA_ROOT",
)


# One line per acceptance criterion in the terminal summary.
_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = ""
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _criteria[marker] = (outcome, detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcome, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {outcome}" + (f"  ({detail})" if detail else ""))
