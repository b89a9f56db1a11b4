import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stitchlab.data import (
    CorruptRecordError,
    ImageBatch,
    IngestionError,
    RECORD_BYTES,
    augment,
    load_cifar10,
    make_synthetic,
    synthetic_label,
)

from conftest import write_fake_cifar


def test_cifar_split_sizes(fake_cifar):
    assert load_cifar10(fake_cifar, "train").size == 50000
    assert load_cifar10(fake_cifar, "test").size == 10000
    # parent directory also accepted
    assert load_cifar10(fake_cifar.parent, "test").size == 10000


def test_cifar_roundtrip_is_bit_identical(fake_cifar):
    a = load_cifar10(fake_cifar, "test")
    b = load_cifar10(fake_cifar, "test")
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.labels, b.labels)
    assert torch.equal(a.batch([0, 5]).images, b.batch([0, 5]).images)


def test_cifar_records_decode_chw(tmp_path):
    root = write_fake_cifar(tmp_path / "c", records=3)
    raw = np.fromfile(root / "test_batch.bin", dtype=np.uint8).reshape(3, RECORD_BYTES)
    split = load_cifar10(root, "test", strict=False)
    assert split.labels.tolist() == raw[:, 0].tolist()
    # red plane first, then green, then blue; each row-major 32x32
    assert split.pixels[1, 0, 0, 1] == raw[1, 2]
    assert split.pixels[1, 1, 0, 0] == raw[1, 1 + 1024]
    assert split.pixels[2, 2, 31, 31] == raw[2, 3072]


def test_truncated_record_is_corrupt(tmp_path):
    root = write_fake_cifar(tmp_path / "c", records=2)
    path = root / "test_batch.bin"
    data = path.read_bytes()
    path.write_bytes(data[: RECORD_BYTES + 3072])
    with pytest.raises(CorruptRecordError, match="test_batch.bin"):
        load_cifar10(root, "test", strict=False)


def test_bad_label_is_corrupt(tmp_path):
    root = write_fake_cifar(tmp_path / "c", records=2)
    raw = bytearray((root / "test_batch.bin").read_bytes())
    raw[RECORD_BYTES] = 10
    (root / "test_batch.bin").write_bytes(bytes(raw))
    with pytest.raises(CorruptRecordError, match="label"):
        load_cifar10(root, "test", strict=False)


def test_missing_file_names_it(tmp_path):
    root = write_fake_cifar(tmp_path / "c", records=1)
    (root / "data_batch_3.bin").unlink()
    with pytest.raises(IngestionError, match="data_batch_3.bin"):
        load_cifar10(root, "train", strict=False)


def test_strict_record_count(tmp_path):
    root = write_fake_cifar(tmp_path / "c", records=5)
    with pytest.raises(IngestionError, match="expected 10000 records"):
        load_cifar10(root, "test")


def test_env_data_root(fake_cifar, monkeypatch):
    monkeypatch.setenv("STITCHLAB_DATA_ROOT", str(fake_cifar))
    assert load_cifar10(None, "test").size == 10000
    monkeypatch.delenv("STITCHLAB_DATA_ROOT")
    with pytest.raises(IngestionError):
        load_cifar10(None, "test")


def test_synthetic_determinism():
    a, b = make_synthetic(64, 7), make_synthetic(64, 7)
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.pixels, make_synthetic(64, 8).pixels)


def test_synthetic_single_example_usable():
    s = make_synthetic(1, 0)
    (b,) = list(s.batches(256, seed=3))
    assert b.images.shape == (1, 3, 32, 32)


def test_synthetic_zero_rejected():
    with pytest.raises(ValueError):
        make_synthetic(0, 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_synthetic_labels_balanced_and_functional(seed):
    s = make_synthetic(1000, seed)
    counts = np.bincount(s.labels, minlength=10)
    assert np.all(np.abs(counts - 100) <= 20)
    assert np.array_equal(synthetic_label(s.pixels), s.labels)


def test_splits_are_read_only():
    s = make_synthetic(4, 0)
    with pytest.raises(ValueError):
        s.pixels[0, 0, 0, 0] = 1


def test_batch_order_pure_function_of_seed_and_epoch():
    s = make_synthetic(50, 0)
    assert np.array_equal(s.order(1, 2), s.order(1, 2))
    assert not np.array_equal(s.order(1, 2), s.order(1, 3))
    seen = np.concatenate([b.labels.numpy() for b in s.batches(16, seed=1)])
    assert np.array_equal(seen, s.labels[s.order(1, 0)])


def test_augment_none_is_identity(tiny_split):
    b = tiny_split.batch(range(8))
    out = augment(b, "none", 0)
    assert torch.equal(out.images, b.images)


def test_augment_crop_flip_shape_and_determinism(tiny_split):
    b = tiny_split.batch(range(8))
    x = augment(b, "crop_flip", 5)
    assert x.images.shape == (8, 3, 32, 32)
    assert torch.equal(x.images, augment(b, "crop_flip", 5).images)
    assert torch.equal(x.labels, b.labels)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_crop_flip_is_a_shifted_window(seed):
    """Every augmented image equals some pad-4 crop of the original, possibly mirrored."""
    b = ImageBatch(torch.randn(1, 3, 32, 32), torch.tensor([3]))
    out = augment(b, "crop_flip", seed).images[0]
    padded = torch.nn.functional.pad(b.images[0], (4, 4, 4, 4))
    windows = [padded[:, dy:dy + 32, dx:dx + 32] for dy in range(9) for dx in range(9)]
    assert any(torch.equal(out, w) or torch.equal(out, w.flip(-1)) for w in windows)


def test_unknown_policy():
    b = ImageBatch(torch.zeros(1, 3, 32, 32), torch.tensor([0]))
    with pytest.raises(ValueError):
        augment(b, "rotate", 0)


def test_image_batch_contract():
    with pytest.raises(ValueError):
        ImageBatch(torch.zeros(2, 3, 16, 16), torch.tensor([0, 1]))
    with pytest.raises(ValueError):
        ImageBatch(torch.zeros(1, 3, 32, 32), torch.tensor([10]))


def test_subset_fraction():
    s = make_synthetic(100, 0)
    sub = s.subset(fraction=0.25, seed=0)
    assert sub.size == 25
    assert np.array_equal(sub.pixels, s.subset(fraction=0.25, seed=0).pixels)
