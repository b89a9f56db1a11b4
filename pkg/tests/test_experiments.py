import json
import math
import shutil
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stitchlab.data import make_synthetic
from stitchlab.experiments import (
    PROFILES,
    IncompleteMatrixError,
    MatrixParseError,
    MissingCheckpointsError,
    MseStatsTable,
    SimilarityMatrix,
    StitchPair,
    generate_images,
    lower_region,
    matrix_to_csv,
    mse_statistics,
    mse_table,
    per_example_mse,
    read_matrix_csv,
    reevaluate_entry,
    regime_roles,
    run_full_sweep,
    sequential_sum,
    similarity_matrix,
    summarize,
    triangle_stat,
    write_image_pairs,
    write_stats,
)
from stitchlab.optim import Hyperparams
from stitchlab.stitching import stitch_between
from stitchlab.zoo import ArchSpec, build_model, stitch_points


# ---------------------------------------------------------------------------
# triangle statistic


def test_triangle_two_by_two():
    t = triangle_stat(np.array([[1.0, 0.0], [1.0, 1.0]]))
    assert (t.lower_mean, t.strict_upper_mean, t.gap) == (1.0, 0.0, 1.0)


def test_triangle_constant_has_zero_gap():
    assert triangle_stat(np.full((5, 7), 0.5)).gap == 0.0


def test_triangle_rejects_holes():
    m = np.full((3, 3), 0.5)
    m[0, 2] = m[1, 0] = np.nan
    with pytest.raises(IncompleteMatrixError) as e:
        triangle_stat(m)
    assert e.value.holes == [(0, 2), (1, 0)]


def test_triangle_empty_region_is_nan():
    t = triangle_stat(np.array([[0.3, 0.6]]))
    assert t.lower_mean == pytest.approx(0.45) and math.isnan(t.strict_upper_mean)


@pytest.mark.parametrize("I", range(1, 9))
@pytest.mark.parametrize("J", range(1, 9))
def test_lower_region_matches_rational_rule(I, J):
    mask = lower_region(I + 1, J + 1)
    for i in range(I + 1):
        for j in range(J + 1):
            assert mask[i, j] == (Fraction(j, J) <= Fraction(i, I))
    # the diagonal corners always belong to the lower region
    assert mask[0, 0] and mask[I, J]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9).flatmap(lambda r: st.integers(2, 9).flatmap(
    lambda c: arrays(np.float64, (r, c), elements=st.floats(0, 1)))))
def test_triangle_means_match_enumeration(m):
    I, J = m.shape[0] - 1, m.shape[1] - 1
    lo = [m[i, j] for i in range(I + 1) for j in range(J + 1) if j * I <= i * J]
    hi = [m[i, j] for i in range(I + 1) for j in range(J + 1) if j * I > i * J]
    t = triangle_stat(m)
    assert t.lower_mean == pytest.approx(sum(lo) / len(lo))
    assert t.strict_upper_mean == pytest.approx(sum(hi) / len(hi))


# ---------------------------------------------------------------------------
# matrices and CSV


def test_grid_dimensions_from_block_counts():
    a, b = ArchSpec.parse("R1112"), ArchSpec.parse("R2221")
    m = SimilarityMatrix(a, b, "trained_trained", np.zeros((6, 8)))
    assert m.entries.shape == (len(stitch_points(a)), len(stitch_points(b))) == (6, 8)
    with pytest.raises(ValueError):
        SimilarityMatrix(a, b, "trained_trained", np.zeros((5, 8)))


def test_matrix_rejects_out_of_range():
    a = ArchSpec.parse("R1111")
    with pytest.raises(ValueError):
        SimilarityMatrix(a, a, "trained_trained", np.full((5, 5), 1.5))


def test_matrix_csv_roundtrip(tmp_path):
    e = np.round(np.random.default_rng(0).random((5, 6)), 4)
    e[2, 3] = np.nan
    p = tmp_path / "m.csv"
    p.write_text(matrix_to_csv(e))
    back = read_matrix_csv(p)
    assert np.array_equal(np.isnan(back), np.isnan(e))
    assert np.array_equal(back[~np.isnan(back)], e[~np.isnan(e)])
    lines = p.read_text().splitlines()
    assert lines[0] == "i\\j,0,1,2,3,4,5"
    assert lines[3].split(",")[4] == "NA"


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("i\\j,0,x\n0,0.1,0.2\n", 1),
    ("i\\j,0,1\n0,0.1,0.2\n1,0.5\n", 3),
    ("i\\j,0,1\n0,0.1,abc\n", 2),
    ("i\\j,0,1\n0,0.1,0.2\n1,0.3,1.7\n", 3),
    ("i\\j,0,1\n5,0.1,0.2\n", 2),
    ("i\\j,0,1\n", 2),
])
def test_matrix_csv_errors_carry_line(tmp_path, text, line):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(MatrixParseError) as e:
        read_matrix_csv(p)
    assert e.value.line == line
    assert str(e.value).startswith(f"line {line}:")


# ---------------------------------------------------------------------------
# sweeps


@pytest.fixture(scope="module")
def tiny_data():
    return make_synthetic(32, 0), make_synthetic(16, 1, role="test")


TINY_HP = Hyperparams(batch_size=16, epochs=1, augment="none")


def test_similarity_matrix_resumes(tmp_path, tiny_data, random_r1111):
    receiver = build_model(ArchSpec.parse("R1111"), 1)
    m = similarity_matrix(random_r1111, receiver, *tiny_data, TINY_HP, out_dir=tmp_path)
    assert m.entries.shape == (5, 5) and not m.holes()
    entry = tmp_path / "entries" / m.stem / "3_1"
    manifest = json.loads((entry / "manifest.json").read_text())
    assert manifest["extra"]["status"] == "ok" and manifest["i"] == 3 and manifest["j"] == 1
    # rerun reads everything back
    again = similarity_matrix(random_r1111, receiver, *tiny_data, TINY_HP, out_dir=tmp_path)
    assert np.array_equal(again.entries, m.entries)
    # a removed entry is retrained to the same value (training is seeded per entry)
    shutil.rmtree(entry)
    third = similarity_matrix(random_r1111, receiver, *tiny_data, TINY_HP, out_dir=tmp_path)
    assert np.array_equal(third.entries, m.entries)
    assert reevaluate_entry(entry, random_r1111, receiver, tiny_data[1]) == m.entries[3, 1]
    assert not list((tmp_path / "entries" / m.stem).glob(".*partial"))


def test_failed_entries_become_holes(tmp_path, tiny_data, random_r1111):
    a = ArchSpec.parse("R1111")
    hp = TINY_HP.replace(learning_rate=1e38, warmup_fraction=0.0, epochs=2)
    m = similarity_matrix(random_r1111, random_r1111, *tiny_data, hp, out_dir=tmp_path)
    assert np.isnan(m.entries).all()
    assert len(m.notes) == 25
    assert "NA" in m.to_csv()
    with pytest.raises(IncompleteMatrixError):
        triangle_stat(m)
    entry = tmp_path / "entries" / m.stem / "0_0" / "manifest.json"
    assert json.loads(entry.read_text())["extra"]["status"] == "failed"


def test_full_sweep_needs_trained_checkpoints(tmp_path, tiny_data):
    archs = [ArchSpec.parse("R1111")]
    with pytest.raises(MissingCheckpointsError) as e:
        run_full_sweep(archs, ["trained_trained"], PROFILES["smoke"], tmp_path / "zoo", tmp_path / "out", *tiny_data)
    assert len(e.value.missing) == 2 and "R1111_s0_trained" in str(e.value)


def test_full_sweep_random_regime_without_zoo(tmp_path, tiny_data):
    archs = [ArchSpec.parse("R1111")]
    (m,) = run_full_sweep(archs, ["random_random"], PROFILES["smoke"], tmp_path / "zoo", tmp_path / "out",
                          *tiny_data)
    assert (tmp_path / "out" / "matrices" / "R1111__R1111__random_random.csv").is_file()
    assert m.entries.shape == (5, 5)


def test_regime_roles():
    assert regime_roles("random_sender") == ("random_control", "trained")
    with pytest.raises(ValueError):
        regime_roles("both")


def test_smoke_profile_sizes():
    train, test = PROFILES["smoke"].load()
    assert (train.size, test.size) == (128, 64)
    assert PROFILES["paper"].vanilla_hparams().epochs == 4
    assert PROFILES["paper"].similarity_hparams().epochs == 30


# ---------------------------------------------------------------------------
# MSE statistics


class ToyNet:
    """Duck-typed stitched network whose representations are small deterministic functions of the input."""

    def __init__(self, i, j, scale, shift, shape):
        self.i, self.j = i, j
        self.scale, self.shift, self.shape = scale, shift, shape
        self.sender = self.receiver = type("H", (), {"device": torch.device("cpu"), "label": "toy"})()

    def eval(self):
        return self

    def _cut(self, x):
        c, h, w = self.shape
        return x[:, :c, :h, :w]

    def expected(self, x):
        return torch.tanh(self._cut(x))

    def provided(self, x):
        return torch.tanh(self._cut(x)) * self.scale + self.shift


def brute_force(pairs, xs):
    """Independent recomputation with plain Python floats and explicit loops."""
    values = {p: [] for p in ("EV", "ES", "SV")}
    for vanilla, similar in pairs:
        for x in xs:
            e = vanilla.expected(x[None]).double().flatten().tolist()
            v = vanilla.provided(x[None]).double().flatten().tolist()
            s = similar.provided(x[None]).double().flatten().tolist()
            for name, a, b in (("EV", e, v), ("ES", e, s), ("SV", s, v)):
                acc = 0.0
                for p, q in zip(a, b):
                    acc += (p - q) * (p - q)
                values[name].append(acc / len(a))
    out = {}
    for name, vals in values.items():
        total = 0.0
        for v in vals:
            total += v
        mean = total / len(vals)
        sq = 0.0
        for v in vals:
            sq += (v - mean) ** 2
        out[(name, "min")] = min(vals)
        out[(name, "mean")] = mean
        out[(name, "max")] = max(vals)
        out[(name, "std")] = math.sqrt(sq / len(vals))
    return out


def toy_pairs():
    return [
        StitchPair(ToyNet(1, 1, 1.3, 0.1, (2, 4, 4)), ToyNet(1, 1, 0.9, 0.05, (2, 4, 4))),
        StitchPair(ToyNet(2, 0, 0.5, -0.2, (4, 4, 4)), ToyNet(2, 0, 1.1, 0.0, (4, 4, 4))),
    ]


def test_mse_statistics_match_brute_force():
    data = make_synthetic(2, 5, role="test")
    xs = data.batch([0, 1]).images
    pairs = toy_pairs()
    tables = mse_statistics(pairs, data)
    full = brute_force([(p.vanilla, p.similarity) for p in pairs], xs)
    diag = brute_force([(pairs[0].vanilla, pairs[0].similarity)], xs)
    assert tables["all_stitches"].values == full
    assert tables["diagonals"].values == diag
    assert tables["all_stitches"].count == 4 and tables["diagonals"].count == 2


def test_mse_table_csv_layout(tmp_path):
    data = make_synthetic(2, 5, role="test")
    paths = write_stats(mse_statistics(toy_pairs(), data), tmp_path)
    assert sorted(p.name for p in paths) == ["mse_all_stitches.csv", "mse_diagonals.csv"]
    header, row = paths[0].read_text().splitlines()
    assert header.split(",") == MseStatsTable.header()
    assert header.startswith("min_EV,min_ES,min_SV,mean_EV") and len(row.split(",")) == 12


def test_identical_tensors_have_zero_mse():
    x = np.random.default_rng(0).normal(size=(3, 2, 4, 4))
    assert np.array_equal(per_example_mse(x, x.copy()), np.zeros(3))


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        per_example_mse(np.zeros((2, 4)), np.zeros((2, 5)))


def test_stitch_pair_must_agree(random_r1111):
    a = stitch_between(random_r1111, 1, random_r1111, 1)
    b = stitch_between(random_r1111, 1, random_r1111, 2)
    with pytest.raises(ValueError):
        StitchPair(a, b)
    assert StitchPair(a, stitch_between(random_r1111, 1, random_r1111, 1)).is_diagonal


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e3, 1e3)))
def test_sequential_sum_is_left_to_right(v):
    acc = 0.0
    for x in v:
        acc += x
    assert float(sequential_sum(v)) == acc


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e3)))
def test_summary_ordering(v):
    s = summarize(v)
    assert s["min"] <= s["mean"] * (1 + 1e-12) + 1e-12
    assert s["mean"] <= s["max"] * (1 + 1e-12) + 1e-12
    assert s["std"] >= 0
    assert s["std"] == pytest.approx(float(np.std(v)), rel=1e-9, abs=1e-9)


def test_mse_table_empty_scope_is_nan():
    t = mse_table([], "diagonals")
    assert t.count == 0 and all(math.isnan(v) for v in t.row())


# ---------------------------------------------------------------------------
# image generation


@pytest.mark.parametrize("i", [0, 4])
def test_generate_images(tmp_path, tiny_data, random_r1111, i):
    pairs = generate_images(random_r1111, i, tiny_data[0], TINY_HP, tiny_data[1], count=3)
    assert len(pairs) == 3
    for gen, orig in pairs:
        assert gen.shape == orig.shape == (32, 32, 3) and gen.dtype == np.uint8
    paths = write_image_pairs(pairs, random_r1111, i, tmp_path)
    assert [p.name for p in paths] == [f"R1111_{i}_{n}.png" for n in range(3)]


def test_last_point_uses_eightfold_upsample(random_r1111):
    net = stitch_between(random_r1111, 4, random_r1111, -1)
    assert (net.stitch.spec.kind, net.stitch.spec.factor, net.stitch.spec.out_channels) == ("upsample_project", 8, 3)
