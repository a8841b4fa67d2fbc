import numpy as np
import pytest
from hypothesis import given, strategies as st

from cvfm.errors import DataError, StructuralError
from cvfm.metrics import (MetricReport, append_reports, duplicate_fraction, marginal_tv, property_mae, sliced_w2,
                          validity_rate)
from cvfm.io import read_csv
from cvfm.symmetry import prior_sample, random_rotation
from cvfm.training import make_dataset


def test_sliced_w2_identity_and_diracs(rng):
    a = rng.normal(size=(100, 3))
    assert sliced_w2(a, a, 16, rng) == 0.0
    assert np.isclose(sliced_w2(np.zeros((10, 1)), np.full((7, 1), 2.5), 4, rng), 2.5)


def test_sliced_w2_gaussian_floor():
    a = np.random.default_rng(1).normal(size=(4000, 2))
    b = np.random.default_rng(2).normal(size=(4000, 2))
    assert sliced_w2(a, b, 64, np.random.default_rng(3)) <= 0.08


def test_sliced_w2_detects_shift():
    a = np.random.default_rng(1).normal(size=(2000, 2))
    assert sliced_w2(a, a + [1.0, 0.0], 256, np.random.default_rng(0)) == pytest.approx(2 / np.pi, rel=0.1)


@given(st.integers(0, 10_000))
def test_sliced_w2_symmetry_and_invariances(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(40, 3)) + 0.3
    d = sliced_w2(a, b, 8, np.random.default_rng(0))
    assert d == sliced_w2(b, a, 8, np.random.default_rng(0))
    assert abs(d - sliced_w2(a[::-1], rng.permutation(b), 8, np.random.default_rng(0))) <= 1e-9
    r = random_rotation(3, rng)
    assert abs(d - sliced_w2(a @ r.T, b @ r.T, 8, np.random.default_rng(0))) <= 1e-9


def test_unequal_sizes_match_replication(rng):
    a, b = rng.normal(size=(6, 1)), rng.normal(size=(4, 1))
    # W2 between empirical measures is unchanged by replicating atoms
    d = sliced_w2(a, b, 1, rng)
    assert np.isclose(d, sliced_w2(np.repeat(a, 2, 0), np.repeat(b, 3, 0), 1, rng))


def test_sliced_w2_errors(rng):
    with pytest.raises(DataError):
        sliced_w2(np.zeros((0, 2)), np.zeros((3, 2)), 4, rng)
    with pytest.raises(StructuralError):
        sliced_w2(np.zeros((3, 2)), np.zeros((3, 3)), 4, rng)


def test_marginal_tv_examples(rng):
    uniform = np.full((2, 4), 0.25)
    assert marginal_tv(np.zeros((10, 2), dtype=int), uniform)[1] == 0.75
    cats = np.array([[0, 1], [1, 1], [2, 3], [3, 0]])
    table = np.array([[0.25] * 4, [0.25, 0.5, 0.0, 0.25]])
    assert marginal_tv(cats, table)[1] == 0.0
    ds = make_dataset({"kind": "categorical_factorized"})
    tv, worst = marginal_tv(ds.space.decode(ds.sample_x1(10_000, rng)), ds.probs)
    assert tv.shape == (8,) and worst <= 0.03


def test_marginal_tv_errors():
    with pytest.raises(StructuralError):
        marginal_tv(np.array([[4]]), np.full((1, 4), 0.25))
    with pytest.raises(StructuralError):
        marginal_tv(np.zeros((3, 2), dtype=int), np.full((3, 4), 0.25))


def test_property_mae():
    f = lambda x: x[:, 0]
    assert property_mae(np.array([[0.0], [2.0]]), f, 1.0) == 1.0
    assert property_mae(np.array([[1.0], [1.0]]), f, 1.0) == 0.0
    x = np.arange(10.0).reshape(-1, 1)
    assert property_mae(x, f, 3.0) == property_mae(x[::-1], f, 3.0)


def test_validity_rate(rng):
    ds = make_dataset({"kind": "typed_polygon_cloud"})
    x = ds.sample_x1(2000, rng)
    assert validity_rate(x, ds) == 1.0
    assert validity_rate(prior_sample(ds.prior, ds.space, rng, 10_000), ds) <= 0.01
    flipped = x[:1].copy()
    s = ds.space.block_slices()[0]
    flipped[0, s] = flipped[0, s][::-1]
    assert validity_rate(flipped, ds) == 0.0


def test_duplicates():
    assert duplicate_fraction(np.array([[0, 1], [0, 1], [1, 1], [2, 2]])) == 0.25


def test_reports(tmp_path):
    with pytest.raises(DataError):
        MetricReport("x", float("nan"), 1)
    append_reports(tmp_path / "m.csv", [MetricReport("sliced_w2", 0.1, 10, 10, 3, "abc")])
    append_reports(tmp_path / "m.csv", [MetricReport("validity_rate", 1.0, 10)])
    rows = read_csv(tmp_path / "m.csv")
    assert [r["metric"] for r in rows] == ["sliced_w2", "validity_rate"] and rows[0]["config_hash"] == "abc"
