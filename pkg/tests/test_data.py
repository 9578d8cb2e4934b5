import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bottleneck_em.data import (
    DataError,
    Dataset,
    PriorSpec,
    discretize_equal_bins,
    discretize_std_threshold,
    kfold_indices,
    load_csv,
    prior_log_term,
    smooth_counts,
    write_csv,
)
from bottleneck_em.model import HIDDEN, NetworkStructure, VariableSpec


def two_col_structure():
    vs = (VariableSpec("H", 2, HIDDEN), VariableSpec("A", 2, states=("no", "yes")),
          VariableSpec("B", 3, states=("down", "same", "up")))
    return NetworkStructure(vs, ((), ("H",), ("H",)))


def test_load_csv_small(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("A,B\nyes,up\nno,down\nyes,same\n")
    d = load_csv(p, two_col_structure())
    assert d.M == 3
    np.testing.assert_array_equal(d.values, [[1, 2], [0, 0], [1, 1]])


def test_load_csv_errors(tmp_path):
    s = two_col_structure()
    cases = {
        "empty dataset": "A,B\n",
        "unknown column": "A,C\nyes,up\n",
        "missing column": "A\nyes\n",
        "ragged": "A,B\nyes\n",
        "unknown state label": "A,B\nmaybe,up\n",
    }
    for msg, text in cases.items():
        p = tmp_path / "bad.csv"
        p.write_text(text)
        with pytest.raises(DataError, match=msg):
            load_csv(p, s)


def test_csv_round_trip(tmp_path):
    s = two_col_structure()
    rng = np.random.default_rng(0)
    vals = np.stack([rng.integers(0, 2, 40), rng.integers(0, 3, 40)], axis=1)
    d = Dataset(tuple(s.variables[k] for k in s.observed), vals)
    write_csv(d, tmp_path / "r.csv")
    back = load_csv(tmp_path / "r.csv", s)
    np.testing.assert_array_equal(back.values, vals)


def test_column_order_follows_structure(tmp_path):
    s = two_col_structure()
    p = tmp_path / "d.csv"
    p.write_text("B,A\nup,yes\n")
    d = load_csv(p, s)
    np.testing.assert_array_equal(d.for_structure(s), [[1, 2]])


def test_dataset_validation():
    v = (VariableSpec("A", 2),)
    with pytest.raises(DataError, match="empty dataset"):
        Dataset(v, np.zeros((0, 1)))
    with pytest.raises(DataError):
        Dataset(v, [[2]])


def test_equal_bins():
    np.testing.assert_array_equal(discretize_equal_bins(np.arange(10), 10), np.arange(10))
    np.testing.assert_array_equal(discretize_equal_bins([0, 255], 10), [0, 9])
    x = np.random.default_rng(1).uniform(size=100_000)
    counts = np.bincount(discretize_equal_bins(x, 10), minlength=10) / x.size
    assert np.all(np.abs(counts - 0.1) < 0.02)


def test_std_threshold():
    # mean 0, population std 1.633: -2 < -1.633 and 2 > 1.633
    assert list(discretize_std_threshold([-2, 0, 2])) == ["down", "same", "up"]
    # mean 0.2, std 0.4: only the outlier crosses a threshold
    assert list(discretize_std_threshold([0, 0, 0, 0, 1])) == ["same"] * 4 + ["up"]
    with pytest.raises(DataError, match="constant column"):
        discretize_std_threshold([3, 3, 3])
    x = np.random.default_rng(2).normal(size=501)
    lab = discretize_std_threshold(np.concatenate([x, -x]))
    assert np.sum(lab == "down") == np.sum(lab == "up")


def test_smooth_counts_examples():
    np.testing.assert_allclose(smooth_counts([3, 1], PriorSpec(0)), [0.75, 0.25])
    np.testing.assert_allclose(smooth_counts([0, 0], PriorSpec(2)), [0.5, 0.5])
    np.testing.assert_allclose(smooth_counts([3, 1], PriorSpec(1)), [0.7, 0.3])
    np.testing.assert_allclose(smooth_counts([0, 0, 0], PriorSpec(0)), [1 / 3] * 3)


@settings(max_examples=50, deadline=None)
@given(counts=st.lists(st.floats(0, 100), min_size=2, max_size=6), a=st.floats(0, 10))
def test_smooth_counts_is_distribution(counts, a):
    p = smooth_counts(counts, PriorSpec(a))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-12


def test_prior_log_term():
    logs = [np.log(np.array([[0.25, 0.75]])), np.log(np.array([[0.5, 0.25, 0.25]]))]
    want = 0.5 * (np.log(0.25) + np.log(0.75)) + (1 / 3) * (np.log(0.5) + 2 * np.log(0.25))
    assert prior_log_term(logs, PriorSpec(1.0)) == pytest.approx(want, abs=1e-14)
    assert prior_log_term(logs, PriorSpec(0.0)) == 0.0


def test_prior_spec_validation():
    with pytest.raises(DataError):
        PriorSpec(-1)


@settings(max_examples=30, deadline=None)
@given(M=st.integers(2, 60), k=st.integers(2, 10), seed=st.integers(0, 1000))
def test_kfold_is_partition(M, k, seed):
    if k > M:
        with pytest.raises(DataError):
            kfold_indices(M, k, seed)
        return
    folds = kfold_indices(M, k, seed)
    allidx = np.sort(np.concatenate(folds))
    np.testing.assert_array_equal(allidx, np.arange(M))
    assert len(folds) == k
