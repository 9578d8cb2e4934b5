import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bottleneck_em.model import (
    HIDDEN,
    Cpt,
    ModelError,
    NetworkStructure,
    VariableSpec,
    build_model,
    format_cpts,
    format_structure,
    hierarchy,
    load_model,
    log_joint,
    naive_bayes,
    parse_cpts,
    parse_structure,
    random_model,
    sample_dataset,
    save_model,
)


def chain(back_edge=False):
    vs = (VariableSpec("A", 2), VariableSpec("B", 2), VariableSpec("C", 2))
    parents = (("C",) if back_edge else (), ("A",), ("B",))
    return NetworkStructure(vs, parents)


def test_uniform_two_node_model_is_valid():
    s = NetworkStructure((VariableSpec("A", 2), VariableSpec("B", 2)), ((), ("A",)))
    m = build_model(s, [Cpt("A", [0.5, 0.5]), Cpt("B", [[0.5, 0.5], [0.5, 0.5]])])
    assert m.cpt("B").shape == (2, 2)


def test_non_normalized_row_rejected():
    s = NetworkStructure((VariableSpec("A", 2),), ((),))
    with pytest.raises(ModelError, match="non-normalized row"):
        build_model(s, [Cpt("A", [0.6, 0.6])])


def test_cycle_detected():
    with pytest.raises(ModelError, match="cycle detected"):
        chain(back_edge=True).topological_order()


def test_structure_validation_errors():
    with pytest.raises(ModelError):
        VariableSpec("H", 1, HIDDEN)
    with pytest.raises(ModelError):
        NetworkStructure((VariableSpec("A", 2), VariableSpec("A", 2)), ((), ()))
    with pytest.raises(ModelError):
        NetworkStructure((VariableSpec("A", 2),), (("Z",),))


def test_cpt_errors():
    s = chain()
    good = [Cpt("A", [0.5, 0.5]), Cpt("B", [[1, 0], [0, 1]]), Cpt("C", [[1, 0], [0, 1]])]
    build_model(s, good)
    with pytest.raises(ModelError, match="shape mismatch"):
        build_model(s, [good[0], Cpt("B", [0.5, 0.5]), good[2]])
    with pytest.raises(ModelError):
        build_model(s, good[:2])
    with pytest.raises(ModelError):
        build_model(s, [Cpt("A", [1.5, -0.5]), good[1], good[2]])


def test_log_joint_uniform_naive_bayes():
    s = naive_bayes(2, 2)
    m = build_model(s, [Cpt("T", [0.5, 0.5]), Cpt("X0", [[0.5, 0.5]] * 2), Cpt("X1", [[0.5, 0.5]] * 2)])
    for a in ({"T": 0, "X0": 1, "X1": 0}, {"T": 1, "X0": 1, "X1": 1}):
        assert log_joint(m, a) == pytest.approx(-3 * math.log(2), abs=1e-15)


def test_log_joint_zero_entry_is_minus_inf():
    s = chain()
    m = build_model(s, [Cpt("A", [1.0, 0.0]), Cpt("B", [[1, 0], [0, 1]]), Cpt("C", [[1, 0], [0, 1]])])
    assert log_joint(m, {"A": 1, "B": 1, "C": 1}) == -math.inf


def test_log_joint_hand_arithmetic():
    s = chain()
    m = build_model(s, [Cpt("A", [0.3, 0.7]),
                        Cpt("B", [[0.9, 0.1], [0.2, 0.8]]),
                        Cpt("C", [[0.6, 0.4], [0.25, 0.75]])])
    # A=1, B=0, C=1: 0.7 * 0.2 * 0.4
    assert log_joint(m, {"A": 1, "B": 0, "C": 1}) == pytest.approx(math.log(0.7 * 0.2 * 0.4), abs=1e-14)


def test_multi_parent_row_order():
    vs = (VariableSpec("A", 2), VariableSpec("B", 3), VariableSpec("C", 2))
    s = NetworkStructure(vs, ((), (), ("A", "B")))
    table = np.arange(1, 13, dtype=float).reshape(6, 2)
    table /= table.sum(axis=1, keepdims=True)
    m = build_model(s, [Cpt("A", [0.5, 0.5]), Cpt("B", [1 / 3] * 3), Cpt("C", table)])
    # row index = a * 3 + b
    got = log_joint(m, {"A": 1, "B": 2, "C": 0})
    want = math.log(0.5) + math.log(1 / 3) + math.log(table[5, 0])
    assert got == pytest.approx(want, abs=1e-14)


def test_deterministic_sampling():
    s = chain()
    m = build_model(s, [Cpt("A", [0.0, 1.0]), Cpt("B", [[1, 0], [1, 0]]), Cpt("C", [[0, 1], [0, 1]])])
    d = sample_dataset(m, 50, 3)
    assert np.all(d.values == np.array([1, 0, 1]))


def test_sampling_same_seed_identical_and_drops_hidden():
    m = random_model(naive_bayes(4, 3), 5)
    a, b = sample_dataset(m, 200, 9), sample_dataset(m, 200, 9)
    assert np.array_equal(a.values, b.values)
    assert a.names == ["X0", "X1", "X2", "X3"]


def test_uniform_leaf_frequency():
    s = NetworkStructure((VariableSpec("A", 2),), ((),))
    m = build_model(s, [Cpt("A", [0.5, 0.5])])
    d = sample_dataset(m, 10000, 1)
    assert abs(np.mean(d.values[:, 0] == 0) - 0.5) < 0.02


def test_presets_shape():
    s = hierarchy(3, 2)
    assert len(s.hidden) == 5 and len(s.observed) == 16
    s4 = hierarchy(4, 2)
    assert len(s4.hidden) == 21
    nb = naive_bayes(6, 4, leaf_card=3)
    assert nb.cards == (4,) + (3,) * 6


def test_text_round_trip(tmp_path):
    vs = (VariableSpec("H", 3, HIDDEN), VariableSpec("X", 3, states=("lo", "mid", "hi")))
    s = NetworkStructure(vs, ((), ("H",)))
    m = random_model(s, 2)
    assert parse_structure(format_structure(s)) == s
    cpts = parse_cpts(format_cpts(m))
    for c in cpts:
        np.testing.assert_array_equal(c.table, m.cpt(c.variable))
    save_model(m, tmp_path / "s.txt", tmp_path / "c.txt")
    m2 = load_model(tmp_path / "s.txt", tmp_path / "c.txt")
    assert m2.structure.variables[1].labels == ("lo", "mid", "hi")


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ModelError, match="line 2"):
        parse_structure("A 2 observed\nB x observed\n")
    with pytest.raises(ModelError, match="line 1"):
        parse_structure("B 2 observed A\nA 2 observed\n")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), card=st.integers(2, 4), leaves=st.integers(1, 4))
def test_random_model_rows_normalized(seed, card, leaves):
    m = random_model(naive_bayes(leaves, card), seed, concentration=0.3)
    for c in m.cpts:
        np.testing.assert_allclose(c.table.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(c.table >= 0)
