import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwcrf.errors import ArgumentError, BudgetExceededError, FormatError
from cwcrf.selection import (
    IouMatrix,
    brute_force_select,
    greedy_select,
    load_fixture,
    load_iou_csv,
    oracle_miou,
    write_iou_csv,
)

EXPERTS = ["UperNet+ConvNeXt", "UperNet+VMamba", "UperNet+Swin"]


@pytest.fixture(scope="module")
def loveda():
    return load_fixture("loveda_val")


def test_fixture_shapes(loveda):
    assert loveda.values.shape == (8, 7)
    assert load_fixture("vaihingen_val").class_names[-1] == "clutter"
    assert "clutter" not in load_fixture("vaihingen_val_noclutter").class_names


def test_single_network_miou(loveda):
    # printed as 53.95
    assert oracle_miou(loveda, [loveda.network_index("UperNet+ConvNeXt")]) == pytest.approx(0.53946, abs=5e-6)


def test_three_expert_oracle(loveda):
    expected = np.mean([55.58, 66.08, 56.89, 71.31, 33.68, 44.14, 55.88]) / 100
    idx = [loveda.network_index(n) for n in EXPERTS]
    assert oracle_miou(loveda, idx) == pytest.approx(expected, abs=1e-12)
    assert oracle_miou(loveda, idx) == pytest.approx(0.54794, abs=1e-4)


def test_identical_rows():
    m = np.tile([0.2, 0.4, 0.9], (3, 1))
    assert oracle_miou(m, [0, 1, 2]) == pytest.approx(0.5)


def test_oracle_errors(loveda):
    with pytest.raises(ArgumentError):
        oracle_miou(loveda, [])
    with pytest.raises(ArgumentError):
        oracle_miou(loveda, [8])


def test_greedy_loveda_order(loveda):
    res = greedy_select(loveda, 3)
    assert res.names(loveda) == EXPERTS
    assert list(res.per_step_miou) == sorted(res.per_step_miou)


@pytest.mark.parametrize("name", ["vaihingen_val", "vaihingen_val_noclutter"])
def test_greedy_vaihingen_set(name):
    m = load_fixture(name)
    assert set(greedy_select(m, 3).names(m)) == set(EXPERTS)


def test_greedy_k_equals_n(loveda):
    res = greedy_select(loveda, 8)
    assert sorted(res.ordered_indices) == list(range(8))
    assert res.oracle_miou == pytest.approx(loveda.values.max(axis=0).mean())


@pytest.mark.parametrize("k", [0, 9, -1])
def test_greedy_k_out_of_range(loveda, k):
    with pytest.raises(ArgumentError):
        greedy_select(loveda, k)


def test_brute_force_loveda(loveda):
    res = brute_force_select(loveda, 3)
    # independent enumeration of all 56 subsets
    best = max(
        (np.mean(loveda.values[list(s)].max(axis=0)), s) for s in itertools.combinations(range(8), 3)
    )
    assert res.oracle_miou == pytest.approx(best[0], abs=1e-12)
    assert res.oracle_miou >= greedy_select(loveda, 3).oracle_miou


def test_brute_force_k1_is_best_row(loveda):
    res = brute_force_select(loveda, 1)
    assert res.names(loveda) == ["UperNet+ConvNeXt"]


def test_brute_force_k_equals_n(loveda):
    assert brute_force_select(loveda, 8).oracle_miou == greedy_select(loveda, 8).oracle_miou


def test_brute_force_budget():
    m = np.random.default_rng(0).random((30, 3))
    with pytest.raises(BudgetExceededError):
        brute_force_select(m, 15)


def test_brute_force_tie_lexicographic():
    m = np.array([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    assert brute_force_select(m, 2).ordered_indices == (0, 1)


def test_greedy_tie_lowest_index():
    m = np.array([[0.3, 0.6], [0.6, 0.3], [0.3, 0.6]])
    assert greedy_select(m, 1).ordered_indices == (0,)


def _random_matrix(rng):
    n = int(rng.integers(1, 9))
    c = int(rng.integers(1, 9))
    return rng.random((n, c))


def test_sandwich_seeded():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        m = _random_matrix(rng)
        k = int(rng.integers(1, min(4, m.shape[0]) + 1))
        single = m.mean(axis=1).max()
        g = greedy_select(m, k).oracle_miou
        b = brute_force_select(m, k).oracle_miou
        assert single <= g + 1e-15
        assert g <= b


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_scale_equivariance(seed, s):
    rng = np.random.default_rng(seed)
    m = _random_matrix(rng)
    k = int(rng.integers(1, m.shape[0] + 1))
    assert greedy_select(m * s, k).ordered_indices == greedy_select(m, k).ordered_indices


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    # continuous random values: ties have probability zero
    m = _random_matrix(rng)
    k = int(rng.integers(1, m.shape[0] + 1))
    perm = rng.permutation(m.shape[0])
    res = greedy_select(m, k)
    permuted = greedy_select(m[perm], k).ordered_indices
    # once a step adds nothing, every zero-gain candidate ties and index order decides
    steps = (0.0,) + res.per_step_miou
    n = next((i for i in range(k) if steps[i + 1] <= steps[i]), k)
    assert tuple(int(perm[i]) for i in permuted)[:n] == res.ordered_indices[:n]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_first_pick_best_row_and_monotone(seed):
    rng = np.random.default_rng(seed)
    m = _random_matrix(rng)
    res = greedy_select(m, m.shape[0])
    assert res.ordered_indices[0] == int(np.argmax(m.mean(axis=1)))
    assert all(a <= b for a, b in zip(res.per_step_miou, res.per_step_miou[1:]))


def test_csv_units_and_roundtrip(tmp_path, loveda):
    write_iou_csv(tmp_path / "m.csv", loveda, units="fraction")
    back = load_iou_csv(tmp_path / "m.csv", units="fraction")
    assert back.network_names == loveda.network_names
    assert np.array_equal(back.values, loveda.values)


def test_csv_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("network,a,b\nx,1\n")
    with pytest.raises(FormatError):
        load_iou_csv(tmp_path / "bad.csv")
    (tmp_path / "pct.csv").write_text("network,a\nx,150\n")
    with pytest.raises(ArgumentError):
        load_iou_csv(tmp_path / "pct.csv")


def test_matrix_invariants():
    with pytest.raises(ArgumentError):
        IouMatrix(["a", "a"], ["c"], [[0.1], [0.2]])
    m = IouMatrix(["a", "b"], ["x", "clutter"], [[0.1, 0.2], [0.3, 0.4]])
    assert m.without_classes(["clutter"]).class_names == ("x",)
