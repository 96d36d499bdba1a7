import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossgee.design import (
    CrossoverLayout,
    Dataset,
    ModelFormula,
    build_design_matrix,
    expand_carryover,
    natural_key,
)
from crossgee.errors import ConfigError, DuplicateError, RankError, SchemaError

from conftest import crossover_dataset

CATTLE = "intercept, baseline, time(2), period, treatment, carryover(1), carryover(1)*time(1)"


def test_carryover_examples():
    ab = expand_carryover(CrossoverLayout.from_strings(["AB"]), 1)["AB"]
    assert ab == [(None,), ("A",)]
    abc = expand_carryover(CrossoverLayout.from_strings(["ABC"]), 2)["ABC"]
    assert abc[2] == ("B", "A")
    assert expand_carryover(CrossoverLayout.from_strings(["ABC"]), 1)["ABC"][0] == (None,)


def test_carryover_order_must_be_below_periods():
    with pytest.raises(ConfigError):
        expand_carryover(CrossoverLayout.from_strings(["AB", "BA"]), 2)


def test_layout_counts():
    lay = CrossoverLayout.from_strings(["ABC", "BCA"], {"ABC": 3, "BCA": 4}, L=5)
    assert (lay.S, lay.P, lay.q, lay.n) == (2, 3, 3, 7)
    with pytest.raises(ConfigError):
        CrossoverLayout({"AB": ("A", "B"), "A": ("A",)}, ("A", "B"), {})
    with pytest.raises(ConfigError):
        CrossoverLayout({"AB": ("A", "C")}, ("A", "B"), {})


def test_intercept_only():
    ds = crossover_dataset(n_per_seq=1, sequences=("AB",), L=3)
    X, labels = build_design_matrix(ds, ModelFormula.parse("intercept"))
    assert ds.N == 6
    np.testing.assert_array_equal(X, np.ones((6, 1)))
    assert labels == ["intercept"]


def test_treatment_dummy():
    ds = crossover_dataset(n_per_seq=2)
    X, labels = build_design_matrix(ds, ModelFormula.parse("treatment", {"treatment": "A"}))
    assert labels == ["treatment[B]"]
    np.testing.assert_array_equal(X[:, 0], (ds.treatment == "B").astype(float))


def test_cattle_formula_has_eight_columns():
    ds = crossover_dataset(n_per_seq=4, L=3, baseline=True)
    X, labels = build_design_matrix(ds, ModelFormula.parse(CATTLE, {"treatment": "B"}))
    assert X.shape == (ds.N, 8)
    assert labels == [
        "intercept", "baseline", "time", "time^2", "period[2]", "treatment[A]", "carryover1[A]", "carryover1[A]:time",
    ]


def test_latin_square_aliasing_reported():
    ds = crossover_dataset(n_per_seq=2, sequences=("ABC", "BCA", "CAB"), L=1)
    with pytest.raises(RankError) as info:
        build_design_matrix(ds, ModelFormula.parse("intercept, period, treatment, sequence, carryover(1), sequence*period"))
    assert info.value.aliased


def test_sequence_effect_aliased_in_two_by_two_with_carryover():
    ds = crossover_dataset(n_per_seq=2)
    with pytest.raises(RankError, match="sequence"):
        build_design_matrix(ds, ModelFormula.parse("intercept, period, treatment, carryover(1), sequence"))


@pytest.mark.parametrize("seqs", [("AB", "BA"), ("ABC", "BCA"), ("ABC", "ACB", "BAC")])
def test_carryover_zero_in_first_period(seqs):
    ds = crossover_dataset(n_per_seq=2, sequences=seqs, L=2)
    X, labels = build_design_matrix(ds, ModelFormula.parse("carryover(1)"), check_rank=False)
    assert np.all(X[ds.period_index == 0] == 0)


@given(st.integers(1, 4), st.sampled_from([("AB", "BA"), ("ABC", "BCA")]), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_row_count(n, seqs, L):
    ds = crossover_dataset(n_per_seq=n, sequences=seqs, L=L)
    assert ds.N == ds.n * ds.P * ds.L
    assert ds.balanced


@given(st.randoms(use_true_random=False))
@settings(max_examples=25, deadline=None)
def test_permutation_invariance(rnd):
    ds = crossover_dataset(n_per_seq=3, L=3, baseline=True)
    order = list(range(ds.N))
    rnd.shuffle(order)
    perm = Dataset(
        ds.subject[order], ds.period[order], ds.occasion[order], ds.response[order],
        ds.sequence[order], ds.treatment[order], baseline=ds.baseline[order],
    )
    f = ModelFormula.parse(CATTLE, {"treatment": "B"})
    X1, l1 = build_design_matrix(ds, f)
    X2, l2 = build_design_matrix(perm, f)
    assert l1 == l2
    np.testing.assert_array_equal(X1, X2)
    np.testing.assert_array_equal(ds.response, perm.response)


def test_time_is_centred_within_period():
    ds = crossover_dataset(n_per_seq=1, L=4)
    t = ds.centered_time()
    key = ds.subject_index * ds.P + ds.period_index
    for k in np.unique(key):
        assert abs(t[key == k].sum()) < 1e-12


def test_natural_subject_order():
    assert sorted(["s10", "s2", "s1"], key=natural_key) == ["s1", "s2", "s10"]


def test_duplicate_cell_rejected():
    with pytest.raises(DuplicateError):
        Dataset(["a", "a"], [1, 1], [1, 1], [0.0, 1.0], ["AB", "AB"], ["A", "A"])


def test_subject_in_two_sequences_rejected():
    with pytest.raises(SchemaError):
        Dataset(["a", "a"], [1, 2], [1, 1], [0.0, 1.0], ["AB", "BA"], ["A", "B"])


def test_unknown_term_and_reference():
    with pytest.raises(ConfigError):
        ModelFormula.parse("intercept, wobble")
    ds = crossover_dataset()
    with pytest.raises(ConfigError):
        build_design_matrix(ds, ModelFormula.parse("treatment", {"treatment": "Z"}))
    with pytest.raises(ConfigError):
        build_design_matrix(ds, ModelFormula.parse("baseline"))


def test_unbalanced_dataset_flagged():
    ds = crossover_dataset(n_per_seq=2, L=2)
    keep = np.arange(ds.N) != 0
    short = Dataset(ds.subject[keep], ds.period[keep], ds.occasion[keep], ds.response[keep],
                    ds.sequence[keep], ds.treatment[keep])
    assert not short.balanced
