import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlsa.data import FeatureDataset, class_stats
from dlsa.errors import ContractError
from dlsa.metrics import (binned_confusion, cluster_purity, grouped_accuracy,
                          mcc, nmi, oracle_split, separation_accuracy)


def _stats(counts):
    labels = np.concatenate([np.full(n, i + 1) for i, n in enumerate(counts)])
    d = FeatureDataset(np.zeros((labels.size, 1), dtype=np.float32), labels, len(counts))
    return class_stats(d)


# ----- grouped accuracy -------------------------------------------------------

def test_all_correct_scores_one_everywhere():
    stats = _stats([150, 60, 5])
    labels = np.array([1, 1, 2, 2, 3, 3])
    out = grouped_accuracy(labels, labels, stats)
    assert out == {"overall": 1.0, "many": 1.0, "medium": 1.0, "few": 1.0}


def test_constant_prediction_scores_class_frequency():
    stats = _stats([150, 60, 5])
    labels = np.array([1, 1, 1, 2, 3])
    out = grouped_accuracy(np.full(5, 2), labels, stats)
    assert out["overall"] == pytest.approx(0.2)
    assert out["many"] == 0.0 and out["medium"] == 1.0 and out["few"] == 0.0


def test_hand_tally_fixture():
    stats = _stats([120, 30, 10])  # groups: many, medium, few
    labels = np.array([1, 1, 1, 1, 2, 2, 2, 3, 3, 3])
    preds = np.array([1, 1, 2, 3, 2, 2, 1, 3, 1, 3])
    out = grouped_accuracy(preds, labels, stats)
    assert out["overall"] == pytest.approx(0.6)
    assert out["many"] == pytest.approx(2 / 4)
    assert out["medium"] == pytest.approx(2 / 3)
    assert out["few"] == pytest.approx(2 / 3)


def test_empty_group_reported_as_none():
    stats = _stats([150, 140])
    out = grouped_accuracy(np.array([1, 2]), np.array([1, 2]), stats)
    assert out["few"] is None and out["medium"] is None


def test_length_mismatch_rejected():
    with pytest.raises(ContractError):
        grouped_accuracy(np.array([1, 2]), np.array([1]), _stats([10, 10]))


# ----- mcc ---------------------------------------------------------------------

def test_mcc_perfect_is_one():
    y = np.array([1, 2, 3, 1, 2, 3])
    assert mcc(y, y) == pytest.approx(1.0)


def test_mcc_constant_prediction_is_zero():
    assert mcc(np.full(6, 1), np.array([1, 1, 2, 2, 3, 3])) == 0.0


def test_mcc_hand_confusion_value():
    labels = np.array([1, 1, 1, 2, 2, 3])
    preds = np.array([1, 2, 1, 2, 2, 3])
    assert mcc(preds, labels) == pytest.approx(17 / 22, rel=1e-12)


def test_mcc_symmetric_under_class_permutation():
    rng = np.random.default_rng(0)
    labels = rng.integers(1, 5, size=60)
    preds = rng.integers(1, 5, size=60)
    perm = np.array([3, 4, 1, 2])
    assert mcc(perm[preds - 1], perm[labels - 1]) == pytest.approx(mcc(preds, labels), rel=1e-12)


# ----- nmi ----------------------------------------------------------------------

def test_nmi_identical_is_one():
    a = np.array([1, 1, 2, 3, 3, 3])
    assert nmi(a, a) == pytest.approx(1.0, rel=1e-12)


def test_nmi_invariant_to_renaming():
    a = np.array([1, 1, 2, 3, 3, 3])
    renamed = np.array([7, 7, 5, 9, 9, 9])
    assert nmi(a, renamed) == pytest.approx(1.0, rel=1e-12)
    rng = np.random.default_rng(1)
    b = rng.integers(1, 4, size=6)
    assert nmi(a, b) == pytest.approx(nmi(renamed, b), rel=1e-12)


def test_nmi_hand_value_both_normalizations():
    a = np.array([1, 1, 2, 2])
    b = np.array([1, 1, 1, 2])
    assert nmi(a, b) == pytest.approx(0.3455920299442113, rel=1e-12)
    assert nmi(a, b, normalization="arithmetic") == pytest.approx(0.3437110184854508, rel=1e-12)


def test_nmi_independent_labelings_near_zero():
    rng = np.random.default_rng(2)
    a = rng.integers(1, 5, size=10_000)
    b = rng.integers(1, 5, size=10_000)
    assert nmi(a, b) < 0.05


def test_nmi_constant_labeling_edge_cases():
    const = np.full(8, 3)
    varying = np.array([1, 2] * 4)
    assert nmi(const, const) == 1.0
    assert nmi(const, varying) == 0.0
    with pytest.raises(ContractError):
        nmi(const, varying, normalization="harmonic")


# ----- purity -------------------------------------------------------------------

def test_purity_majority_fraction():
    ids, purities, mean = cluster_purity(np.array([1, 1, 1]), np.array([5, 5, 6]))
    np.testing.assert_array_equal(ids, [1])
    assert purities[0] == pytest.approx(2 / 3)
    assert mean == pytest.approx(2 / 3)


def test_purity_single_class_clusters_score_one():
    _, _, mean = cluster_purity(np.array([1, 1, 2, 2, 3]), np.array([4, 4, 2, 2, 9]))
    assert mean == 1.0


def test_purity_one_big_balanced_cluster():
    labels = np.repeat(np.arange(1, 6), 10)
    _, _, mean = cluster_purity(np.ones(50, dtype=int), labels)
    assert mean == pytest.approx(1 / 5)


def test_purity_weighted_mean():
    # cluster 1: {a,a} purity 1 size 2; cluster 2: {a,b,b,c} purity 1/2 size 4
    assignments = np.array([1, 1, 2, 2, 2, 2])
    labels = np.array([1, 1, 1, 2, 2, 3])
    _, _, mean = cluster_purity(assignments, labels)
    assert mean == pytest.approx((2 * 1.0 + 4 * 0.5) / 6)


@settings(deadline=None, max_examples=80)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=60))
def test_purity_never_below_majority_class_floor(pairs):
    assignments = np.array([a for a, _ in pairs])
    labels = np.array([l for _, l in pairs])
    _, _, mean = cluster_purity(assignments, labels)
    floor = np.bincount(labels).max() / labels.size
    assert mean >= floor - 1e-12


# ----- separation ----------------------------------------------------------------

def test_separation_all_tail_is_one():
    filtered = np.array([True, True, False])
    head = np.array([False, False, True])
    assert separation_accuracy(filtered, head) == 1.0


def test_separation_random_mask_near_half():
    rng = np.random.default_rng(3)
    head = np.arange(10_000) < 5_000
    filtered = rng.random(10_000) < 0.5
    assert separation_accuracy(filtered, head) == pytest.approx(0.5, abs=0.02)


def test_separation_none_when_nothing_filtered():
    assert separation_accuracy(np.zeros(5, bool), np.ones(5, bool)) is None


# ----- binned confusion ------------------------------------------------------------

def test_perfect_predictions_give_zero_matrix():
    labels = np.array([1, 2, 3, 4, 5, 6])
    out = binned_confusion(labels, labels, counts=np.array([60, 50, 40, 30, 20, 10]), bins=3)
    np.testing.assert_array_equal(out, np.zeros((3, 3)))


def test_total_mass_equals_misclassified_count():
    rng = np.random.default_rng(4)
    labels = rng.integers(1, 9, size=500)
    preds = rng.integers(1, 9, size=500)
    counts = np.bincount(labels, minlength=9)[1:]
    out = binned_confusion(preds, labels, counts, bins=4)
    assert out.sum() == (preds != labels).sum()


def test_tail_to_head_errors_land_in_first_column():
    # 6 classes by descending count, bins {1,2} {3,4} {5,6};
    # every rarest-bin sample predicted as class 1
    counts = np.array([100, 90, 80, 10, 5, 2])
    labels = np.array([5, 5, 5, 6, 6, 6])
    preds = np.full(6, 1)
    out = binned_confusion(preds, labels, counts, bins=3)
    assert out[2, 0] == 6 and out.sum() == 6


def test_remainder_classes_go_to_most_frequent_bins():
    # 7 classes into 3 bins -> sizes 3,2,2 by descending count
    counts = np.array([70, 60, 50, 40, 30, 20, 10])
    labels = np.arange(1, 8)
    preds = np.roll(labels, 1)  # everything wrong, one error per class
    out = binned_confusion(preds, labels, counts, bins=3)
    # row sums count errors per true bin: 3, 2, 2
    np.testing.assert_array_equal(out.sum(axis=1), [3, 2, 2])


def test_bins_bounds_rejected():
    counts = np.array([5, 4, 3])
    with pytest.raises(ContractError):
        binned_confusion(np.array([1]), np.array([1]), counts, bins=4)
    with pytest.raises(ContractError):
        binned_confusion(np.array([1]), np.array([1]), counts, bins=1)


# ----- oracle split ------------------------------------------------------------------

def test_oracle_split_p1_is_exact_partition():
    labels = np.array([1, 1, 2, 2, 3])
    head = np.array([True, False, True])
    got = oracle_split(labels, 1.0, head, seed=0)
    np.testing.assert_array_equal(got, [1, 1, 2, 2, 1])


def test_oracle_split_p_half_mixes_everything():
    labels = np.concatenate([np.full(5000, 1), np.full(5000, 2)])
    head = np.array([True, False])
    got = oracle_split(labels, 0.5, head, seed=1)
    head_frac = (got[:5000] == 1).mean()
    tail_frac = (got[5000:] == 1).mean()
    assert abs(head_frac - tail_frac) < 0.03


def test_oracle_split_follows_probability():
    labels = np.full(10_000, 1)
    got = oracle_split(labels, 0.9, np.array([True]), seed=2)
    assert (got == 1).mean() == pytest.approx(0.9, abs=0.01)


def test_oracle_split_deterministic_and_validated():
    labels = np.array([1, 2, 1, 2])
    head = np.array([True, False])
    a = oracle_split(labels, 0.7, head, seed=3)
    b = oracle_split(labels, 0.7, head, seed=3)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ContractError):
        oracle_split(labels, 0.4, head)
    with pytest.raises(ContractError):
        oracle_split(labels, 1.1, head)
