import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlsa.data import (FeatureDataset, SyntheticSpec, class_stats, gen_synthetic,
                       load_dataset, save_dataset, synthetic_class_sizes)
from dlsa.errors import ContractError, FormatError


def test_two_class_sizes_hit_imbalance_exactly():
    sizes = synthetic_class_sizes(SyntheticSpec(n_classes=2, imbalance=10, n_max=100))
    np.testing.assert_array_equal(sizes, [100, 10])


def test_unit_imbalance_gives_equal_sizes():
    sizes = synthetic_class_sizes(SyntheticSpec(n_classes=5, imbalance=1, n_max=77))
    np.testing.assert_array_equal(sizes, np.full(5, 77))


def test_standard_profile_endpoints():
    sizes = synthetic_class_sizes(SyntheticSpec(n_classes=50, imbalance=100, n_max=500))
    assert sizes[0] == 500 and sizes[-1] == 5
    assert (np.diff(sizes) <= 0).all()


@settings(deadline=None, max_examples=60)
@given(st.integers(min_value=2, max_value=64),
       st.floats(min_value=1.0, max_value=500.0),
       st.integers(min_value=1, max_value=3))
def test_generated_imbalance_within_rounding_tolerance(c, beta, scale):
    n_max = max(int(np.ceil(2 * beta)), c) * scale
    spec = SyntheticSpec(n_classes=c, imbalance=beta, n_max=n_max)
    sizes = synthetic_class_sizes(spec)
    got = sizes.max() / sizes.min()
    assert abs(got - beta) <= beta * c / n_max + 1e-9


def test_infeasible_spec_rejected():
    with pytest.raises(ContractError):
        synthetic_class_sizes(SyntheticSpec(n_classes=10, imbalance=1000, n_max=100))
    with pytest.raises(ContractError):
        synthetic_class_sizes(SyntheticSpec(n_classes=1))
    with pytest.raises(ContractError):
        synthetic_class_sizes(SyntheticSpec(imbalance=0.5))


def test_generation_is_seed_deterministic():
    spec = SyntheticSpec(n_classes=6, imbalance=8, dim=5, n_max=40, seed=123)
    tr1, te1 = gen_synthetic(spec)
    tr2, te2 = gen_synthetic(spec)
    np.testing.assert_array_equal(tr1.features, tr2.features)
    np.testing.assert_array_equal(tr1.labels, tr2.labels)
    np.testing.assert_array_equal(te1.features, te2.features)


def test_test_split_is_balanced():
    spec = SyntheticSpec(n_classes=7, imbalance=20, n_max=60, test_per_class=9)
    _, test = gen_synthetic(spec)
    np.testing.assert_array_equal(test.counts, np.full(7, 9))


def test_train_counts_match_size_profile():
    spec = SyntheticSpec(n_classes=12, imbalance=30, n_max=90, seed=5)
    train, _ = gen_synthetic(spec)
    np.testing.assert_array_equal(train.counts, synthetic_class_sizes(spec))
    assert train.imbalance == pytest.approx(30, rel=0.2)


def test_tail_shift_moves_tail_classes_outward():
    base = SyntheticSpec(n_classes=20, imbalance=50, dim=8, n_max=200, seed=3)
    shifted = SyntheticSpec(n_classes=20, imbalance=50, dim=8, n_max=200, seed=3,
                            tail_shift=1.5)
    tr0, _ = gen_synthetic(base)
    tr1, _ = gen_synthetic(shifted)
    stats = class_stats(tr0)
    tail_mask0 = ~stats.head[tr0.labels - 1]
    head_norm = np.linalg.norm(tr1.x64()[~tail_mask0], axis=1).mean()
    tail_norm = np.linalg.norm(tr1.x64()[tail_mask0], axis=1).mean()
    assert tail_norm > head_norm
    # head samples identical to the unshifted dataset
    np.testing.assert_array_equal(tr1.features[~tail_mask0], tr0.features[~tail_mask0])


def test_class_stats_group_boundaries():
    # class counts 101, 100, 20, 19, 51, 50 exercise every boundary
    labels = np.concatenate([np.full(n, i + 1) for i, n in enumerate([101, 100, 20, 19, 51, 50])])
    d = FeatureDataset(np.zeros((labels.size, 2), dtype=np.float32), labels, 6)
    s = class_stats(d, head_threshold=50)
    np.testing.assert_array_equal(s.groups, ["many", "medium", "medium", "few", "medium", "medium"])
    np.testing.assert_array_equal(s.head, [True, True, False, False, True, False])
    assert s.imbalance == pytest.approx(101 / 19)


def test_dataset_validation():
    with pytest.raises(ContractError):
        FeatureDataset(np.zeros((3, 2), dtype=np.float32), np.array([0, 1, 2]), 3)
    with pytest.raises(ContractError):
        FeatureDataset(np.zeros((3, 2), dtype=np.float32), np.array([1, 2, 4]), 3)
    with pytest.raises(ContractError):
        FeatureDataset(np.zeros((3, 2), dtype=np.float32), np.array([1, 2]), 3)


# ----- binary container -----------------------------------------------------


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    for trial in range(20):
        n, d, c = int(rng.integers(0, 50)), int(rng.integers(1, 8)), int(rng.integers(1, 9))
        feats = rng.normal(size=(n, d)).astype(np.float32)
        labels = rng.integers(1, c + 1, size=n)
        ds = FeatureDataset(feats, labels, c)
        p = tmp_path / f"t{trial}.dlft"
        save_dataset(ds, p)
        back = load_dataset(p)
        assert back.features.tobytes() == ds.features.tobytes()
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.n_classes == c


def test_empty_dataset_round_trips(tmp_path):
    ds = FeatureDataset(np.zeros((0, 4), dtype=np.float32), np.zeros(0, dtype=np.int64), 3)
    p = tmp_path / "empty.dlft"
    save_dataset(ds, p)
    back = load_dataset(p)
    assert back.n == 0 and back.dim == 4 and back.n_classes == 3


def test_corrupted_payload_rejected(tmp_path):
    ds = FeatureDataset(np.ones((4, 3), dtype=np.float32), np.array([1, 2, 1, 2]), 2)
    p = tmp_path / "x.dlft"
    save_dataset(ds, p)
    blob = bytearray(p.read_bytes())
    blob[30] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        load_dataset(p)


def test_truncated_and_foreign_files_rejected(tmp_path):
    ds = FeatureDataset(np.ones((4, 3), dtype=np.float32), np.array([1, 2, 1, 2]), 2)
    p = tmp_path / "x.dlft"
    save_dataset(ds, p)
    blob = p.read_bytes()
    p.write_bytes(blob[:-7])
    with pytest.raises(FormatError, match="truncated"):
        load_dataset(p)
    p.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load_dataset(p)
    p.write_bytes(blob[:4] + bytes([99]) + blob[5:])
    with pytest.raises(FormatError, match="version"):
        load_dataset(p)
