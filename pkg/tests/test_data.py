import numpy as np
import pytest

from asfl import nn
from asfl.data import (
    DataError, Dataset, Partition, label_sets, load_csv, partition_iid, partition_noniid, power_law_sizes,
    synth_dataset, train_test_split, write_csv,
)
from asfl.nn import Dense, Flatten, ModelSpec


def test_load_two_row_csv(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("3,0.0,0.5,1.0,0.25\n7,1,1,0,0\n")
    ds = load_csv(f, (1, 2, 2), 10)
    assert ds.samples.shape == (2, 1, 2, 2) and ds.labels.tolist() == [3, 7]
    assert ds.samples[0, 0].tolist() == [[0.0, 0.5], [1.0, 0.25]]


@pytest.mark.parametrize("text, match", [
    ("10,0,0,0,0\n", "label 10"),
    ("1,0,0,0\n", "expected 5 fields"),
    ("1,0,0,0,2\n", r"\[0, 1\]"),
])
def test_csv_errors(tmp_path, text, match):
    f = tmp_path / "bad.csv"
    f.write_text(text)
    with pytest.raises(DataError, match=match):
        load_csv(f, (1, 2, 2), 10)


def test_csv_missing_file(tmp_path):
    with pytest.raises(DataError, match="cannot read"):
        load_csv(tmp_path / "nope.csv", (4,), 2)


def test_csv_roundtrip(tmp_path):
    ds = synth_dataset(3, 4, (1, 3, 3), seed=2)
    write_csv(ds, tmp_path / "x.csv")
    back = load_csv(tmp_path / "x.csv", (1, 3, 3), 3)
    assert np.array_equal(back.samples, ds.samples) and np.array_equal(back.labels, ds.labels)


def test_synth_counts_and_determinism():
    a = synth_dataset(10, 20, (1, 4, 4), seed=1)
    assert len(a) == 200 and a.class_counts().tolist() == [20] * 10
    assert a.samples.min() >= 0 and a.samples.max() <= 1
    b = synth_dataset(10, 20, (1, 4, 4), seed=1)
    assert np.array_equal(a.samples, b.samples)


def test_synth_is_learnable_by_linear_model():
    ds = synth_dataset(10, 30, (1, 8, 8), seed=0)
    spec = ModelSpec((Flatten(), Dense(64, 10)), (1, 8, 8), 10)
    p = nn.build_model(spec, 0)
    for _ in range(50):
        logits, cache = nn.forward(spec, p, ds.samples)
        _, g = nn.loss_and_grad(logits, ds.labels)
        grads, _ = nn.backward(spec, p, cache, g)
        p = nn.sgd_step(p, grads, 0.5)
    acc = np.mean(nn.predict(spec, p, ds.samples).argmax(axis=1) == ds.labels)
    assert acc > 0.8


def test_train_test_split_stratified():
    ds = synth_dataset(4, 10, (2,), seed=0)
    tr, te = train_test_split(ds, 3, seed=0)
    assert te.class_counts().tolist() == [3] * 4 and tr.class_counts().tolist() == [7] * 4
    with pytest.raises(DataError):
        train_test_split(ds, 10, seed=0)


def test_iid_equal_disjoint_cover():
    ds = synth_dataset(10, 10, (2,), seed=0)
    part = partition_iid(ds, 4, seed=0)
    assert part.sizes() == [25] * 4
    part.validate(len(ds))
    assert np.array_equal(np.sort(np.concatenate(part.indices)), np.arange(100))


def test_iid_label_histograms_are_multinomial():
    ds = synth_dataset(10, 100, (1,), seed=0)
    part = partition_iid(ds, 4, seed=3)
    n, p = 250, 0.1
    sigma = np.sqrt(n * p * (1 - p))
    for ix in part.indices:
        counts = np.bincount(ds.labels[ix], minlength=10)
        assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_iid_too_few_samples():
    with pytest.raises(DataError):
        partition_iid(synth_dataset(1, 2, (1,), seed=0), 3, seed=0)


@pytest.mark.parametrize("seed", range(5))
def test_noniid_exact_label_support(seed):
    ds = synth_dataset(10, 50, (1,), seed=0)
    part = partition_noniid(ds, 4, 6, 1.0, seed)
    part.validate(len(ds))
    assert all(len(s) == 6 for s in label_sets(ds, part))
    assert set().union(*label_sets(ds, part)) == set(range(10))


def test_noniid_alpha_zero_equal_sizes():
    ds = synth_dataset(10, 50, (1,), seed=0)
    sizes = partition_noniid(ds, 4, 6, 0.0, 0).sizes()
    assert max(sizes) - min(sizes) <= 1


def test_noniid_alpha_one_power_law():
    ds = synth_dataset(10, 200, (1,), seed=0)
    sizes = np.array(partition_noniid(ds, 4, 6, 1.0, 0).sizes(), dtype=float)
    target = np.array([1, 1 / 2, 1 / 3, 1 / 4])
    np.testing.assert_allclose(sizes / sizes[0], target, atol=2 / sizes[-1])


def test_power_law_sizes_sum():
    s = power_law_sizes(1000, 4, 1.0)
    assert s.sum() == 1000 and s.tolist() == sorted(s.tolist(), reverse=True)


def test_noniid_errors():
    ds = synth_dataset(10, 2, (1,), seed=0)
    with pytest.raises(DataError):
        partition_noniid(ds, 4, 11, 1.0, 0)
    with pytest.raises(DataError):
        partition_noniid(synth_dataset(10, 1, (1,), seed=0), 8, 6, 3.0, 0)


def test_partition_json_roundtrip():
    ds = synth_dataset(10, 10, (1,), seed=0)
    part = partition_noniid(ds, 3, 4, 1.0, 0)
    back = Partition.from_json(part.to_json())
    assert all(np.array_equal(a, b) for a, b in zip(part.indices, back.indices))


def test_partition_validate_catches_overlap():
    with pytest.raises(DataError):
        Partition((np.array([0, 1]), np.array([1]))).validate(3)


def test_dataset_label_range():
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 2)), np.array([2]), 2)
