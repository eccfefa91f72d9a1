"""Datasets, partitions, splits, attributes: format contracts and
seed-determinism."""

import numpy as np
import pytest
from scipy import stats

from mifl import datagen


@pytest.fixture(scope="module")
def cifar_dir(tmp_path_factory):
    """One synthetic batch file in the exact binary layout."""
    directory = tmp_path_factory.mktemp("cifar")
    rng = np.random.default_rng(0)
    records = np.zeros((datagen.CIFAR_BATCH_RECORDS, datagen.CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = rng.integers(0, 10, size=datagen.CIFAR_BATCH_RECORDS)
    records[:, 1:] = rng.integers(0, 256, size=(datagen.CIFAR_BATCH_RECORDS, 3072))
    records[0, 1:] = 0  # all-zero pixels for the normalization check
    records.tofile(directory / "data_batch_1.bin")
    return directory


class TestCifarLoader:
    def test_one_batch_file_loads_ten_thousand(self, cifar_dir):
        ds = datagen.load_cifar10(str(cifar_dir))
        assert len(ds) == 10_000
        assert ds.samples.shape == (10_000, 3, 32, 32)
        assert ds.n_classes == 10
        assert ds.samples.dtype == np.float32

    def test_all_zero_record_normalizes_to_minus_one(self, cifar_dir):
        ds = datagen.load_cifar10(str(cifar_dir))
        np.testing.assert_array_equal(ds.samples[0], -1.0)

    def test_values_lie_in_unit_ball(self, cifar_dir):
        ds = datagen.load_cifar10(str(cifar_dir))
        assert ds.samples.min() >= -1.0 and ds.samples.max() <= 1.0

    def test_truncated_file_names_expected_bytes(self, tmp_path):
        bad = tmp_path / "data_batch_1.bin"
        bad.write_bytes(b"\x00" * 1000)
        with pytest.raises(datagen.DataFormatError, match="30730000"):
            datagen.load_cifar10(str(tmp_path))

    def test_missing_files_rejected(self, tmp_path):
        with pytest.raises(datagen.DataFormatError, match="no .bin"):
            datagen.load_cifar10(str(tmp_path))

    def test_bad_label_byte_rejected(self, tmp_path):
        records = np.zeros((datagen.CIFAR_BATCH_RECORDS, datagen.CIFAR_RECORD_BYTES), dtype=np.uint8)
        records[5, 0] = 11
        records.tofile(tmp_path / "data_batch_1.bin")
        with pytest.raises(datagen.DataFormatError, match="label"):
            datagen.load_cifar10(str(tmp_path))


class TestBlobs:
    def test_tiny_spread_is_nearest_mean_separable(self):
        ds = datagen.synthetic_blobs(4, 144, 50, spread=1e-4, seed=0)
        means = datagen._bump_means(4, 12)
        flat = ds.samples.reshape(len(ds), -1).astype(np.float64)
        nearest = np.argmin(
            ((flat[:, None, :] - means[None, :, :]) ** 2).sum(axis=2), axis=1
        )
        assert (nearest == ds.labels).mean() == 1.0

    def test_seed_determinism(self):
        a = datagen.synthetic_blobs(3, 16, 10, 0.5, seed=9)
        b = datagen.synthetic_blobs(3, 16, 10, 0.5, seed=9)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_uniform_label_histogram(self):
        ds = datagen.synthetic_blobs(10, 100, 100, 0.5, seed=1)
        assert len(ds) == 1000
        np.testing.assert_array_equal(np.bincount(ds.labels), np.full(10, 100))

    def test_non_square_dims_rejected(self):
        with pytest.raises(ValueError, match="perfect square"):
            datagen.synthetic_blobs(3, 15, 10, 0.5, seed=0)

    def test_parameter_validation(self):
        with pytest.raises(ValueError, match="classes"):
            datagen.synthetic_blobs(1, 16, 10, 0.5, seed=0)
        with pytest.raises(ValueError, match="per class"):
            datagen.synthetic_blobs(2, 16, 0, 0.5, seed=0)


class TestGaussianPairs:
    def test_analytic_mi_values(self):
        assert datagen.gaussian_pair_mi(0.0) == 0.0
        assert datagen.gaussian_pair_mi(0.9) == pytest.approx(0.8303, abs=2e-4)
        assert datagen.gaussian_pair_mi(0.5) == pytest.approx(0.1438, abs=2e-4)

    def test_sample_correlation_converges(self):
        x, y = datagen.correlated_gaussian_pairs(0.7, 1, 100_000, seed=4)
        r = float(np.corrcoef(x[:, 0], y[:, 0])[0, 1])
        assert abs(r - 0.7) < 0.01

    def test_shapes_and_determinism(self):
        x, y = datagen.correlated_gaussian_pairs(0.3, 2, 50, seed=5)
        x2, _ = datagen.correlated_gaussian_pairs(0.3, 2, 50, seed=5)
        assert x.shape == y.shape == (50, 2)
        np.testing.assert_array_equal(x, x2)

    def test_degenerate_rho_rejected(self):
        with pytest.raises(ValueError, match="rho"):
            datagen.correlated_gaussian_pairs(1.0, 1, 10, seed=0)


def assert_plan_valid(plan, n_total):
    all_idx = np.concatenate(plan.client_indices)
    assert len(np.unique(all_idx)) == len(all_idx)  # disjoint
    assert all(len(c) > 0 for c in plan.client_indices)
    assert all_idx.min() >= 0 and all_idx.max() < n_total


class TestPartitionIid:
    def test_even_split(self):
        ds = datagen.synthetic_blobs(4, 16, 25, 0.5, seed=0)  # 100 samples
        plan = datagen.partition_iid(ds, 10, seed=0)
        assert [len(c) for c in plan.client_indices] == [10] * 10
        assert_plan_valid(plan, 100)
        assert len(np.concatenate(plan.client_indices)) == 100  # covering

    def test_single_client_gets_everything(self):
        ds = datagen.synthetic_blobs(2, 16, 10, 0.5, seed=0)
        plan = datagen.partition_iid(ds, 1, seed=0)
        assert len(plan.client_indices[0]) == 20

    def test_too_many_clients_rejected(self):
        ds = datagen.synthetic_blobs(2, 16, 2, 0.5, seed=0)
        with pytest.raises(ValueError, match="clients exceed"):
            datagen.partition_iid(ds, 5, seed=0)

    def test_shard_label_balance(self):
        # chi-square against the global distribution should not reject
        ds = datagen.synthetic_blobs(4, 16, 250, 0.5, seed=3)  # 1000 samples
        rejected = 0
        for seed in range(5):
            plan = datagen.partition_iid(ds, 5, seed=seed)
            for idx in plan.client_indices:
                counts = np.bincount(ds.labels[idx], minlength=4)
                _, p = stats.chisquare(counts)
                rejected += p < 0.01
        assert rejected <= 2  # 25 tests at the 1% level

    def test_shard_sizes_differ_by_at_most_one(self):
        ds = datagen.synthetic_blobs(3, 16, 17, 0.5, seed=0)  # 51 samples
        plan = datagen.partition_iid(ds, 4, seed=0)
        sizes = [len(c) for c in plan.client_indices]
        assert max(sizes) - min(sizes) <= 1


class TestPartitionLabelSkew:
    def test_huge_concentration_approaches_iid(self):
        ds = datagen.synthetic_blobs(4, 16, 250, 0.5, seed=1)
        plan = datagen.partition_label_skew(ds, 5, concentration=1e6, seed=0)
        for idx in plan.client_indices:
            fractions = np.bincount(ds.labels[idx], minlength=4) / len(idx)
            np.testing.assert_allclose(fractions, 0.25, atol=0.05)

    def test_low_concentration_reduces_label_entropy(self):
        ds = datagen.synthetic_blobs(4, 16, 250, 0.5, seed=1)

        def mean_entropy(plan):
            ents = []
            for idx in plan.client_indices:
                p = np.bincount(ds.labels[idx], minlength=4) / len(idx)
                p = p[p > 0]
                ents.append(float(-(p * np.log(p)).sum()))
            return float(np.mean(ents))

        skew = np.mean(
            [mean_entropy(datagen.partition_label_skew(ds, 5, 0.1, seed=s)) for s in range(10)]
        )
        iid = np.mean(
            [mean_entropy(datagen.partition_iid(ds, 5, seed=s)) for s in range(10)]
        )
        assert skew < iid

    @pytest.mark.parametrize("concentration", [0.05, 0.5, 5.0, 500.0])
    def test_valid_plan_for_any_concentration(self, concentration):
        rng = np.random.default_rng(int(concentration * 100))
        for seed in range(5):
            n_classes = int(rng.integers(2, 6))
            per_class = int(rng.integers(20, 60))
            clients = int(rng.integers(2, 8))
            ds = datagen.synthetic_blobs(n_classes, 16, per_class, 0.5, seed=seed)
            plan = datagen.partition_label_skew(ds, clients, concentration, seed=seed)
            assert_plan_valid(plan, len(ds))
            assert sum(len(c) for c in plan.client_indices) == len(ds)

    def test_bad_concentration_rejected(self):
        ds = datagen.synthetic_blobs(2, 16, 10, 0.5, seed=0)
        with pytest.raises(ValueError, match="concentration"):
            datagen.partition_label_skew(ds, 2, 0.0, seed=0)


class TestSplitLocal:
    def test_ninety_ten(self):
        train, test = datagen.split_local(np.arange(10), 0.9, seed=0)
        assert len(train) == 9 and len(test) == 1
        assert set(train) | set(test) == set(range(10))

    def test_two_indices_floor(self):
        train, test = datagen.split_local(np.arange(2), 0.9, seed=0)
        assert len(train) == 1 and len(test) == 1

    def test_seed_determinism(self):
        a = datagen.split_local(np.arange(20), 0.8, seed=3)
        b = datagen.split_local(np.arange(20), 0.8, seed=3)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_too_few_indices_rejected(self):
        with pytest.raises(ValueError, match=">= 2"):
            datagen.split_local(np.array([5]), 0.9, seed=0)

    def test_bad_ratio_rejected(self):
        with pytest.raises(ValueError, match="ratio"):
            datagen.split_local(np.arange(5), 1.0, seed=0)


class TestAttributes:
    def test_label_parity_default(self):
        attrs = datagen.default_attributes(10)
        np.testing.assert_array_equal(
            attrs.attributes["label_parity"], [0, 1, 0, 1, 0, 1, 0, 1, 0, 1]
        )

    def test_two_classes(self):
        attrs = datagen.default_attributes(2)
        np.testing.assert_array_equal(attrs.attributes["label_parity"], [0, 1])

    def test_custom_file_overrides_default(self, tmp_path):
        path = tmp_path / "attrs.txt"
        path.write_text("# animals vs vehicles\n0=0\n1=1\n2=0\n3=1\n")
        attrs = datagen.load_attributes(str(path), 4, name="vehicle")
        np.testing.assert_array_equal(attrs.attributes["vehicle"], [0, 1, 0, 1])

    def test_incomplete_file_rejected(self, tmp_path):
        path = tmp_path / "attrs.txt"
        path.write_text("0=0\n1=1\n")
        with pytest.raises(datagen.DataFormatError, match="missing labels"):
            datagen.load_attributes(str(path), 3)

    def test_single_group_rejected(self):
        with pytest.raises(ValueError, match="at least one label per group"):
            datagen.AttributeMap(attributes={"flat": np.zeros(4, dtype=int)}, n_classes=4)

    def test_group_lookup(self):
        attrs = datagen.default_attributes(4)
        np.testing.assert_array_equal(
            attrs.group_of("label_parity", np.array([0, 1, 2, 3])), [0, 1, 0, 1]
        )
