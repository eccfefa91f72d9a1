"""Engine behavior: sampling, local training, the three aggregation
strategies, evaluation against a confusion-matrix oracle, determinism."""

import numpy as np
import pytest

from mifl import datagen, fairness, fl_engine
from mifl.fl_engine import (
    ClientState,
    ClientUpdate,
    OptimizerConfig,
    StrategyConfig,
    aggregate_fedavg,
    aggregate_qfedavg,
    evaluate,
    local_train,
    sample_clients,
)
from mifl.mi_losses import MILossConfig
from mifl.models import ModelBundle, blob_classifier


def make_setup(seed=0, n_classes=4, per_class=40, spread=0.8, kind="ce"):
    ds = datagen.synthetic_blobs(n_classes, 144, per_class, spread, seed=seed)
    bundle = ModelBundle(blob_classifier(12, n_classes), MILossConfig(kind=kind))
    flat = bundle.pack(bundle.init_params(np.random.default_rng(seed)))
    return ds, bundle, flat


def update(cid, params, n, loss):
    return ClientUpdate(cid, np.asarray(params, dtype=np.float32), n, loss)


class TestSampleClients:
    def test_cross_device_rate(self):
        ids = sample_clients(100, 0.05, np.random.default_rng(0))
        assert len(ids) == 5
        assert len(set(ids.tolist())) == 5

    def test_full_participation(self):
        ids = sample_clients(10, 1.0, np.random.default_rng(0))
        np.testing.assert_array_equal(ids, np.arange(10))

    def test_floor_of_one(self):
        assert len(sample_clients(10, 0.01, np.random.default_rng(0))) == 1

    def test_invalid_rate(self):
        with pytest.raises(ValueError, match="rate"):
            sample_clients(10, 0.0, np.random.default_rng(0))


class TestLocalTrain:
    def test_zero_epochs_returns_start_params(self):
        ds, bundle, flat = make_setup()
        client = ClientState(0, np.arange(60), np.arange(60, 80))
        upd = local_train(bundle, flat, ds, client, 0, 16, OptimizerConfig(), np.random.default_rng(0))
        np.testing.assert_array_equal(upd.params, flat)
        assert upd.n_samples == 60
        assert np.isfinite(upd.start_loss)

    def test_identical_seeds_bit_identical(self):
        ds, bundle, flat = make_setup()
        client = ClientState(0, np.arange(60), np.arange(60, 80))
        a = local_train(bundle, flat, ds, client, 2, 16, OptimizerConfig(), np.random.default_rng(42))
        b = local_train(bundle, flat, ds, client, 2, 16, OptimizerConfig(), np.random.default_rng(42))
        np.testing.assert_array_equal(a.params, b.params)
        assert a.start_loss == b.start_loss

    def test_loss_decreases_on_most_seeds(self):
        improved = 0
        for seed in range(10):
            ds, bundle, flat = make_setup(seed=seed, spread=0.8)
            client = ClientState(0, np.arange(100), np.arange(100, 120))
            upd = local_train(
                bundle, flat, ds, client, 5, 16, OptimizerConfig(lr=3e-3), np.random.default_rng(seed)
            )
            final = fl_engine._mean_loss(bundle, bundle.unpack(upd.params), ds, client.train_idx, 16)
            improved += final < upd.start_loss
        assert improved >= 9

    def test_empty_train_set_rejected(self):
        ds, bundle, flat = make_setup()
        client = ClientState(0, np.array([], dtype=int), np.arange(5))
        with pytest.raises(ValueError, match="no training data"):
            local_train(bundle, flat, ds, client, 1, 16, OptimizerConfig(), np.random.default_rng(0))


class TestFedAvg:
    def test_identical_updates_fixed_point(self):
        u = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        merged = aggregate_fedavg([update(0, u, 5, 1.0), update(1, u, 9, 1.0)])
        np.testing.assert_allclose(merged, u, rtol=1e-7)

    def test_weighted_scalar_example(self):
        merged = aggregate_fedavg([update(0, [0.0], 1, 1.0), update(1, [1.0], 3, 1.0)])
        assert merged[0] == pytest.approx(0.75)

    def test_single_update_passthrough(self):
        u = np.array([4.0, 5.0], dtype=np.float32)
        np.testing.assert_array_equal(aggregate_fedavg([update(0, u, 7, 1.0)]), u)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        updates = [update(i, rng.normal(size=20), int(rng.integers(1, 30)), 1.0) for i in range(6)]
        merged = aggregate_fedavg(updates)
        total = sum(u.n_samples for u in updates)
        expected = np.zeros(20)
        for u in updates:
            expected += u.n_samples * u.params.astype(np.float64) / total
        np.testing.assert_allclose(merged, expected, rtol=1e-5)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        updates = [update(i, rng.normal(size=10), int(rng.integers(1, 9)), 1.0) for i in range(5)]
        a = aggregate_fedavg(updates)
        b = aggregate_fedavg(updates[::-1])
        np.testing.assert_allclose(a, b, atol=1e-7)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no updates"):
            aggregate_fedavg([])


class TestQFedAvg:
    def test_q_zero_single_client_returns_client_model(self):
        w = np.zeros(3, dtype=np.float32)
        client_model = np.array([1.0, 2.0, 3.0], dtype=np.float32)
        merged = aggregate_qfedavg(w, [update(0, client_model, 4, 0.5)], q=0.0, step_l=10.0)
        np.testing.assert_allclose(merged, client_model, atol=1e-6)

    def test_q_zero_two_clients_averages(self):
        w = np.array([5.0], dtype=np.float32)
        ups = [update(0, [0.0], 3, 0.7), update(1, [2.0], 3, 0.2)]
        merged = aggregate_qfedavg(w, ups, q=0.0, step_l=2.0)
        assert merged[0] == pytest.approx(1.0, abs=1e-6)

    def test_q_zero_equals_unweighted_mean_random_vectors(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            w = rng.normal(size=12).astype(np.float32)
            ups = [
                update(i, rng.normal(size=12), int(rng.integers(1, 20)), float(rng.uniform(0.1, 2)))
                for i in range(4)
            ]
            merged = aggregate_qfedavg(w, ups, q=0.0, step_l=1.7)
            mean = np.mean([u.params for u in ups], axis=0)
            np.testing.assert_allclose(merged, mean, atol=1e-6)

    def test_high_q_pulls_toward_high_loss_client(self):
        w = np.zeros(4, dtype=np.float32)
        high = update(0, [1.0, 1.0, 1.0, 1.0], 5, 3.0)
        low = update(1, [-1.0, -1.0, -1.0, -1.0], 5, 0.05)
        merged = aggregate_qfedavg(w, [high, low], q=5.0, step_l=1.0)
        d_high = np.linalg.norm(merged - high.params)
        d_low = np.linalg.norm(merged - low.params)
        assert d_high < d_low

    def test_non_finite_loss_rejected(self):
        w = np.zeros(2, dtype=np.float32)
        with pytest.raises(ValueError, match="not usable"):
            aggregate_qfedavg(w, [update(0, [1.0, 1.0], 2, float("nan"))], q=0.5, step_l=1.0)

    def test_zero_loss_is_floored_not_rejected(self):
        w = np.zeros(2, dtype=np.float32)
        merged = aggregate_qfedavg(w, [update(0, [1.0, 1.0], 2, 0.0)], q=0.5, step_l=1.0)
        assert np.isfinite(merged).all()


class TestStrategyConfig:
    def test_parameters_present_iff_required(self):
        StrategyConfig(kind="fedavg")
        StrategyConfig(kind="qfedavg", q=1.0, step_l=10.0)
        StrategyConfig(kind="ditto", lam=0.1, personal_epochs=2)
        with pytest.raises(ValueError):
            StrategyConfig(kind="qfedavg", q=1.0)  # missing step_l
        with pytest.raises(ValueError):
            StrategyConfig(kind="fedavg", q=1.0)  # stray parameter
        with pytest.raises(ValueError):
            StrategyConfig(kind="ditto", lam=-1.0, personal_epochs=1)


class _ScriptedBundle:
    """Evaluation stub: the prediction is baked into each sample's first value."""

    def unpack(self, flat):
        return flat

    def predict_classes(self, params, batch):
        return batch[:, 0, 0, 0].astype(np.int64)


def scripted_dataset(preds, labels, n_classes):
    samples = np.zeros((len(preds), 1, 1, 1), dtype=np.float32)
    samples[:, 0, 0, 0] = preds
    return datagen.LabeledDataset(samples=samples, labels=np.asarray(labels), n_classes=n_classes)


class TestEvaluate:
    def test_perfect_predictor(self):
        labels = np.array([0, 1, 2, 3] * 5)
        ds = scripted_dataset(labels, labels, 4)
        res = evaluate(_ScriptedBundle(), np.zeros(1), ds, np.arange(20), datagen.default_attributes(4))
        assert res.accuracy == 1.0
        for rates in res.group_rates["label_parity"].values():
            assert rates == (1.0, 0.0)
        assert res.eo["label_parity"] == 1.0

    def test_constant_predictor_on_balanced_ten_classes(self):
        labels = np.repeat(np.arange(10), 10)
        ds = scripted_dataset(np.zeros(100), labels, 10)
        res = evaluate(_ScriptedBundle(), np.zeros(1), ds, np.arange(100))
        assert res.accuracy == pytest.approx(0.1)

    def test_matches_confusion_matrix_oracle(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 4, size=60)
        preds = rng.integers(0, 4, size=60)
        ds = scripted_dataset(preds, labels, 4)
        attrs = datagen.default_attributes(4)
        res = evaluate(_ScriptedBundle(), np.zeros(1), ds, np.arange(60), attrs)

        assert res.accuracy == (preds == labels).mean()
        groups = attrs.group_of("label_parity", labels)
        for g in (0, 1):
            mask = groups == g
            tprs, fprs = [], []
            for c in range(4):
                tp = ((preds == c) & (labels == c) & mask).sum()
                fn = ((preds != c) & (labels == c) & mask).sum()
                fp = ((preds == c) & (labels != c) & mask).sum()
                tn = ((preds != c) & (labels != c) & mask).sum()
                if tp + fn:
                    tprs.append(tp / (tp + fn))
                if fp + tn:
                    fprs.append(fp / (fp + tn))
            expected = (float(np.mean(tprs)), float(np.mean(fprs)))
            assert res.group_rates["label_parity"][g] == pytest.approx(expected)

    def test_single_group_yields_none(self):
        labels = np.array([0, 0, 2, 2])  # parity group 1 absent
        ds = scripted_dataset(labels, labels, 4)
        res = evaluate(_ScriptedBundle(), np.zeros(1), ds, np.arange(4), datagen.default_attributes(4))
        assert res.eo["label_parity"] is None

    def test_empty_test_set_rejected(self):
        ds = scripted_dataset(np.zeros(4), np.zeros(4, dtype=int), 2)
        with pytest.raises(ValueError, match="empty test set"):
            evaluate(_ScriptedBundle(), np.zeros(1), ds, np.array([], dtype=int))


def build_spec(strategy, kind="ce", rounds=2, epochs=1, seed=0, workers=1,
               n_classes=4, per_class=50, clients=5, participation=1.0):
    ds = datagen.synthetic_blobs(n_classes, 144, per_class, 1.0, seed=seed)
    n = len(ds)
    val_idx = np.arange(n - 20, n)
    usable = np.arange(n - 20)
    plan = np.array_split(usable, clients)
    states = []
    for cid, idx in enumerate(plan):
        tr, te = datagen.split_local(idx, 0.9, seed=cid)
        states.append(ClientState(cid, tr, te))
    bundle = ModelBundle(blob_classifier(12, n_classes), MILossConfig(kind=kind))
    return fl_engine.SimulationSpec(
        dataset=ds,
        clients=states,
        val_idx=val_idx,
        bundle=bundle,
        strategy=strategy,
        optimizer=OptimizerConfig(lr=3e-3),
        rounds=rounds,
        local_epochs=epochs,
        batch_size=16,
        participation=participation,
        seed=seed,
        attribute_map=datagen.default_attributes(n_classes),
        workers=workers,
    )


class TestDitto:
    def test_lambda_zero_equals_isolated_local_training(self):
        spec = build_spec(StrategyConfig(kind="ditto", lam=0.0, personal_epochs=1), rounds=2)
        records = list(fl_engine.run_simulation(spec))
        assert len(records) == 2

        # replay: personal params never read the globals when lam = 0
        bundle = spec.bundle
        isolated = fl_engine.init_global_params(spec)
        client = spec.clients[0]
        params = bundle.unpack(np.array(isolated, copy=True))
        for k in range(2):
            rng = fl_engine._stream(spec.seed, fl_engine._TAG_PERSONAL, k, 0)
            params = fl_engine._train_loop(
                bundle, params, spec.dataset, client.train_idx, 1, 16, spec.optimizer, rng
            )
        np.testing.assert_array_equal(bundle.pack(params), client.personal)

    def test_huge_lambda_contracts_toward_global(self):
        spec = build_spec(StrategyConfig(kind="ditto", lam=1e6, personal_epochs=1), rounds=0)
        bundle = spec.bundle
        anchor = fl_engine.init_global_params(spec)
        rng_far = np.random.default_rng(99)
        personal = anchor + rng_far.normal(scale=0.5, size=anchor.size).astype(np.float32)
        client = spec.clients[0]
        dists = [float(np.linalg.norm(personal - anchor))]
        params = bundle.unpack(np.array(personal, copy=True))
        for epoch in range(4):
            rng = fl_engine._stream(0, fl_engine._TAG_PERSONAL, 0, epoch)
            params = fl_engine._train_loop(
                bundle, params, spec.dataset, client.train_idx, 1, 16,
                spec.optimizer, rng, prox=(1e6, anchor),
            )
            dists.append(float(np.linalg.norm(bundle.pack(params) - anchor)))
        assert all(b < a for a, b in zip(dists, dists[1:]))

    def test_zero_personal_epochs_keeps_initial_personal(self):
        spec = build_spec(StrategyConfig(kind="ditto", lam=0.5, personal_epochs=0), rounds=1)
        start = fl_engine.init_global_params(spec)
        list(fl_engine.run_simulation(spec))
        for client in spec.clients:
            np.testing.assert_array_equal(client.personal, start)


class TestRunSimulation:
    def test_zero_rounds_empty_stream(self):
        spec = build_spec(StrategyConfig(kind="fedavg"), rounds=0)
        assert list(fl_engine.run_simulation(spec)) == []

    def test_record_structure(self):
        spec = build_spec(StrategyConfig(kind="fedavg"), rounds=2)
        records = list(fl_engine.run_simulation(spec))
        assert [r.round_index for r in records] == [0, 1]
        for r in records:
            assert r.client_ids == [0, 1, 2, 3, 4]
            assert r.accuracy.shape == (5,)
            assert np.isfinite(r.contribution).all()
            comp = fairness.fairness_from_record(r)
            assert 0 < comp["F_t"] <= 1

    def test_partial_participation_sizes(self):
        spec = build_spec(StrategyConfig(kind="fedavg"), rounds=2, clients=8, participation=0.25)
        for r in fl_engine.run_simulation(spec):
            assert len(r.client_ids) == 2

    def test_seed_determinism_across_worker_counts(self):
        base = None
        for workers in (1, 4):
            spec = build_spec(StrategyConfig(kind="fedavg"), rounds=2, workers=workers)
            records = list(fl_engine.run_simulation(spec))
            snapshot = [
                (r.round_index, r.accuracy.tobytes(), r.reward.tobytes(), r.contribution.tobytes())
                for r in records
            ]
            if base is None:
                base = snapshot
            else:
                assert snapshot == base

    def test_shapley_efficiency_on_round(self):
        spec = build_spec(StrategyConfig(kind="fedavg"), rounds=1)
        record = next(fl_engine.run_simulation(spec))
        # exact mode: contributions sum to v(full) - v(empty)
        updates_sum = record.contribution.sum()
        assert np.isfinite(updates_sum)
