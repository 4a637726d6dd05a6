import numpy as np
import pytest

from stamnet.dataio import (generate_synthetic, split_manifest, write_csv,
                            write_manifest, ManifestEntry, DatasetManifest)
from stamnet.errors import DataError, ParameterError
from stamnet.model import ModelConfig, StamModel
from stamnet.septcn import SepTcnConfig
from stamnet.tensor import Tensor
from stamnet.training import (AdamState, ConfigurationSpec, DataConfig,
                              EpochStats, TrainConfig, TrialSource, adam_step,
                              evaluate, read_history_csv, report_from_confusion,
                              run_configuration, train, write_history_csv)


def tiny_model_config(n_classes=3, seed=0):
    return ModelConfig(
        n_classes=n_classes, t_frames=2, n_joints=21, channels=8, heads=2,
        septcn=SepTcnConfig(in_channels=3, mid_channels=4, out_channels=8),
        classifier_width=8, seed=seed)


def tiny_trials(n_classes=3, per_class=6, seed=0):
    return generate_synthetic(n_classes, per_class, t_frames=2,
                              noise_std=0.01, seed=seed)


class TestAdam:
    def test_first_step_hand_value(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        w.grad[:] = 2.0
        params = {"w": w}
        state = AdamState(params)
        adam_step(params, state, lr=0.1)
        np.testing.assert_allclose(w.data, [0.9], atol=1e-8)

    def test_zero_gradient_no_change(self):
        w = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        params = {"w": w}
        adam_step(params, AdamState(params), lr=0.1)
        np.testing.assert_array_equal(w.data, [5.0, -3.0])

    def test_equal_gradients_update_identically(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([2.0]), requires_grad=True)
        a.grad[:] = 0.7
        b.grad[:] = 0.7
        params = {"a": a, "b": b}
        adam_step(params, AdamState(params), lr=0.05)
        np.testing.assert_allclose(a.data - 1.0, b.data - 2.0, atol=1e-15)

    def test_nonfinite_gradient_aborts(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        w.grad[:] = np.inf
        params = {"w": w}
        with pytest.raises(DataError):
            adam_step(params, AdamState(params), lr=0.1)


class TestTrainConfig:
    def test_patience_bound(self):
        with pytest.raises(ParameterError):
            TrainConfig(max_epochs=10, patience=11)

    def test_lr_out_of_range_warns(self):
        with pytest.warns(UserWarning):
            TrainConfig(learning_rate=2.0)

    def test_lr_must_be_positive(self):
        with pytest.raises(ParameterError):
            TrainConfig(learning_rate=0.0)


class TestTrainLoop:
    def small_setup(self, seed=0):
        trials, _ = tiny_trials(seed=seed)
        split = int(0.8 * len(trials))
        return trials[:split], trials[split:]

    def test_early_stop_after_patience_without_improvement(self, monkeypatch):
        # force strictly worsening validation loss
        import stamnet.training as tr
        losses = iter([(1.0, 50.0), (2.0, 50.0), (3.0, 50.0), (4.0, 50.0),
                       (5.0, 50.0), (6.0, 50.0), (7.0, 50.0), (8.0, 50.0)])

        def fake_pass(model, batches, training, rng=None, state=None, tc=None):
            if training:
                return 0.5, 60.0
            return next(losses)

        monkeypatch.setattr(tr, "_epoch_pass", fake_pass)
        fit, val = self.small_setup()
        _, history = tr.train(tiny_model_config(), fit, val,
                              TrainConfig(max_epochs=10, patience=1, seed=0))
        assert len(history) == 2  # epoch 1 improves over inf, epoch 2 stops

    def test_histories_bit_identical_for_same_seed(self):
        fit, val = self.small_setup()
        tc = TrainConfig(max_epochs=3, patience=3, seed=42)
        _, h1 = train(tiny_model_config(), fit, val, tc)
        _, h2 = train(tiny_model_config(), fit, val, tc)
        assert h1 == h2

    def test_returns_best_parameters(self):
        fit, val = self.small_setup()
        tc = TrainConfig(max_epochs=5, patience=5, seed=1)
        model, history = train(tiny_model_config(), fit, val, tc)
        best = min(h.val_loss for h in history)
        from stamnet.dataio import make_batches
        from stamnet.training import _epoch_pass
        val_loss, _ = _epoch_pass(model, make_batches(val, 8), False)
        np.testing.assert_allclose(val_loss, best, atol=1e-12)

    def test_empty_train_set_rejected(self):
        with pytest.raises(DataError):
            train(tiny_model_config(), [], [], TrainConfig())

    def test_empty_val_warns_and_runs(self):
        fit, _ = self.small_setup()
        with pytest.warns(UserWarning):
            _, history = train(tiny_model_config(), fit, [],
                               TrainConfig(max_epochs=2, patience=2, seed=0))
        assert len(history) == 2

    def test_history_csv_round_trip(self, tmp_path):
        history = [EpochStats(1, 0.5, 60.0, 0.4, 62.5),
                   EpochStats(2, 0.497654321012345, 61.0, 0.39, 65.0)]
        path = tmp_path / "h.csv"
        write_history_csv(path, history)
        assert read_history_csv(path) == history
        header = path.read_text().splitlines()[0]
        assert header == "epoch,train_loss,train_acc,val_loss,val_acc"


class TestMetrics:
    def test_all_correct(self):
        cm = np.diag([5, 3, 2])
        report = report_from_confusion(cm, ["a", "b", "c"])
        assert report.accuracy == 100.0
        assert all(m.f1 == 100.0 for m in report.per_class)

    def test_hand_computed_prf(self):
        # class 0: TP=9, FP=1, FN=1 out of 100 -> P=R=F1=90, Eq-8 acc 98
        cm = np.zeros((2, 2), dtype=int)
        cm[0, 0] = 9
        cm[0, 1] = 1
        cm[1, 0] = 1
        cm[1, 1] = 89
        report = report_from_confusion(cm, ["pos", "rest"])
        m = report.per_class[0]
        assert (m.precision, m.recall, m.f1) == (90.0, 90.0, 90.0)
        assert m.accuracy == 98.0

    def test_confusion_row_sums_and_trace(self):
        rng = np.random.default_rng(0)
        cm = rng.integers(0, 10, size=(4, 4))
        report = report_from_confusion(cm, list("abcd"))
        np.testing.assert_array_equal(report.confusion.sum(axis=1), cm.sum(axis=1))
        np.testing.assert_allclose(report.accuracy / 100,
                                   np.trace(cm) / cm.sum(), atol=1e-12)

    def test_degenerate_class_flagged_zero(self):
        cm = np.array([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
        report = report_from_confusion(cm, list("abc"))
        m = report.per_class[2]
        assert m.degenerate and m.precision == 0.0 and m.f1 == 0.0

    def test_accuracy_invariant_to_relabeling(self):
        rng = np.random.default_rng(3)
        cm = rng.integers(0, 8, size=(5, 5))
        perm = rng.permutation(5)
        base = report_from_confusion(cm, list("abcde")).accuracy
        shuffled = report_from_confusion(cm[np.ix_(perm, perm)], list("abcde")).accuracy
        np.testing.assert_allclose(base, shuffled, atol=1e-12)

    def test_evaluate_label_beyond_model(self):
        model = StamModel(tiny_model_config(n_classes=3))
        trials, _ = tiny_trials(n_classes=4, per_class=1)
        with pytest.raises(DataError):
            evaluate(model, trials, ["a", "b", "c"])


def synth_dataset_on_disk(tmp_path, name, n_classes=3, per_class=6, seed=0):
    trials, manifest = generate_synthetic(n_classes, per_class, t_frames=4,
                                          noise_std=0.01, seed=seed, name=name)
    csv_path = tmp_path / f"{name}.csv"
    write_csv(csv_path, trials)
    entries = [ManifestEntry(str(csv_path), e.trial_id, e.label) for e in manifest.entries]
    man = DatasetManifest(name, manifest.classes, entries)
    write_manifest(tmp_path / f"{name}.json", man)
    return man


class TestConfigurationHarness:
    def model_config(self, n_classes=3):
        return ModelConfig(
            n_classes=n_classes, t_frames=4, n_joints=21, channels=8, heads=2,
            septcn=SepTcnConfig(in_channels=3, mid_channels=4, out_channels=8),
            classifier_width=8, seed=0)

    def train_config(self):
        return TrainConfig(max_epochs=2, patience=2, seed=0, batch_size=8)

    def test_spec_validation(self):
        with pytest.raises(ParameterError):
            ConfigurationSpec("X", "merge", ["only_one"], "only_one")
        with pytest.raises(ParameterError):
            ConfigurationSpec("X", "sideways", ["a"], "a")

    def test_intra_split_disjoint(self, tmp_path):
        man = synth_dataset_on_disk(tmp_path, "d1")
        spec = ConfigurationSpec("A", "intra", ["d1"], "d1")
        source = TrialSource(DataConfig())
        report = run_configuration(spec, self.model_config(), self.train_config(),
                                   source, {"d1": man})
        assert report.configuration == "A"
        # 3 classes x 6 trials, 70/30 stratified -> 4 train / 2 test per class
        assert report.confusion.sum() == 6

    def test_merge_union_counts(self, tmp_path):
        man1 = synth_dataset_on_disk(tmp_path, "m1", seed=0)
        man2 = synth_dataset_on_disk(tmp_path, "m2", seed=1)
        # pre-split both so the expected union is exact
        man1 = split_manifest(man1, 0.7, seed=0)
        man2 = split_manifest(man2, 0.7, seed=0)
        spec = ConfigurationSpec("F", "merge", ["m1", "m2"], "m2")
        n_train = len(man1.split_ids("train")) + len(man2.split_ids("train"))
        captured = {}
        import stamnet.training as tr
        real_train = tr.train

        def spy(cfg, fit, val, tc):
            captured["n"] = len(fit) + len(val)
            return real_train(cfg, fit, val, tc)

        tr.train = spy
        try:
            run_configuration(spec, self.model_config(), self.train_config(),
                              TrialSource(DataConfig()), {"m1": man1, "m2": man2})
        finally:
            tr.train = real_train
        assert captured["n"] == n_train

    def test_inter_label_mismatch_rejected(self, tmp_path):
        man1 = synth_dataset_on_disk(tmp_path, "x1", n_classes=3)
        man2 = synth_dataset_on_disk(tmp_path, "x2", n_classes=4)
        spec = ConfigurationSpec("D", "inter", ["x1"], "x2")
        with pytest.raises(DataError):
            run_configuration(spec, self.model_config(), self.train_config(),
                              TrialSource(DataConfig()), {"x1": man1, "x2": man2})
