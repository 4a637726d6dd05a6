"""Training loop (Adam with early stopping), evaluation metrics, and the
intra/inter/merge dataset-configuration harness.

Metrics follow the one-vs-rest convention: per class c, TP/FP/FN/TN come
from the confusion matrix, precision = TP/(TP+FP), recall = TP/(TP+FN),
F1 = 2PR/(P+R), all in percent. The headline accuracy is overall
correct/total; the TN-inclusive per-class accuracy is also reported.
"""

from __future__ import annotations

import copy
import csv
import json
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .dataio import (DatasetManifest, SkeletonTrial, load_csv, make_batches,
                     normalize_trial, split_manifest, window_trial)
from .errors import DataError, ParameterError
from .model import ModelConfig, StamModel, _from_dict_strict
from .tensor import Tensor, no_grad


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 500
    patience: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError(f"learning rate must be > 0, got {self.learning_rate}")
        if not 5e-6 <= self.learning_rate <= 1e-3:
            warnings.warn(
                f"learning rate {self.learning_rate} outside the documented "
                "range [5e-6, 1e-3]; proceeding", stacklevel=2)
        if self.batch_size < 1:
            raise ParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if self.patience < 1 or self.patience > self.max_epochs:
            raise ParameterError(
                f"patience must be in [1, max_epochs={self.max_epochs}], "
                f"got {self.patience}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return _from_dict_strict(cls, doc)


class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place. Rejects non-finite gradients."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad
        if not np.isfinite(g).all():
            raise DataError(f"non-finite gradient in {name!r} at step {t}")
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = state.m[name] / (1 - beta1 ** t)
        v_hat = state.v[name] / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


def _epoch_pass(model: StamModel, batches, training: bool, rng=None,
                state: AdamState | None = None, tc: TrainConfig | None = None):
    """One pass over batches; returns (mean loss, accuracy %)."""
    total_loss, correct, count = 0.0, 0, 0
    for batch in batches:
        if training:
            model.zero_grads()
            logits = model.forward(batch.inputs, training=True, rng=rng)
            loss = StamModel.loss(logits, batch.labels)
            loss.backward()
            adam_step(model.params, state, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
        else:
            with no_grad():
                logits = model.forward(batch.inputs)
                loss = StamModel.loss(logits, batch.labels)
        b = len(batch.labels)
        total_loss += loss.item() * b
        correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
        count += b
    return total_loss / count, 100.0 * correct / count


def train(model_config: ModelConfig, train_trials: list[SkeletonTrial],
          val_trials: list[SkeletonTrial], train_config: TrainConfig):
    """Returns (model holding the best-validation parameters, history).

    Early-stops after ``patience`` epochs without validation-loss improvement;
    with an empty validation set the training loss drives stopping instead.
    """
    if not train_trials:
        raise DataError("empty training set")
    tc = train_config
    if not val_trials:
        warnings.warn("empty validation set: early stopping on training loss",
                      stacklevel=2)
    model = StamModel(model_config)
    state = AdamState(model.params)
    rng = np.random.default_rng(tc.seed)
    val_batches = make_batches(val_trials, tc.batch_size) if val_trials else []

    history: list[EpochStats] = []
    best_loss = np.inf
    best_params = None
    since_best = 0
    for epoch in range(1, tc.max_epochs + 1):
        shuffle_seed = int(rng.integers(0, 2**63 - 1))
        batches = make_batches(train_trials, tc.batch_size, shuffle=True,
                               seed=shuffle_seed)
        train_loss, train_acc = _epoch_pass(model, batches, True, rng, state, tc)
        if val_batches:
            val_loss, val_acc = _epoch_pass(model, val_batches, False)
        else:
            val_loss, val_acc = train_loss, train_acc
        history.append(EpochStats(epoch, train_loss, train_acc, val_loss, val_acc))
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = {k: t.data.copy() for k, t in model.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= tc.patience:
                break
    for name, arr in best_params.items():
        model.params[name].data = arr
    return model, history


def write_history_csv(path, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for h in history:
            writer.writerow([h.epoch, repr(h.train_loss), repr(h.train_acc),
                             repr(h.val_loss), repr(h.val_acc)])


def read_history_csv(path) -> list[EpochStats]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(EpochStats(int(row["epoch"]), float(row["train_loss"]),
                                  float(row["train_acc"]), float(row["val_loss"]),
                                  float(row["val_acc"])))
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float          # TN-inclusive one-vs-rest value
    support: int
    degenerate: bool = False


@dataclass
class EvalReport:
    configuration: str
    classes: list[str]
    confusion: np.ndarray    # [n, n], rows = true class, cols = predicted
    accuracy: float          # overall correct/total, percent
    per_class: list[ClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_dict(self) -> dict:
        return {
            "configuration": self.configuration,
            "classes": list(self.classes),
            "confusion": self.confusion.astype(int).tolist(),
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": [
                {"class": c, "precision": m.precision, "recall": m.recall,
                 "f1": m.f1, "accuracy": m.accuracy, "support": m.support,
                 "degenerate": m.degenerate}
                for c, m in zip(self.classes, self.per_class)
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def report_from_confusion(confusion: np.ndarray, classes: list[str],
                          configuration: str = "") -> EvalReport:
    cm = np.asarray(confusion, dtype=np.int64)
    n = cm.shape[0]
    total = int(cm.sum())
    per_class = []
    for c in range(n):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = total - tp - fn - fp
        degenerate = tp + fp + fn == 0
        precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
        recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        acc_c = 100.0 * (tp + tn) / total if total else 0.0
        per_class.append(ClassMetrics(precision, recall, f1, acc_c,
                                      support=tp + fn, degenerate=degenerate))
    accuracy = 100.0 * np.trace(cm) / total if total else 0.0
    return EvalReport(
        configuration, list(classes), cm, accuracy, per_class,
        macro_precision=float(np.mean([m.precision for m in per_class])),
        macro_recall=float(np.mean([m.recall for m in per_class])),
        macro_f1=float(np.mean([m.f1 for m in per_class])))


def evaluate(model: StamModel, trials: list[SkeletonTrial], classes: list[str],
             batch_size: int = 32, configuration: str = "") -> EvalReport:
    n = model.config.n_classes
    for t in trials:
        if t.label >= n:
            raise DataError(f"trial {t.trial_id!r} has label {t.label}, "
                            f"model only knows {n} classes")
    cm = np.zeros((n, n), dtype=np.int64)
    for batch in make_batches(trials, batch_size):
        with no_grad():
            logits = model.forward(batch.inputs)
        pred = logits.data.argmax(axis=1)
        for y, p in zip(batch.labels, pred):
            cm[y, p] += 1
    return report_from_confusion(cm, classes, configuration)


# ---------------------------------------------------------------------------
# dataset-configuration harness (intra / inter / merge)
# ---------------------------------------------------------------------------

CATEGORIES = ("intra", "inter", "merge")


@dataclass
class ConfigurationSpec:
    name: str
    category: str
    train_manifests: list[str]
    test_manifest: str
    train_fraction: float = 0.7
    val_fraction: float = 0.15   # inter mode: held out from training data
    label_map: dict | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ParameterError(f"category must be one of {CATEGORIES}, "
                                 f"got {self.category!r}")
        if not self.train_manifests:
            raise ParameterError(f"configuration {self.name!r} lists no train manifests")
        if self.category == "merge" and len(self.train_manifests) < 2:
            raise ParameterError("merge configurations need >= 2 train manifests")
        if self.category != "merge" and len(self.train_manifests) != 1:
            raise ParameterError(f"{self.category} configurations take exactly "
                                 "one train manifest")

    @classmethod
    def from_dict(cls, doc: dict) -> "ConfigurationSpec":
        return _from_dict_strict(cls, doc)


@dataclass
class DataConfig:
    frames_per_trial: int = 4
    normalize: bool = True

    @classmethod
    def from_dict(cls, doc: dict) -> "DataConfig":
        return _from_dict_strict(cls, doc)


class TrialSource:
    """Loads, windows, and normalizes the trials a manifest references."""

    def __init__(self, data_config: DataConfig | None = None, base_dir="."):
        self.data_config = data_config or DataConfig()
        self.base_dir = base_dir
        self._cache: dict[str, dict[str, SkeletonTrial]] = {}

    def _trials_by_id(self, path: str) -> dict[str, SkeletonTrial]:
        if path not in self._cache:
            full = path if os.path.isabs(path) else os.path.join(self.base_dir, path)
            self._cache[path] = {t.trial_id: t for t in load_csv(full)}
        return self._cache[path]

    def prepare(self, trial: SkeletonTrial) -> SkeletonTrial:
        out = window_trial(trial, self.data_config.frames_per_trial)
        if self.data_config.normalize:
            out = normalize_trial(out)
        return out

    def load_split(self, manifest: DatasetManifest, split: str | None,
                   label_map: dict | None = None) -> list[SkeletonTrial]:
        out = []
        for e in manifest.entries:
            if split is not None and e.split != split:
                continue
            trial = self._trials_by_id(e.path)[e.trial_id]
            if trial.label != e.label:
                raise DataError(f"manifest/CSV label mismatch for {e.trial_id!r}")
            out.append(self.prepare(trial))
        return out


def _check_label_sets(manifests: list[DatasetManifest], label_map: dict | None):
    classes = manifests[0].classes
    for m in manifests[1:]:
        if m.classes != classes and label_map is None:
            raise DataError(
                f"label sets disagree ({manifests[0].name!r} vs {m.name!r}) "
                "and no class mapping was supplied")
    return classes


def run_configuration(spec: ConfigurationSpec, model_config: ModelConfig,
                      train_config: TrainConfig, source: TrialSource,
                      manifests: dict[str, DatasetManifest]) -> EvalReport:
    """Execute one train/test configuration and evaluate the result.

    intra: split the single manifest, train on its train split (a slice of
    which is held out for early stopping), test on its test split.
    inter: train on all of manifest X, test on all of manifest Y.
    merge: union of the train splits of every listed manifest, test on the
    test split of the named test manifest.
    """
    train_mans = [manifests[name] for name in spec.train_manifests]
    test_man = manifests[spec.test_manifest]
    classes = _check_label_sets(train_mans + [test_man], spec.label_map)

    if spec.category == "intra":
        man = train_mans[0]
        if not (man.split_ids("train") and man.split_ids("test")):
            man = split_manifest(man, spec.train_fraction, train_config.seed)
        train_trials = source.load_split(man, "train")
        test_trials = source.load_split(man, "test")
    elif spec.category == "inter":
        train_trials = source.load_split(train_mans[0], None)
        test_trials = source.load_split(test_man, None)
    else:  # merge
        train_trials, seen = [], set()
        for man in train_mans:
            if not man.split_ids("train"):
                man = split_manifest(man, spec.train_fraction, train_config.seed)
            for trial in source.load_split(man, "train"):
                if trial.trial_id in seen:
                    raise DataError(f"duplicate trial id {trial.trial_id!r} in merge")
                seen.add(trial.trial_id)
                train_trials.append(trial)
        test_man_split = test_man
        if not test_man_split.split_ids("test"):
            test_man_split = split_manifest(test_man, spec.train_fraction,
                                            train_config.seed)
        test_trials = source.load_split(test_man_split, "test")

    # hold out a validation slice from the training trials for early stopping
    rng = np.random.default_rng(train_config.seed)
    order = rng.permutation(len(train_trials))
    n_val = max(1, int(round(spec.val_fraction * len(train_trials)))) \
        if len(train_trials) > 1 else 0
    val_idx = set(order[:n_val].tolist())
    fit = [train_trials[i] for i in range(len(train_trials)) if i not in val_idx]
    val = [train_trials[i] for i in range(len(train_trials)) if i in val_idx]

    cfg = copy.deepcopy(model_config)
    if cfg.n_classes != len(classes):
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "n_classes": len(classes)})
    model, _ = train(cfg, fit, val, train_config)
    return evaluate(model, test_trials, classes, configuration=spec.name)
