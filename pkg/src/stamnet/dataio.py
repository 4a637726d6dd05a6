"""Skeleton trial data: CSV format, validation, windowing, normalization,
train/test splitting, batching, and a synthetic gesture generator.

CSV schema (the interchange contract with any upstream landmark extractor):
one frame per row, header required,

    trial_id,frame_idx,label,x0,y0,z0,x1,y1,z1,...,x20,y20,z20

66 columns total; coordinates as decimal text. The companion manifest is
JSON with fields ``name``, ``classes`` (ordered label names) and ``entries``
(``{path, trial_id, label, split}`` per trial).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .tensor import Tensor

N_JOINTS = 21
N_COORDS = 3
WRIST = 0
MIDDLE_MCP = 9

CSV_HEADER = ["trial_id", "frame_idx", "label"] + [
    f"{axis}{j}" for j in range(N_JOINTS) for axis in ("x", "y", "z")
]


@dataclass
class SkeletonTrial:
    trial_id: str
    label: int
    frames: np.ndarray  # [T, 21, 3] float64

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (N_JOINTS, N_COORDS):
            raise DataError(
                f"trial {self.trial_id!r}: frames must be [T,{N_JOINTS},{N_COORDS}], "
                f"got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise DataError(f"trial {self.trial_id!r} has zero frames")
        if not np.isfinite(self.frames).all():
            raise DataError(f"trial {self.trial_id!r} contains non-finite coordinates")
        if self.label < 0:
            raise DataError(f"trial {self.trial_id!r}: negative label {self.label}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ManifestEntry:
    path: str
    trial_id: str
    label: int
    split: str = "train"


@dataclass
class DatasetManifest:
    name: str
    classes: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        for e in self.entries:
            if e.label >= len(self.classes) or e.label < 0:
                raise DataError(
                    f"manifest {self.name!r}: entry {e.trial_id!r} label {e.label} "
                    f"outside class list of length {len(self.classes)}")

    def split_ids(self, split: str) -> set[str]:
        return {e.trial_id for e in self.entries if e.split == split}


@dataclass
class Batch:
    inputs: Tensor        # [B, K, T, N]
    labels: np.ndarray    # [B] int64
    trial_ids: list[str]


def write_csv(path, trials: list[SkeletonTrial]) -> None:
    """One row per frame; floats via repr so reload is value-exact."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for trial in trials:
            for t in range(trial.n_frames):
                coords = [repr(float(v)) for v in trial.frames[t].reshape(-1)]
                writer.writerow([trial.trial_id, t, trial.label] + coords)


def load_csv(path) -> list[SkeletonTrial]:
    """Parse and validate a skeleton CSV, grouping rows into trials."""
    groups: dict[str, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if header != CSV_HEADER:
            raise FormatError(f"{path}: bad header, expected {len(CSV_HEADER)} "
                              f"columns starting with trial_id,frame_idx,label")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise FormatError(
                    f"{path}:{lineno}: expected {len(CSV_HEADER)} columns, got {len(row)}")
            trial_id = row[0]
            try:
                frame_idx = int(row[1])
                label = int(row[2])
                coords = np.array([float(v) for v in row[3:]], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(coords).all():
                raise DataError(f"{path}:{lineno}: non-finite coordinate")
            g = groups.setdefault(trial_id, {"label": label, "frames": {}})
            if g["label"] != label:
                raise DataError(
                    f"{path}:{lineno}: trial {trial_id!r} has conflicting labels")
            if frame_idx in g["frames"]:
                raise DataError(
                    f"{path}:{lineno}: duplicate frame {frame_idx} in trial {trial_id!r}")
            g["frames"][frame_idx] = coords.reshape(N_JOINTS, N_COORDS)
    trials = []
    for trial_id, g in groups.items():
        ordered = [g["frames"][k] for k in sorted(g["frames"])]
        trials.append(SkeletonTrial(trial_id, g["label"], np.stack(ordered)))
    return trials


def write_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "name": manifest.name,
        "classes": list(manifest.classes),
        "entries": [
            {"path": e.path, "trial_id": e.trial_id, "label": e.label, "split": e.split}
            for e in manifest.entries
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("name", "classes", "entries"):
        if key not in doc:
            raise FormatError(f"{path}: manifest missing field {key!r}")
    entries = [ManifestEntry(e["path"], e["trial_id"], int(e["label"]),
                             e.get("split", "train")) for e in doc["entries"]]
    return DatasetManifest(doc["name"], list(doc["classes"]), entries)


def window_trial(trial: SkeletonTrial, t_frames: int) -> SkeletonTrial:
    """Resample to exactly t_frames: evenly spaced (first and last kept) when
    the trial is long enough, last-frame repetition when it is short."""
    if t_frames < 1:
        raise ParameterError(f"t_frames must be >= 1, got {t_frames}")
    raw = trial.n_frames
    if raw >= t_frames:
        if t_frames == 1:
            idx = [0]
        else:
            idx = [int(math.floor(i * (raw - 1) / (t_frames - 1) + 0.5))
                   for i in range(t_frames)]
        frames = trial.frames[idx]
    else:
        pad = np.repeat(trial.frames[-1:], t_frames - raw, axis=0)
        frames = np.concatenate([trial.frames, pad], axis=0)
    return replace(trial, frames=frames)


def normalize_trial(trial: SkeletonTrial) -> SkeletonTrial:
    """Per frame: wrist to origin, scale by that frame's wrist->middle-MCP
    distance (fallback 1 when degenerate). Idempotent."""
    frames = trial.frames.copy()
    for t in range(frames.shape[0]):
        frames[t] -= frames[t, WRIST]
        scale = float(np.linalg.norm(frames[t, MIDDLE_MCP]))
        if scale >= 1e-8:
            frames[t] /= scale
    return replace(trial, frames=frames)


def split_manifest(manifest: DatasetManifest, train_fraction: float,
                   seed: int) -> DatasetManifest:
    """Stratified per-class split; deterministic for a given seed."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must be in (0,1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for idx, e in enumerate(manifest.entries):
        by_class.setdefault(e.label, []).append(idx)
    assignment = {}
    for label in sorted(by_class):
        idxs = by_class[label]
        if len(idxs) < 2:
            warnings.warn(
                f"class {manifest.classes[label]!r} has {len(idxs)} trial(s); "
                "assigning all to train", stacklevel=2)
            for i in idxs:
                assignment[i] = "train"
            continue
        order = rng.permutation(len(idxs))
        n_train = int(math.floor(train_fraction * len(idxs) + 0.5))
        for rank, pos in enumerate(order):
            assignment[idxs[pos]] = "train" if rank < n_train else "test"
    entries = [replace(e, split=assignment[i]) for i, e in enumerate(manifest.entries)]
    return DatasetManifest(manifest.name, list(manifest.classes), entries)


def make_batches(trials: list[SkeletonTrial], batch_size: int, shuffle: bool = False,
                 seed: int = 0) -> list[Batch]:
    """Pack trials into [B, K, T, N] tensors (channel-first for the conv front)."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(len(trials)))
    if shuffle:
        order = list(np.random.default_rng(seed).permutation(len(trials)))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [trials[i] for i in order[start:start + batch_size]]
        # [T,N,K] -> [K,T,N] per trial
        arr = np.stack([np.transpose(t.frames, (2, 0, 1)) for t in chunk])
        labels = np.array([t.label for t in chunk], dtype=np.int64)
        batches.append(Batch(Tensor(arr), labels, [t.trial_id for t in chunk]))
    return batches


# ---------------------------------------------------------------------------
# synthetic gestures: a canonical 21-joint hand with class-specific finger
# flexion, used to verify the pipeline end to end without the real datasets
# ---------------------------------------------------------------------------

_FINGER_BASES = {
    # finger -> (joint ids, knuckle position on the palm, segment lengths)
    "thumb": ([1, 2, 3, 4], np.array([-0.25, -0.05, 0.0]), [0.18, 0.14, 0.10, 0.08]),
    "index": ([5, 6, 7, 8], np.array([-0.12, 0.35, 0.0]), [0.0, 0.22, 0.14, 0.10]),
    "middle": ([9, 10, 11, 12], np.array([0.0, 0.37, 0.0]), [0.0, 0.25, 0.16, 0.11]),
    "ring": ([13, 14, 15, 16], np.array([0.12, 0.35, 0.0]), [0.0, 0.22, 0.14, 0.10]),
    "pinky": ([17, 18, 19, 20], np.array([0.24, 0.30, 0.0]), [0.0, 0.17, 0.11, 0.09]),
}


def _hand_pose(flexion: np.ndarray) -> np.ndarray:
    """Joint positions [21,3] for one flexion angle per finger (radians).

    Each finger is a planar chain curling out of the palm plane; angle 0 is a
    flat, fully extended hand.
    """
    joints = np.zeros((N_JOINTS, N_COORDS))
    joints[WRIST] = 0.0
    for f, (name, (ids, base, lengths)) in enumerate(_FINGER_BASES.items()):
        theta = flexion[f]
        if name == "thumb":
            direction = np.array([-0.707, 0.707, 0.0])
        else:
            direction = np.array([0.0, 1.0, 0.0])
        pos = base.copy()
        bend = 0.0
        for step, (jid, seg) in enumerate(zip(ids, lengths)):
            if step > 0:
                bend += theta
            # curl rotates the segment from the palm plane (y) into depth (z)
            seg_vec = seg * (direction * math.cos(bend)
                             + np.array([0.0, 0.0, 1.0]) * math.sin(bend))
            pos = pos + seg_vec
            joints[jid] = pos
    return joints


def generate_synthetic(n_classes: int, trials_per_class: int, t_frames: int = 4,
                       noise_std: float = 0.01, seed: int = 0,
                       name: str = "synthetic"):
    """Deterministic synthetic dataset: one hand-pose template per class plus
    per-frame linear drift and Gaussian coordinate noise.

    Returns (trials, manifest); with noise_std=0 every trial of a class is
    identical, so templates alone carry the class signal.
    """
    if n_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {n_classes}")
    if trials_per_class < 1:
        raise ParameterError(f"trials_per_class must be >= 1, got {trials_per_class}")
    if noise_std < 0:
        raise ParameterError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(seed)
    # class templates: per-finger flexion angles and a small per-frame drift
    flexions = rng.uniform(0.0, 0.5 * math.pi, size=(n_classes, 5))
    drifts = rng.uniform(-0.01, 0.01, size=(n_classes, N_COORDS))
    templates = []
    for c in range(n_classes):
        base = _hand_pose(flexions[c]) * 0.4 + np.array([0.5, 0.35, 0.0])
        frames = np.stack([base + t * drifts[c] for t in range(t_frames)])
        templates.append(frames)
    classes = [f"class_{c:02d}" for c in range(n_classes)]
    trials, entries = [], []
    for c in range(n_classes):
        for k in range(trials_per_class):
            noise = rng.normal(0.0, noise_std, size=templates[c].shape) \
                if noise_std > 0 else 0.0
            trial_id = f"{name}_{classes[c]}_{k:03d}"
            trials.append(SkeletonTrial(trial_id, c, templates[c] + noise))
            entries.append(ManifestEntry("", trial_id, c))
    return trials, DatasetManifest(name, classes, entries)


def class_templates(n_classes: int, t_frames: int = 4, seed: int = 0) -> np.ndarray:
    """Noise-free templates [n_classes, T, 21, 3] for the same (seed, shape)."""
    trials, _ = generate_synthetic(n_classes, 1, t_frames, noise_std=0.0, seed=seed)
    return np.stack([t.frames for t in trials])
