"""Leveled dataset container, patient-independent splits and batch planning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, ParameterError, SpecError, StratificationError
from .rng import stream

SHUFFLE_KINDS = ("trial", "batch", "random")


@dataclass
class LeveledDataset:
    """N samples of shape [T,F] with aligned patient, trial and label vectors.

    ``label == -1`` marks an unlabeled sample.
    """

    values: np.ndarray
    patient_id: np.ndarray
    trial_id: np.ndarray
    label: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.dtype.kind != "f":
            self.values = self.values.astype(np.float64)
        self.patient_id = np.asarray(self.patient_id, dtype=np.int64)
        self.trial_id = np.asarray(self.trial_id, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        if self.values.ndim != 3:
            raise DimensionError(f"values must be [N,T,F], got shape {self.values.shape}")
        n = self.values.shape[0]
        for key in ("patient_id", "trial_id", "label"):
            if getattr(self, key).shape != (n,):
                raise DimensionError(f"{key} has shape {getattr(self, key).shape}, expected ({n},)")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_timestamps(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def subset(self, idx, name: str | None = None) -> "LeveledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LeveledDataset(
            self.values[idx],
            self.patient_id[idx],
            self.trial_id[idx],
            self.label[idx],
            name=name or self.name,
        )

    def patients(self) -> np.ndarray:
        return np.unique(self.patient_id)

    def classes(self) -> np.ndarray:
        return np.unique(self.label[self.label >= 0])

    def equals(self, other: "LeveledDataset") -> bool:
        return (
            self.name == other.name
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.patient_id, other.patient_id)
            and np.array_equal(self.trial_id, other.trial_id)
            and np.array_equal(self.label, other.label)
        )


def check_invariants(ds: LeveledDataset) -> list[str]:
    """Return the list of violated dataset invariants (empty when valid)."""
    problems = []
    if not np.isfinite(ds.values).all():
        problems.append("values contain non-finite entries")
    trial_owner: dict[int, int] = {}
    for t, p in zip(ds.trial_id.tolist(), ds.patient_id.tolist()):
        if trial_owner.setdefault(t, p) != p:
            problems.append(f"trial {t} belongs to patients {trial_owner[t]} and {p}")
            break
    labeled = ds.label >= 0
    for p in np.unique(ds.patient_id[labeled]):
        labs = np.unique(ds.label[labeled & (ds.patient_id == p)])
        if labs.size > 1:
            problems.append(f"patient {p} carries several labels {labs.tolist()}")
    return problems


def validate(ds: LeveledDataset) -> LeveledDataset:
    problems = check_invariants(ds)
    if problems:
        raise DataError(f"{ds.name}: " + "; ".join(problems))
    return ds


def concat_datasets(parts: list[LeveledDataset], name: str = "dataset", renumber_trials: bool = True) -> LeveledDataset:
    """Stack datasets; trial IDs are offset so that parts never share a trial."""
    if not parts:
        raise DataError("nothing to concatenate")
    trials = []
    offset = 0
    for ds in parts:
        if renumber_trials and len(ds):
            _, local = np.unique(ds.trial_id, return_inverse=True)
            trials.append(local + offset)
            offset += int(local.max()) + 1
        else:
            trials.append(ds.trial_id)
    return LeveledDataset(
        np.concatenate([d.values for d in parts]),
        np.concatenate([d.patient_id for d in parts]),
        np.concatenate(trials),
        np.concatenate([d.label for d in parts]),
        name=name,
    )


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    val_patients: set[int] = field(default_factory=set)
    test_patients: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.val_patients = {int(p) for p in self.val_patients}
        self.test_patients = {int(p) for p in self.test_patients}
        both = self.val_patients & self.test_patients
        if both:
            raise SpecError(f"patients {sorted(both)} are in both validation and test sets")


def patient_independent_split(ds: LeveledDataset, spec: SplitSpec):
    """Route samples to (train, val, test) by patient ID."""
    known = set(ds.patients().tolist())
    unknown = (spec.val_patients | spec.test_patients) - known
    if unknown:
        raise SpecError(f"split names unknown patients {sorted(unknown)}")
    in_val = np.isin(ds.patient_id, list(spec.val_patients))
    in_test = np.isin(ds.patient_id, list(spec.test_patients))
    in_train = ~(in_val | in_test)
    if not in_train.any():
        raise SpecError("split leaves the training partition empty")
    return (
        ds.subset(np.flatnonzero(in_train), name=f"{ds.name}/train"),
        ds.subset(np.flatnonzero(in_val), name=f"{ds.name}/val"),
        ds.subset(np.flatnonzero(in_test), name=f"{ds.name}/test"),
    )


def make_pseudo_trials(ds: LeveledDataset, group_size: int) -> LeveledDataset:
    """Group runs of ``group_size`` adjacent same-patient samples into trials.

    Samples are taken in dataset order; a short final run per patient forms
    its own trial.  Only ``trial_id`` changes.
    """
    if int(group_size) != group_size or group_size < 2:
        raise ParameterError(f"group_size must be an int >= 2, got {group_size!r}")
    trial = np.empty(len(ds), dtype=np.int64)
    next_id = 0
    pos_in_run = 0
    prev_patient = None
    for i, p in enumerate(ds.patient_id.tolist()):
        if p != prev_patient or pos_in_run == group_size:
            if prev_patient is not None:
                next_id += 1
            pos_in_run = 0
            prev_patient = p
        trial[i] = next_id
        pos_in_run += 1
    return LeveledDataset(ds.values, ds.patient_id.copy(), trial, ds.label.copy(), name=ds.name)


def label_fraction_indices(train: LeveledDataset, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of a stratified subsample keeping floor(fraction * n_class)
    (at least 1) samples of every class."""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    labeled = np.flatnonzero(train.label >= 0)
    if labeled.size == 0:
        raise StratificationError(f"{train.name}: no labeled samples")
    classes = np.arange(int(train.label.max()) + 1)
    if fraction == 1.0:
        return labeled
    rng = stream(seed, "label-fraction")
    keep = []
    for c in classes:
        members = np.flatnonzero(train.label == c)
        if members.size == 0:
            raise StratificationError(f"{train.name}: class {c} has no samples")
        k = max(1, int(np.floor(fraction * members.size)))
        keep.append(np.sort(rng.choice(members, size=k, replace=False)))
    return np.sort(np.concatenate(keep))


def label_fraction_subset(train: LeveledDataset, fraction: float, seed: int) -> LeveledDataset:
    return train.subset(label_fraction_indices(train, fraction, seed))


# ---------------------------------------------------------------------------
# shuffling and batching


def _blocks_by_trial(trial_id: np.ndarray) -> list[np.ndarray]:
    order = np.argsort(trial_id, kind="stable")
    _, starts = np.unique(trial_id[order], return_index=True)
    return np.split(order, starts[1:])


def shuffle(ds: LeveledDataset, kind: str, batch_size: int = 1, seed: int = 0) -> np.ndarray:
    """Permutation of ``0..N-1`` ordering the dataset for pre-training.

    ``trial``: samples of a trial stay contiguous; order within each trial
    and the order of trials are shuffled.
    ``batch``: samples are sorted by trial ID and cut into consecutive sets
    of ``batch_size``; order within each set and the order of the full sets
    are shuffled.  A short remainder set stays last so that batch
    boundaries downstream coincide with the sets.
    ``random``: uniform permutation.
    """
    if kind not in SHUFFLE_KINDS:
        raise ParameterError(f"unknown shuffle kind {kind!r}; expected one of {SHUFFLE_KINDS}")
    rng = stream(seed, "shuffle:" + kind)
    n = len(ds)
    if kind == "random":
        return rng.permutation(n)
    if kind == "trial":
        blocks = [rng.permutation(b) for b in _blocks_by_trial(ds.trial_id)]
        order = rng.permutation(len(blocks))
        return np.concatenate([blocks[i] for i in order]) if blocks else np.arange(0)

    if int(batch_size) != batch_size or batch_size < 1:
        raise ParameterError(f"batch_size must be a positive int, got {batch_size!r}")
    sorted_idx = np.argsort(ds.trial_id, kind="stable")
    n_full = n // batch_size
    sets = [rng.permutation(sorted_idx[i * batch_size : (i + 1) * batch_size]) for i in range(n_full)]
    tail = sorted_idx[n_full * batch_size :]
    order = rng.permutation(n_full)
    out = [sets[i] for i in order]
    if tail.size:
        out.append(rng.permutation(tail))
    return np.concatenate(out) if out else np.arange(0)


@dataclass
class BatchPlan:
    batches: list[np.ndarray]
    batch_size: int
    seed: int
    epoch: int = 0

    def __iter__(self):
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.batches) if self.batches else np.arange(0)


def epoch_batches(perm: np.ndarray, batch_size: int, epoch: int, seed: int) -> BatchPlan:
    """Cut a pre-shuffled order into fixed batches and reshuffle them locally.

    Batch membership is the same every epoch; only the order inside each
    batch and the order of the batches depend on ``(seed, epoch)``.
    """
    if int(batch_size) != batch_size or batch_size < 1:
        raise ParameterError(f"batch_size must be a positive int, got {batch_size!r}")
    perm = np.asarray(perm, dtype=np.int64)
    rng = stream(seed, "epoch-batches", epoch)
    chunks = [perm[i : i + batch_size] for i in range(0, perm.size, batch_size)]
    chunks = [rng.permutation(c) for c in chunks]
    order = rng.permutation(len(chunks))
    return BatchPlan([chunks[i] for i in order], int(batch_size), seed, epoch)
