from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comet.datamodel import (
    LeveledDataset,
    SplitSpec,
    check_invariants,
    concat_datasets,
    epoch_batches,
    label_fraction_indices,
    label_fraction_subset,
    make_pseudo_trials,
    patient_independent_split,
    shuffle,
    validate,
)
from comet.errors import DataError, DimensionError, ParameterError, SpecError, StratificationError


def make_ds(trial_sizes, patients_of_trial=None, labels_of_patient=None, T=2, F=1):
    """One row per sample; trial t has trial_sizes[t] samples."""
    patients_of_trial = patients_of_trial or list(range(len(trial_sizes)))
    labels_of_patient = labels_of_patient or {p: p % 2 for p in set(patients_of_trial)}
    trial = np.repeat(np.arange(len(trial_sizes)), trial_sizes)
    patient = np.array([patients_of_trial[t] for t in trial], dtype=np.int64)
    label = np.array([labels_of_patient[p] for p in patient], dtype=np.int64)
    values = np.arange(trial.size * T * F, dtype=np.float64).reshape(trial.size, T, F)
    return LeveledDataset(values, patient, trial, label)


def test_dataset_shape_checks():
    with pytest.raises(DimensionError):
        LeveledDataset(np.zeros((3, 2)), [0, 0, 0], [0, 0, 0], [0, 0, 0])
    with pytest.raises(DimensionError):
        LeveledDataset(np.zeros((3, 2, 1)), [0, 0], [0, 0, 0], [0, 0, 0])


def test_invariant_checker():
    ds = make_ds([2, 2], patients_of_trial=[0, 0])
    assert check_invariants(ds) == []
    bad = LeveledDataset(np.zeros((2, 1, 1)), [0, 1], [5, 5], [0, 1])
    assert any("trial 5" in p for p in check_invariants(bad))
    two_labels = LeveledDataset(np.zeros((2, 1, 1)), [0, 0], [0, 1], [0, 1])
    with pytest.raises(DataError):
        validate(two_labels)
    # unlabeled samples do not count as a second label
    validate(LeveledDataset(np.zeros((2, 1, 1)), [0, 0], [0, 1], [0, -1]))


# ---------------------------------------------------------------- split


def test_split_ad_sizes():
    # 23 patients; patients 17,18 hold 891 samples and 19,20 hold 747
    counts = {p: 200 for p in range(23)}
    counts.update({17: 450, 18: 441, 19: 400, 20: 347})
    rest = 4329 - sum(v for p, v in counts.items() if p not in (17, 18, 19, 20))
    counts[0] += rest
    pid = np.concatenate([np.full(c, p) for p, c in counts.items()])
    ds = LeveledDataset(np.zeros((pid.size, 1, 1)), pid, pid, pid % 2)
    tr, va, te = patient_independent_split(ds, SplitSpec({17, 18}, {19, 20}))
    assert (len(tr), len(va), len(te)) == (4329, 891, 747)


def test_split_identity_and_errors():
    ds = make_ds([3, 3, 3])
    tr, va, te = patient_independent_split(ds, SplitSpec())
    assert tr.values.shape == ds.values.shape and np.array_equal(tr.values, ds.values)
    assert len(va) == len(te) == 0
    with pytest.raises(SpecError):
        patient_independent_split(ds, SplitSpec({7}, set()))
    with pytest.raises(SpecError):
        patient_independent_split(ds, SplitSpec({0, 1}, {2}))
    with pytest.raises(SpecError):
        SplitSpec({1}, {1})


def test_split_conserves_per_patient_counts():
    rng = np.random.default_rng(0)
    sizes = rng.integers(1, 9, size=24)
    ds = make_ds(list(sizes), patients_of_trial=[t // 2 for t in range(24)])
    tr, va, te = patient_independent_split(ds, SplitSpec({10}, {11}))
    want = Counter(ds.patient_id.tolist())
    got = Counter(tr.patient_id.tolist()) + Counter(va.patient_id.tolist()) + Counter(te.patient_id.tolist())
    assert got == want
    assert set(va.patient_id.tolist()) == {10} and set(te.patient_id.tolist()) == {11}
    assert not set(tr.patient_id.tolist()) & {10, 11}


# ---------------------------------------------------------------- pseudo-trials


def _run_sizes(trial_id):
    return [len(list(g)) for _, g in __import__("itertools").groupby(trial_id.tolist())]


def test_pseudo_trials_examples():
    ds = LeveledDataset(np.zeros((25, 1, 1)), np.zeros(25), np.zeros(25), np.zeros(25))
    assert _run_sizes(make_pseudo_trials(ds, 10).trial_id) == [10, 10, 5]
    two = LeveledDataset(np.zeros((14, 1, 1)), [0] * 7 + [1] * 7, np.zeros(14), [0] * 7 + [1] * 7)
    out = make_pseudo_trials(two, 5)
    assert _run_sizes(out.trial_id) == [5, 2, 5, 2]
    assert check_invariants(out) == []
    twelve = LeveledDataset(np.zeros((12, 1, 1)), np.zeros(12), np.zeros(12), np.zeros(12))
    assert sorted(Counter(make_pseudo_trials(twelve, 10).trial_id.tolist()).values()) == [2, 10]
    with pytest.raises(ParameterError):
        make_pseudo_trials(ds, 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 15), min_size=1, max_size=6), st.integers(2, 7))
def test_pseudo_trials_preserve_everything_but_trial(counts, g):
    pid = np.repeat(np.arange(len(counts)), counts)
    ds = LeveledDataset(np.random.default_rng(0).normal(size=(pid.size, 2, 1)), pid, np.zeros(pid.size), pid % 2)
    out = make_pseudo_trials(ds, g)
    assert np.array_equal(out.values, ds.values)
    assert np.array_equal(out.patient_id, ds.patient_id)
    assert np.array_equal(out.label, ds.label)
    assert check_invariants(out) == []
    for size in Counter(out.trial_id.tolist()).values():
        assert 1 <= size <= g


# ---------------------------------------------------------------- label fractions


def test_label_fraction_examples():
    ds = make_ds([50, 50])
    assert label_fraction_subset(ds, 1.0, seed=0).equals(ds)
    sub = label_fraction_subset(ds, 0.1, seed=0)
    assert Counter(sub.label.tolist()) == {0: 5, 1: 5}
    assert np.array_equal(label_fraction_indices(ds, 0.1, 3), label_fraction_indices(ds, 0.1, 3))


def test_label_fraction_counting_oracle():
    # AD-like class sizes summing to 4329
    ds = make_ds([2117, 2212])
    sub = label_fraction_subset(ds, 0.01, seed=4)
    assert Counter(sub.label.tolist()) == {0: 21, 1: 22}
    tiny = make_ds([3, 40])
    assert Counter(label_fraction_subset(tiny, 0.01, seed=0).label.tolist()) == {0: 1, 1: 1}


def test_label_fraction_errors():
    ds = LeveledDataset(np.zeros((4, 1, 1)), [0, 0, 1, 1], [0, 0, 1, 1], [0, 0, 2, 2])
    with pytest.raises(StratificationError):
        label_fraction_subset(ds, 0.5, seed=0)
    with pytest.raises(ParameterError):
        label_fraction_subset(make_ds([4]), 0.0, seed=0)


# ---------------------------------------------------------------- shuffles


def _is_perm(p, n):
    return sorted(p.tolist()) == list(range(n))


def test_trial_shuffle_contiguity():
    ds = make_ds([3, 2])
    for seed in range(20):
        p = shuffle(ds, "trial", seed=seed)
        assert _is_perm(p, 5)
        pos = [i for i, s in enumerate(p) if ds.trial_id[s] == 0]
        assert pos == list(range(pos[0], pos[0] + 3))


def test_random_shuffle_deterministic():
    ds = make_ds([7, 9])
    assert np.array_equal(shuffle(ds, "random", seed=5), shuffle(ds, "random", seed=5))
    assert not np.array_equal(shuffle(ds, "random", seed=5), shuffle(ds, "random", seed=6))


def test_batch_shuffle_sets_touch_at_most_two_trials():
    ds = make_ds([9] * 6)
    for seed in range(20):
        p = shuffle(ds, "batch", batch_size=4, seed=seed)
        assert _is_perm(p, 54)
        for i in range(0, 52, 4):
            trials = sorted(set(ds.trial_id[p[i : i + 4]].tolist()))
            assert len(trials) <= 2 and trials[-1] - trials[0] <= 1


def test_shuffle_errors():
    ds = make_ds([2])
    with pytest.raises(ParameterError):
        shuffle(ds, "patient")
    with pytest.raises(ParameterError):
        shuffle(ds, "batch", batch_size=0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(1, 12), min_size=1, max_size=10),
    st.sampled_from(["trial", "batch", "random"]),
    st.integers(1, 10),
    st.integers(0, 2**31 - 1),
)
def test_every_shuffle_is_a_permutation(sizes, kind, bs, seed):
    ds = make_ds(sizes)
    assert _is_perm(shuffle(ds, kind, batch_size=bs, seed=seed), len(ds))


# ---------------------------------------------------------------- epoch batches


def test_epoch_batches_sizes_and_memberships():
    perm = np.arange(10)
    plan = epoch_batches(perm, 4, epoch=0, seed=1)
    assert sorted(len(b) for b in plan) == [2, 4, 4]
    e0 = {frozenset(b.tolist()) for b in plan}
    e1 = {frozenset(b.tolist()) for b in epoch_batches(perm, 4, epoch=1, seed=1)}
    assert e0 == e1 == {frozenset(range(0, 4)), frozenset(range(4, 8)), frozenset({8, 9})}
    orders = [tuple(np.concatenate(list(epoch_batches(perm, 4, e, seed=1))).tolist()) for e in range(5)]
    assert len(set(orders)) > 1
    with pytest.raises(ParameterError):
        epoch_batches(perm, 0, 0, 0)


def test_epoch_batches_cover_each_index_once():
    for trial in range(50):
        rng = np.random.default_rng(trial)
        n = int(rng.integers(1, 60))
        perm = rng.permutation(n)
        plan = epoch_batches(perm, int(rng.integers(1, 12)), int(rng.integers(0, 100)), trial)
        assert sorted(plan.flat().tolist()) == list(range(n))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(3, 10), min_size=1, max_size=8),
    st.integers(3, 10),
    st.integers(0, 2**31 - 1),
    st.integers(0, 30),
)
def test_batch_shuffle_keeps_trial_pairs(sizes, bs, seed, epoch):
    # batch_size between 3 and the smallest trial; a lone leftover sample cannot pair
    bs = min(bs, min(sizes))
    ds = make_ds(sizes)
    if bs < 3 or len(ds) % bs == 1:
        return
    plan = epoch_batches(shuffle(ds, "batch", bs, seed), bs, epoch, seed)
    for b in plan:
        assert max(Counter(ds.trial_id[b].tolist()).values()) >= 2


def test_concat_renumbers_trials():
    a, b = make_ds([2, 2]), make_ds([3])
    out = concat_datasets([a, b])
    assert out.trial_id.tolist() == [0, 0, 1, 1, 2, 2, 2]
    with pytest.raises(DataError):
        concat_datasets([])
