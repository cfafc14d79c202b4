import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comet.datamodel import check_invariants
from comet.errors import DataError, DatasetFormatError, ParameterError
from comet.ingest import (
    RawTrial,
    SynthConfig,
    heartbeat_segment,
    iqr_filtered_max,
    read_dataset,
    resample_linear,
    sliding_window_segment,
    standard_scale,
    synth_generate,
    write_dataset,
)


def raw(values, fs=100.0, patient=0, trial=0, label=0):
    return RawTrial(np.asarray(values, dtype=np.float64), patient, trial, label, fs)


# ---------------------------------------------------------------- scaling


def test_standard_scale_examples():
    assert standard_scale(raw([1.0, 3.0])).values[:, 0].tolist() == [-1.0, 1.0]
    assert standard_scale(raw([5.0, 5.0, 5.0])).values[:, 0].tolist() == [0.0, 0.0, 0.0]


def test_standard_scale_moments_and_idempotence():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 7.0, size=(500, 4))
    x[:, 2] = 1.5
    out = standard_scale(raw(x)).values
    assert np.all(np.abs(out.mean(axis=0)) < 1e-10)
    np.testing.assert_allclose(out.std(axis=0), [1, 1, 0, 1], atol=1e-12)
    np.testing.assert_allclose(standard_scale(raw(out)).values, out, atol=1e-6)


# ---------------------------------------------------------------- resampling


def test_resample_examples():
    x = np.random.default_rng(1).normal(size=(7, 2))
    assert np.array_equal(resample_linear(x, 250, 250), x)
    assert resample_linear(np.array([0.0, 1.0, 2.0, 3.0]), 4, 2).tolist() == [0.0, 2.0]
    assert resample_linear(np.zeros((4000, 1)), 1000, 250).shape == (1000, 1)


def test_resample_is_linear_between_points():
    x = np.array([0.0, 10.0, 20.0])
    out = resample_linear(x, 2, 4)
    assert out.tolist()[:5] == [0.0, 5.0, 10.0, 15.0, 20.0]


def test_resample_errors():
    with pytest.raises(DataError):
        resample_linear(np.array([1.0]), 100, 50)
    with pytest.raises(ParameterError):
        resample_linear(np.zeros(5), 0, 50)
    assert resample_linear(np.array([1.0]), 100, 100).tolist() == [1.0]


# ---------------------------------------------------------------- windows


def test_window_examples():
    assert len(sliding_window_segment(raw(np.zeros((1280, 16))), 256, 0.5)) == 9
    two = sliding_window_segment(raw(np.arange(512.0)), 256, 0.0)
    assert len(two) == 2 and two.values[1, 0, 0] == 256.0
    assert len(sliding_window_segment(raw(np.zeros(300)), 256, 0.5)) == 1


def test_window_inherits_ids():
    ds = sliding_window_segment(raw(np.zeros(100), patient=4, trial=9, label=1), 20, 0.5)
    assert set(ds.patient_id.tolist()) == {4} and set(ds.trial_id.tolist()) == {9} and set(ds.label.tolist()) == {1}


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 400), st.integers(1, 400), st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_window_count_formula(L, window, overlap):
    if window > L:
        with pytest.raises(DataError):
            sliding_window_segment(raw(np.zeros(L)), window, overlap)
        return
    stride = max(1, round(window * (1 - overlap)))
    ds = sliding_window_segment(raw(np.arange(float(L))), window, overlap)
    assert len(ds) == (L - window) // stride + 1
    starts = ds.values[:, 0, 0].astype(int).tolist()
    assert starts == [i * stride for i in range(len(ds))]


def test_window_errors():
    with pytest.raises(DataError):
        sliding_window_segment(raw(np.zeros(10)), 11, 0.5)
    with pytest.raises(ParameterError):
        sliding_window_segment(raw(np.zeros(10)), 5, 1.0)


# ---------------------------------------------------------------- heartbeats


def test_heartbeat_regular_rhythm():
    L = 600
    x = np.zeros((L, 2))
    peaks = [150, 250, 350, 450]
    for p in peaks:
        x[p] = [1.0, 2.0]
    ds = heartbeat_segment(raw(x), [peaks, peaks])
    assert ds.values.shape == (4, 100, 2)
    # each beat covers [p-50, p+50), so the peak sits at offset 50
    for i in range(4):
        assert np.argmax(ds.values[i, :, 0]) == 50
        assert ds.values[i, 50].tolist() == [1.0, 2.0]


def test_heartbeat_outlier_interval_dropped():
    intervals = np.array([100] * 9 + [500])
    assert iqr_filtered_max(intervals) == 100
    peaks = np.concatenate([[0], np.cumsum(intervals)]) + 20
    ds = heartbeat_segment(raw(np.ones((peaks[-1] + 100, 1))), [peaks])
    assert ds.values.shape[1] == 100


def test_heartbeat_pseudo_trials_10_2():
    peaks = 50 + 80 * np.arange(12)
    ds = heartbeat_segment(raw(np.ones((50 + 80 * 12, 1)), patient=3, label=1), [peaks], group_size=10)
    assert len(ds) == 12
    assert sorted(Counter(ds.trial_id.tolist()).values()) == [2, 10]
    assert check_invariants(ds) == []
    assert set(ds.patient_id.tolist()) == {3}


def test_heartbeat_clipped_beats_are_padded():
    x = np.ones((260, 1))
    ds = heartbeat_segment(raw(x), [[10, 110, 210]])
    assert ds.values.shape == (3, 100, 1)
    # the first beat only has 10 samples before the peak; the gap is zero padding
    assert ds.values[0].sum() == 60.0


def test_heartbeat_errors():
    with pytest.raises(DataError):
        heartbeat_segment(raw(np.ones((100, 1))), [[50]])
    with pytest.raises(DataError):
        heartbeat_segment(raw(np.ones((100, 1))), [[50, 50, 50]])


# ---------------------------------------------------------------- synth


def test_synth_counts_and_invariants():
    ds = synth_generate(SynthConfig(patients=12, trials=4, samples=16), seed=41)
    assert len(ds) == 768 and ds.values.shape == (768, 64, 3)
    assert len(set(ds.patient_id.tolist())) == 12 and len(set(ds.trial_id.tolist())) == 48
    assert check_invariants(ds) == []
    assert Counter(ds.label.tolist()) == {0: 384, 1: 384}


def test_synth_determinism():
    a = synth_generate(SynthConfig(patients=4, trials=2, samples=3), seed=5)
    b = synth_generate(SynthConfig(patients=4, trials=2, samples=3), seed=5)
    c = synth_generate(SynthConfig(patients=4, trials=2, samples=3), seed=6)
    assert a.equals(b) and not np.array_equal(a.values, c.values)


def test_synth_class_frequencies():
    # the dominant frequency of the sample mean reveals the class
    ds = synth_generate(SynthConfig(patients=4, trials=2, samples=8, timestamps=64, class_sep=1.0), seed=1)
    for p in range(4):
        mean = ds.values[ds.patient_id == p].mean(axis=0)[:, 0]
        spec = np.abs(np.fft.rfft(mean - mean.mean()))
        assert int(np.argmax(spec)) == (3 if p % 2 == 0 else 7)


def test_synth_config_errors():
    with pytest.raises(ParameterError):
        SynthConfig(patients=3)
    with pytest.raises(ParameterError):
        SynthConfig(samples=0)


# ---------------------------------------------------------------- files


def test_round_trip(tmp_path):
    ds = synth_generate(SynthConfig(patients=2, trials=2, samples=3, timestamps=8), seed=0)
    back = read_dataset(write_dataset(ds, tmp_path / "d"))
    assert np.array_equal(back.values, ds.values.astype(np.float32).astype(np.float64))
    for key in ("patient_id", "trial_id", "label"):
        assert np.array_equal(getattr(back, key), getattr(ds, key))
    assert back.name == ds.name
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["dtype"] == "f32le" and manifest["format_version"] == 1


def test_truncated_samples_reports_byte_counts(tmp_path):
    ds = synth_generate(SynthConfig(patients=2, trials=1, samples=2, timestamps=4, channels=1), seed=0)
    d = write_dataset(ds, tmp_path / "d")
    blob = (d / "samples.bin").read_bytes()
    (d / "samples.bin").write_bytes(blob[:-3])
    with pytest.raises(DatasetFormatError, match=r"expected 64 bytes .* found 61"):
        read_dataset(d)


def test_malformed_manifests(tmp_path):
    ds = synth_generate(SynthConfig(patients=2, trials=1, samples=2, timestamps=4, channels=1), seed=0)
    d = write_dataset(ds, tmp_path / "d")
    good = json.loads((d / "manifest.json").read_text())
    cases = [
        "{not json",
        json.dumps([1, 2]),
        json.dumps({k: v for k, v in good.items() if k != "label"}),
        json.dumps({**good, "format_version": 2}),
        json.dumps({**good, "dtype": "f64le"}),
        json.dumps({**good, "trial_id": good["trial_id"][:-1]}),
    ]
    for text in cases:
        (d / "manifest.json").write_text(text)
        with pytest.raises(DatasetFormatError):
            read_dataset(d)
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "nowhere")


def test_ad_geometry_manifest_accepted(tmp_path):
    N, T, F = 5967, 256, 16
    d = tmp_path / "ad"
    d.mkdir()
    manifest = {
        "format_version": 1, "n_samples": N, "n_timestamps": T, "n_channels": F, "dtype": "f32le",
        "patient_id": [i // 300 for i in range(N)], "trial_id": [i // 9 for i in range(N)],
        "label": [(i // 300) % 2 for i in range(N)], "name": "ad",
    }
    (d / "manifest.json").write_text(json.dumps(manifest))
    with open(d / "samples.bin", "wb") as fh:
        fh.truncate(4 * N * T * F)
    ds = read_dataset(d, dtype=np.float32)
    assert ds.values.shape == (N, T, F)
    assert math.isclose(float(ds.values.sum()), 0.0)
