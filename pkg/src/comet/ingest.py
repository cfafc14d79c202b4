"""Preprocessing primitives, the synthetic leveled generator, and dataset files.

On disk a dataset is a directory holding ``manifest.json`` and
``samples.bin`` (row-major [N,T,F] little-endian float32).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import LeveledDataset, make_pseudo_trials
from .errors import DataError, DatasetFormatError, ParameterError
from .rng import stream

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
SAMPLES = "samples.bin"


@dataclass
class RawTrial:
    values: np.ndarray  # [L, F]
    patient_id: int
    trial_id: int
    label: int
    sample_rate_hz: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DataError(f"raw trial must be [L,F] with L >= 1, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise DataError(f"trial {self.trial_id} contains non-finite values")
        if not self.sample_rate_hz > 0:
            raise ParameterError(f"sample rate must be positive, got {self.sample_rate_hz}")

    def with_values(self, values: np.ndarray, sample_rate_hz: float | None = None) -> "RawTrial":
        return RawTrial(
            values,
            self.patient_id,
            self.trial_id,
            self.label,
            self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz,
        )


def standard_scale(trial: RawTrial) -> RawTrial:
    """Per-channel z-score within the trial (population std, floored at 1e-8)."""
    x = trial.values
    mu = x.mean(axis=0)
    sd = np.maximum(x.std(axis=0), 1e-8)
    return trial.with_values((x - mu) / sd)


def resample_linear(x: np.ndarray, from_hz: float, to_hz: float) -> np.ndarray:
    """Linear interpolation onto ``round(L * to/from)`` points.

    Output sample ``k`` sits at time ``k / to_hz`` on the input clock, so the
    first sample is preserved and the grid covers the original duration;
    positions past the last input sample hold its value.
    """
    if not (from_hz > 0 and to_hz > 0):
        raise ParameterError(f"sample rates must be positive, got {from_hz} and {to_hz}")
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    L = x.shape[0]
    if from_hz == to_hz:
        out = x.copy()
    else:
        if L < 2:
            raise DataError("cannot resample a signal with fewer than 2 points")
        n_out = int(round(L * to_hz / from_hz))
        if n_out < 1:
            raise DataError(f"resampling {L} points from {from_hz} Hz to {to_hz} Hz leaves nothing")
        src = np.arange(L, dtype=np.float64)
        dst = np.arange(n_out, dtype=np.float64) * (from_hz / to_hz)
        out = np.stack([np.interp(dst, src, x[:, c]) for c in range(x.shape[1])], axis=1)
    return out[:, 0] if squeeze else out


def sliding_window_segment(trial: RawTrial, window: int, overlap_frac: float) -> LeveledDataset:
    """Cut a trial into windows of ``window`` steps with fractional overlap.

    Every window inherits the trial's patient, trial and label.
    """
    L = trial.values.shape[0]
    if window < 1 or window > L:
        raise DataError(f"window {window} does not fit a trial of length {L}")
    if not 0.0 <= overlap_frac < 1.0:
        raise ParameterError(f"overlap_frac must lie in [0, 1), got {overlap_frac}")
    stride = max(1, int(round(window * (1.0 - overlap_frac))))
    starts = range(0, L - window + 1, stride)
    values = np.stack([trial.values[s : s + window] for s in starts])
    n = values.shape[0]
    return LeveledDataset(
        values,
        np.full(n, trial.patient_id),
        np.full(n, trial.trial_id),
        np.full(n, trial.label),
        name=f"trial{trial.trial_id}",
    )


def iqr_filtered_max(intervals: np.ndarray, whisker: float = 1.5) -> int:
    """Largest interval inside [Q1 - w*IQR, Q3 + w*IQR]."""
    q1, q3 = np.percentile(intervals, [25, 75])
    lo, hi = q1 - whisker * (q3 - q1), q3 + whisker * (q3 - q1)
    kept = intervals[(intervals >= lo) & (intervals <= hi)]
    return int(kept.max()) if kept.size else 0


def _as_channel_peaks(rpeaks, n_channels: int) -> list[np.ndarray]:
    if len(rpeaks) and np.ndim(rpeaks[0]) == 0:
        one = np.asarray(rpeaks, dtype=np.int64)
        return [one] * n_channels
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in rpeaks]


def heartbeat_segment(
    trial: RawTrial,
    rpeaks,
    group_size: int = 10,
    whisker: float = 1.5,
) -> LeveledDataset:
    """Split an ECG trial into one sample per heartbeat.

    ``rpeaks`` is a list of R-peak index arrays, one per channel (a single
    flat list applies to all channels).  Steps:

    1. pool consecutive R-R intervals of all channels, drop IQR outliers,
       and take the largest survivor as the standard beat length ``D``;
    2. anchor = median over channels of each channel's first peak;
    3. the peak train of the channel whose first peak is nearest the anchor
       is shifted onto the anchor, and each beat ``p`` is cut as
       ``[p - floor(m/2), p + ceil(m/2))`` with ``m`` the median interval,
       clipped to the trial;
    4. every beat is zero-padded symmetrically to ``D``;
    5. beats are grouped ``group_size`` at a time into pseudo-trials.
    """
    x = trial.values
    L, F = x.shape
    peaks = [p[(p >= 0) & (p < L)] for p in _as_channel_peaks(rpeaks, F)]
    usable = [p for p in peaks if p.size >= 2]
    if not usable:
        raise DataError("heartbeat segmentation needs at least 2 R-peaks on one channel")

    intervals = np.concatenate([np.diff(p) for p in usable])
    D = iqr_filtered_max(intervals, whisker)
    if D <= 0:
        raise DataError("degenerate R-peaks: standard beat duration is zero")
    m = int(np.median(intervals))

    firsts = np.array([p[0] for p in usable])
    anchor = int(np.median(firsts))
    ref = usable[int(np.argmin(np.abs(firsts - anchor)))]
    beats = ref - ref[0] + anchor

    half_lo, half_hi = m // 2, m - m // 2
    segments = []
    for p in beats:
        lo, hi = max(0, p - half_lo), min(L, p + half_hi)
        if hi <= lo:
            continue
        seg = x[lo:hi][:D]
        deficit = D - seg.shape[0]
        left = deficit // 2
        segments.append(np.pad(seg, ((left, deficit - left), (0, 0))))
    n = len(segments)
    ds = LeveledDataset(
        np.stack(segments),
        np.full(n, trial.patient_id),
        np.zeros(n, dtype=np.int64),
        np.full(n, trial.label),
        name=f"trial{trial.trial_id}",
    )
    return make_pseudo_trials(ds, group_size)


def detect_rpeaks(signal: np.ndarray, fs: float, min_rr_s: float = 0.3) -> np.ndarray:
    """Naive local-maximum R-peak picker, for demos only."""
    s = np.asarray(signal, dtype=np.float64)
    thr = s.mean() + 1.5 * s.std()
    cand = np.flatnonzero((s[1:-1] > s[:-2]) & (s[1:-1] >= s[2:]) & (s[1:-1] > thr)) + 1
    gap = max(1, int(min_rr_s * fs))
    peaks: list[int] = []
    for c in cand:
        if peaks and c - peaks[-1] < gap:
            if s[c] > s[peaks[-1]]:
                peaks[-1] = int(c)
            continue
        peaks.append(int(c))
    return np.asarray(peaks, dtype=np.int64)


# ---------------------------------------------------------------------------
# synthetic leveled data


@dataclass(frozen=True)
class SynthConfig:
    patients: int = 16
    trials: int = 4
    samples: int = 16
    timestamps: int = 64
    channels: int = 3
    class_sep: float = 1.0

    def __post_init__(self):
        for key in ("patients", "trials", "samples", "timestamps", "channels"):
            v = getattr(self, key)
            if int(v) != v or v < 1:
                raise ParameterError(f"synth.{key} must be a positive int, got {v!r}")
        if self.patients % 2:
            raise ParameterError("synth.patients must be even for balanced classes")


CLASS_FREQUENCIES = (3.0, 7.0)


def synth_generate(cfg: SynthConfig, seed: int) -> LeveledDataset:
    """Leveled toy data: class frequency + patient offset + trial drift + noise.

    Patient ``p`` has class ``p % 2``, latent ``u_p ~ N(0, I)`` and phase
    ``phi_p``; trial ``r`` adds drift ``v_r ~ N(0, 0.25 I)``.  Each value is
    ``class_sep * sin(2 pi f_y t / T + phi_p) + 0.3 u_p + 0.3 v_r`` plus
    white noise of variance 0.1.
    """
    rng = stream(seed, "synth")
    P, R, S, T, F = cfg.patients, cfg.trials, cfg.samples, cfg.timestamps, cfg.channels
    t = np.arange(T, dtype=np.float64)[:, None]
    values = np.empty((P * R * S, T, F))
    patient = np.repeat(np.arange(P), R * S)
    trial = np.repeat(np.arange(P * R), S)
    label = patient % 2
    i = 0
    for p in range(P):
        u = rng.standard_normal(F)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        wave = cfg.class_sep * np.sin(2.0 * np.pi * CLASS_FREQUENCIES[p % 2] * t / T + phi)
        for _ in range(R):
            v = 0.5 * rng.standard_normal(F)
            base = wave + 0.3 * u + 0.3 * v
            for _ in range(S):
                values[i] = base + math.sqrt(0.1) * rng.standard_normal((T, F))
                i += 1
    return LeveledDataset(values, patient, trial, label, name=f"synth-{seed}")


# ---------------------------------------------------------------------------
# files


def write_dataset(ds: LeveledDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    N, T, F = ds.values.shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_samples": N,
        "n_timestamps": T,
        "n_channels": F,
        "dtype": "f32le",
        "patient_id": ds.patient_id.tolist(),
        "trial_id": ds.trial_id.tolist(),
        "label": ds.label.tolist(),
        "name": ds.name,
    }
    (path / SAMPLES).write_bytes(np.ascontiguousarray(ds.values, dtype="<f4").tobytes())
    (path / MANIFEST).write_text(json.dumps(manifest), encoding="utf-8")
    return path


_MANIFEST_KEYS = {
    "format_version", "n_samples", "n_timestamps", "n_channels",
    "dtype", "patient_id", "trial_id", "label", "name",
}


def read_dataset(path, dtype=np.float64) -> LeveledDataset:
    path = Path(path)
    mpath = path / MANIFEST
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetFormatError(f"{mpath}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{mpath}: malformed JSON at byte {exc.pos}: {exc.msg}") from None
    if not isinstance(manifest, dict):
        raise DatasetFormatError(f"{mpath}: manifest must be a JSON object")
    missing = _MANIFEST_KEYS - set(manifest)
    if missing:
        raise DatasetFormatError(f"{mpath}: missing keys {sorted(missing)}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"{mpath}: unsupported format_version {manifest['format_version']}")
    if manifest["dtype"] != "f32le":
        raise DatasetFormatError(f"{mpath}: unsupported dtype {manifest['dtype']!r}")
    N, T, F = (manifest[k] for k in ("n_samples", "n_timestamps", "n_channels"))
    for key in ("patient_id", "trial_id", "label"):
        if len(manifest[key]) != N:
            raise DatasetFormatError(f"{mpath}: {key} has {len(manifest[key])} entries, expected {N}")

    spath = path / SAMPLES
    try:
        blob = spath.read_bytes()
    except FileNotFoundError:
        raise DatasetFormatError(f"{spath}: samples file not found") from None
    expected = 4 * N * T * F
    if len(blob) != expected:
        raise DatasetFormatError(f"{spath}: expected {expected} bytes for [{N},{T},{F}] f32le, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4").reshape(N, T, F).astype(dtype)
    return LeveledDataset(
        values,
        np.asarray(manifest["patient_id"]),
        np.asarray(manifest["trial_id"]),
        np.asarray(manifest["label"]),
        name=manifest["name"],
    )
