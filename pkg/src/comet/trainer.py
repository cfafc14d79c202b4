"""Self-supervised pre-training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernel
from .augment import MaskSpec, generate_mask
from .datamodel import LeveledDataset, epoch_batches, shuffle
from .encoder import EncoderConfig, EncoderParams, encode, init_params, save_checkpoint
from .errors import ConfigError, DataError, TrainingError
from .kernel import GradTape, Tensor
from .losses import BatchContext, LossWeights, has_eligible_anchor, total_loss
from .rng import stream

log = logging.getLogger(__name__)

PAPER_MASKS = (
    MaskSpec("all_true"),
    MaskSpec("all_true"),
    MaskSpec("continuous"),
    MaskSpec("continuous"),
)

HISTORY_COLUMNS = ("epoch", "L_total", "L_P", "L_R", "L_S", "L_O")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    # per-block masks: observation, sample, trial, patient
    masks: Sequence[MaskSpec] = PAPER_MASKS
    shuffle: str = "batch"
    seed: int = 41
    checkpoint: str | None = None
    dtype: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be a positive int, got {self.batch_size}")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError(f"train.epochs must be a non-negative int, got {self.epochs}")
        if len(self.masks) != 4:
            raise ConfigError(f"train.masks needs 4 specs (observation, sample, trial, patient), got {len(self.masks)}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"train.dtype must be float32 or float64, got {self.dtype!r}")
        self.masks = tuple(self.masks)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_update(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            name = getattr(params[i], "name", None) or f"#{i}"
            raise TrainingError(f"non-finite gradient for parameter {name} at step {state.step + 1}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= max_norm or total == 0.0:
        return grads
    return [g * (max_norm / total) for g in grads]


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class PretrainResult:
    params: EncoderParams
    history: list[dict[str, float]]
    encode_passes: int = 0
    steps: int = 0

    def __iter__(self):
        # allows ``params, history = pretrain(...)``
        return iter((self.params, self.history))


class _ViewCache:
    """Encodes the batch once per needed view.

    The deterministic all_true view is encoded once and shared by every
    block asking for it; each request for a random spec draws a fresh
    mask and costs its own pass.
    """

    def __init__(self, x: np.ndarray, params: EncoderParams, seed_rng: np.random.Generator):
        self.x = x
        self.params = params
        self.rng = seed_rng
        self.passes: list[tuple[MaskSpec, Tensor]] = []

    def get(self, spec: MaskSpec) -> Tensor:
        if spec.kind == "all_true":
            for s, H in self.passes:
                if s.kind == "all_true":
                    return H
        B, T, _ = self.x.shape
        mask = None
        if spec.kind != "all_true":
            mask_seed = int(self.rng.integers(0, 2**63 - 1))
            mask = generate_mask(spec, B, T, self.params.config.conv_hidden, mask_seed)
        H = encode(self.x, self.params, mask)
        self.passes.append((spec, H))
        return H


def _batch_loss(x, trial_id, patient_id, params: EncoderParams, cfg: TrainConfig, seed_rng):
    views = _ViewCache(x, params, seed_rng)
    w = cfg.weights
    lp, lr, ls, lo = w.lambdas
    obs_spec, samp_spec, trial_spec, pat_spec = cfg.masks
    H = Ht = H_trial = H_patient = None
    if ls or lo:
        H = views.get(obs_spec)
        Ht = views.get(samp_spec)
    # a group block without an eligible anchor contributes exactly 0: no pass
    if lr and has_eligible_anchor(trial_id):
        H_trial = views.get(trial_spec)
    if lp and has_eligible_anchor(patient_id):
        H_patient = views.get(pat_spec)
    ctx = BatchContext(trial_id=trial_id, patient_id=patient_id)
    src = H if H is not None else (H_trial if H_trial is not None else H_patient)
    out = total_loss(src, Ht, ctx, w, H_trial=H_trial, H_patient=H_patient)
    return out, len(views.passes)


def pretrain(ds: LeveledDataset, enc_cfg: EncoderConfig, cfg: TrainConfig, init: EncoderParams | None = None) -> PretrainResult:
    """Optimize the weighted four-level objective with Adam.

    The dataset is ordered once by ``cfg.shuffle``; every epoch re-shuffles
    locally inside fixed batches.  Returns the last-epoch parameters and a
    per-epoch history of mean batch losses.
    """
    if len(ds) == 0:
        raise DataError("cannot pre-train on an empty dataset")
    if ds.n_channels != enc_cfg.input_dim:
        raise DataError(f"dataset has {ds.n_channels} channels, encoder expects {enc_cfg.input_dim}")
    dtype = np.dtype(cfg.dtype)
    params = (init or init_params(enc_cfg, cfg.seed)).copy(dtype=dtype, requires_grad=True)
    tensors = list(params)
    state = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    values = ds.values.astype(dtype, copy=False)
    order = shuffle(ds, cfg.shuffle, cfg.batch_size, cfg.seed)

    history: list[dict[str, float]] = []
    passes = 0
    for epoch in range(cfg.epochs):
        plan = epoch_batches(order, cfg.batch_size, epoch, cfg.seed)
        sums = dict.fromkeys(("total", "patient", "trial", "sample", "observation"), 0.0)
        for b, idx in enumerate(plan):
            seed_rng = stream(cfg.seed, "view-masks", epoch, b)
            with GradTape() as tape:
                try:
                    out, n_pass = _batch_loss(values[idx], ds.trial_id[idx], ds.patient_id[idx], params, cfg, seed_rng)
                except ArithmeticError as exc:
                    raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            passes += n_pass
            if out.total.requires_grad:
                grads_map = kernel.backward(tape, out.total)
                grads = [grads_map.get(t, np.zeros_like(t.data)) for t in tensors]
            else:
                # every block was skipped for this batch: the gradient is exactly 0
                grads = [np.zeros_like(t.data) for t in tensors]
            if cfg.grad_clip:
                grads = clip_by_global_norm(grads, cfg.grad_clip)
            try:
                adam_update(tensors, grads, state, cfg.lr)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            for k, v in out.as_dict().items():
                sums[k] += v
        n = len(plan)
        rec = {"epoch": epoch + 1, **{k: v / n for k, v in sums.items()}}
        if not all(math.isfinite(v) for v in rec.values()):
            raise TrainingError(f"epoch {epoch}: non-finite loss in history {rec}")
        history.append(rec)
        log.info("epoch %d  loss %.5f", epoch + 1, rec["total"])

    result = PretrainResult(params, history, passes, state.step)
    if cfg.checkpoint:
        save_checkpoint(params, cfg.checkpoint)
    return result


def write_history_csv(history: list[dict[str, float]], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([
                rec["epoch"],
                repr(rec["total"]),
                repr(rec["patient"]),
                repr(rec["trial"]),
                repr(rec["sample"]),
                repr(rec["observation"]),
            ])
