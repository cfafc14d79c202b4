"""Timestamp / channel masking applied to projected embeddings."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernel
from .errors import DimensionError, ParameterError
from .rng import stream

KINDS = ("binomial", "channel_binomial", "continuous", "channel_continuous", "all_true")
TIMESTAMP_KINDS = ("binomial", "continuous", "all_true")


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "all_true"
    keep_prob: float = 0.5
    n_intervals: int = 5
    interval_frac: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown mask kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("binomial", "channel_binomial") and not 0.0 <= self.keep_prob <= 1.0:
            raise ParameterError(f"keep_prob must lie in [0, 1], got {self.keep_prob}")
        if self.kind in ("continuous", "channel_continuous"):
            if int(self.n_intervals) != self.n_intervals or self.n_intervals < 1:
                raise ParameterError(f"n_intervals must be a positive int, got {self.n_intervals}")
            if not 0.0 < self.interval_frac < 1.0:
                raise ParameterError(f"interval_frac must lie in (0, 1), got {self.interval_frac}")

    @property
    def per_channel(self) -> bool:
        return self.kind not in TIMESTAMP_KINDS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        unknown = set(d) - {"kind", "keep_prob", "n_intervals", "interval_frac"}
        if unknown:
            raise ParameterError(f"unknown mask spec keys: {sorted(unknown)}")
        return cls(**d)


def interval_length(spec: MaskSpec, T: int) -> int:
    return max(1, int(np.floor(spec.interval_frac * T)))


def generate_mask(spec: MaskSpec, B: int, T: int, C: int, seed: int) -> np.ndarray:
    """Boolean keep-mask, [B,T] for timestamp kinds and [B,T,C] for channel kinds."""
    if min(B, T, C) < 1:
        raise ParameterError(f"mask extents must be >= 1, got B={B}, T={T}, C={C}")
    rng = stream(seed, "mask:" + spec.kind)

    if spec.kind == "all_true":
        return np.ones((B, T), dtype=bool)
    if spec.kind == "binomial":
        return rng.random((B, T)) < spec.keep_prob
    if spec.kind == "channel_binomial":
        return rng.random((B, T, C)) < spec.keep_prob

    length = interval_length(spec, T)
    starts = rng.integers(0, T - length + 1, size=(B, spec.n_intervals))
    if spec.kind == "continuous":
        mask = np.ones((B, T), dtype=bool)
        for b in range(B):
            for s in starts[b]:
                mask[b, s : s + length] = False
        return mask

    # channel_continuous: each interval hides a random half of the channels
    n_hidden = max(1, C // 2)
    mask = np.ones((B, T, C), dtype=bool)
    for b in range(B):
        for s in starts[b]:
            chans = rng.choice(C, size=n_hidden, replace=False)
            mask[b, s : s + length][:, chans] = False
    return mask


def apply_mask(x: kernel.Tensor, mask: np.ndarray) -> kernel.Tensor:
    """Zero the masked cells of ``x`` ([B,T,C]); timestamp masks broadcast over C."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[:, :, None]
    if x.ndim != 3 or mask.shape[:2] != x.shape[:2] or mask.shape[2] not in (1, x.shape[2]):
        raise DimensionError(f"mask {mask.shape} is incompatible with input {x.shape}")
    return kernel.mul(x, np.broadcast_to(mask, x.shape))
