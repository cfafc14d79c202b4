"""Contrastive objectives at the observation, sample, trial and patient levels.

All losses are evaluated on one mini-batch.  The two instance-level terms
(observation, sample) use raw dot products; the two group-level terms
(trial, patient) use cosine similarity over a temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernel
from .encoder import sample_repr
from .errors import ConfigError, DimensionError, NumericError, ParameterError
from .kernel import Tensor

COMPONENTS = ("patient", "trial", "sample", "observation")


@dataclass(frozen=True)
class LossWeights:
    """Block weights, ordered patient, trial, sample, observation."""

    patient: float = 0.25
    trial: float = 0.25
    sample: float = 0.25
    observation: float = 0.25
    tau: float = 0.1

    def __post_init__(self):
        lams = self.lambdas
        if any(not 0.0 <= v <= 1.0 for v in lams):
            raise ConfigError(f"each lambda must lie in [0, 1], got {lams}")
        if abs(sum(lams) - 1.0) > 1e-9:
            raise ConfigError(f"lambdas must sum to 1 (patient+trial+sample+observation), got {sum(lams)!r}")
        if not self.tau > 0:
            raise ConfigError(f"temperature tau must be positive, got {self.tau}")

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.patient, self.trial, self.sample, self.observation)

    @classmethod
    def from_lambdas(cls, lambdas, tau: float = 0.1) -> "LossWeights":
        if len(lambdas) != 4:
            raise ConfigError(f"expected 4 lambdas (patient, trial, sample, observation), got {len(lambdas)}")
        return cls(*map(float, lambdas), tau=float(tau))


@dataclass
class BatchContext:
    trial_id: np.ndarray
    patient_id: np.ndarray


def _check_finite(*ts: Tensor) -> None:
    for t in ts:
        if not np.isfinite(t.data).all():
            raise NumericError("contrastive loss received non-finite embeddings")


def _instance_contrast(Z: Tensor, Zt: Tensor) -> Tensor:
    """Mean InfoNCE over anchors Z[g, n] against the rows of group g.

    Positive: ``Z[g,n] . Zt[g,n]``.  Denominator: every ``Z[g,n] . Zt[g,m]``
    plus every ``Z[g,n] . Z[g,m]`` with ``m != n``.
    """
    G, N, _ = Z.shape
    cross = kernel.matmul_nt(Z, Zt)
    self_ = kernel.matmul_nt(Z, Z)
    logits = kernel.concat([cross, self_], axis=-1)
    keep = np.ones((N, 2 * N), dtype=bool)
    keep[np.arange(N), N + np.arange(N)] = False
    lse = kernel.logsumexp(logits, axis=-1, where=keep[None])
    # positive read off the same matmul so a lone term cancels exactly
    pos = kernel.sum_(kernel.mul(cross, np.eye(N, dtype=cross.dtype)[None]), axis=-1)
    return kernel.mean(lse - pos)


def observation_loss(H: Tensor, Ht: Tensor) -> Tensor:
    """Timestamp discrimination inside each sample; H, Ht are [B,T,K]."""
    if H.shape != Ht.shape or H.ndim != 3:
        raise DimensionError(f"observation_loss: shapes {H.shape} and {Ht.shape}")
    _check_finite(H, Ht)
    return _instance_contrast(H, Ht)


def sample_loss(h: Tensor, ht: Tensor) -> Tensor:
    """Sample discrimination across the batch; h, ht are [B,K]."""
    if h.shape != ht.shape or h.ndim != 2:
        raise DimensionError(f"sample_loss: shapes {h.shape} and {ht.shape}")
    _check_finite(h, ht)
    B, K = h.shape
    return _instance_contrast(kernel.reshape(h, (1, B, K)), kernel.reshape(ht, (1, B, K)))


def has_eligible_anchor(group_id) -> bool:
    """True when some sample has both an in-batch positive and a negative."""
    g = np.asarray(group_id)
    _, counts = np.unique(g, return_counts=True)
    return bool(counts.size >= 2 and (counts >= 2).any())


def group_loss(h: Tensor, group_id, tau: float) -> Tensor:
    """Supervised-style contrast where same-group samples are positives.

    For each anchor with at least one in-batch positive and one negative,
    averages ``-log(exp(s_ap) / sum_n exp(s_an))`` over its positives, with
    ``s = cos / tau`` and ``n`` ranging over other groups only.  Anchors
    are then averaged; with no eligible anchor the loss is 0.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if h.ndim != 2:
        raise DimensionError(f"group_loss expects [B,K], got {h.shape}")
    g = np.asarray(group_id)
    B = h.shape[0]
    if g.shape != (B,):
        raise DimensionError(f"group ids {g.shape} do not align with batch of {B}")
    _check_finite(h)

    same = g[:, None] == g[None, :]
    pos = same & ~np.eye(B, dtype=bool)
    negs = ~same
    eligible = pos.any(axis=1) & negs.any(axis=1)
    n_anchor = int(eligible.sum())
    if n_anchor == 0:
        return Tensor(np.zeros((), dtype=h.dtype))

    sim = kernel.mul(kernel.matmul_nt(kernel.l2_normalize(h), kernel.l2_normalize(h)), 1.0 / tau)
    pos_w = np.where(eligible[:, None], pos / np.maximum(pos.sum(axis=1, keepdims=True), 1), 0.0)
    pos_term = kernel.sum_(kernel.mul(sim, pos_w / n_anchor))
    lse = kernel.logsumexp(sim, axis=1, where=negs & eligible[:, None])
    neg_term = kernel.sum_(kernel.mul(lse, eligible / n_anchor))
    return neg_term - pos_term


@dataclass
class HierarchicalTerms:
    combined: Tensor
    observation: Tensor | None
    sample: Tensor | None
    levels: int


def hierarchical_terms(H: Tensor, Ht: Tensor, lam_obs: float, lam_samp: float) -> HierarchicalTerms:
    """Observation + sample losses over a stride-2 max-pool pyramid.

    Every level adds ``lam_obs * L_O`` (while T > 1) and ``lam_samp * L_S``
    on the time-pooled embeddings; the sum is divided by the level count.
    A term whose weight is zero is not evaluated.
    """
    if H.shape != Ht.shape or H.ndim != 3:
        raise DimensionError(f"hierarchical loss: shapes {H.shape} and {Ht.shape}")
    obs_sum = samp_sum = None
    levels = 0
    while True:
        levels += 1
        T = H.shape[1]
        if lam_obs and T > 1:
            lo = observation_loss(H, Ht)
            obs_sum = lo if obs_sum is None else obs_sum + lo
        if lam_samp:
            ls = sample_loss(sample_repr(H), sample_repr(Ht))
            samp_sum = ls if samp_sum is None else samp_sum + ls
        if T == 1:
            break
        H = kernel.max_pool_time_stride2(H)
        Ht = kernel.max_pool_time_stride2(Ht)

    zero = Tensor(np.zeros((), dtype=H.dtype))
    obs = obs_sum / levels if obs_sum is not None else (zero if lam_obs else None)
    samp = samp_sum / levels if samp_sum is not None else None
    combined = zero
    if obs is not None:
        combined = combined + obs * lam_obs
    if samp is not None:
        combined = combined + samp * lam_samp
    return HierarchicalTerms(combined, obs, samp, levels)


def hierarchical_obs_sample_loss(H: Tensor, Ht: Tensor, lam_obs: float, lam_samp: float) -> Tensor:
    return hierarchical_terms(H, Ht, lam_obs, lam_samp).combined


@dataclass
class LossBreakdown:
    total: Tensor
    patient: float = 0.0
    trial: float = 0.0
    sample: float = 0.0
    observation: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "total": float(self.total.data),
            "patient": self.patient,
            "trial": self.trial,
            "sample": self.sample,
            "observation": self.observation,
        }


def total_loss(
    H: Tensor | None,
    Ht: Tensor | None,
    ctx: BatchContext,
    w: LossWeights,
    H_trial: Tensor | None = None,
    H_patient: Tensor | None = None,
) -> LossBreakdown:
    """Weighted sum of the four block losses.

    ``H``/``Ht`` feed the observation and sample blocks; the trial and
    patient blocks use the max-pooled ``H_trial``/``H_patient`` views and
    fall back to ``H`` when those are not given.  Blocks with a zero
    weight, and group blocks without an eligible anchor in this batch
    (their loss is identically 0), are skipped entirely; their inputs may
    then be ``None``.  The total is a constant when every block is skipped.
    """
    lp, lr, ls, lo = w.lambdas
    parts: list[Tensor] = []
    out = LossBreakdown(total=None)  # type: ignore[arg-type]

    if lp and has_eligible_anchor(ctx.patient_id):
        src = H_patient if H_patient is not None else H
        L = group_loss(sample_repr(src), ctx.patient_id, w.tau)
        out.patient = float(L.data)
        parts.append(L * lp)
    if lr and has_eligible_anchor(ctx.trial_id):
        src = H_trial if H_trial is not None else H
        L = group_loss(sample_repr(src), ctx.trial_id, w.tau)
        out.trial = float(L.data)
        parts.append(L * lr)
    if ls or lo:
        terms = hierarchical_terms(H, Ht, lo, ls)
        if terms.sample is not None:
            out.sample = float(terms.sample.data)
        if terms.observation is not None:
            out.observation = float(terms.observation.data)
        parts.append(terms.combined)

    if not parts:
        dtype = next((v.dtype for v in (H, Ht, H_trial, H_patient) if v is not None), np.float64)
        parts.append(Tensor(np.zeros((), dtype=dtype)))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    if not math.isfinite(float(total.data)):
        raise NumericError("total loss is not finite")
    out.total = total
    return out
