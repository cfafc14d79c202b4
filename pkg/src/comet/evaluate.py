"""Downstream evaluation: linear probe, full fine-tuning, metrics, clustering, anomaly sets."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import kernel
from .datamodel import LeveledDataset, label_fraction_subset
from .encoder import EncoderParams, encode, sample_repr
from .errors import ConfigError, DataError, DimensionError, EmptyInputError, NumericError
from .kernel import GradTape, Tensor
from .rng import stream
from .trainer import AdamState, adam_update

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision_macro", "recall_macro", "f1_macro", "auroc_macro", "auprc_macro")


# ---------------------------------------------------------------------------
# classification metrics


@dataclass
class MetricsReport:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    auroc_macro: float
    auprc_macro: float
    # classes left out of the ranking metrics because y_true has no positive
    # (or no negative) for them
    excluded_classes: tuple[int, ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def auroc_binary(pos_mask: np.ndarray, score: np.ndarray) -> float:
    """Mann-Whitney AUROC; tied scores share their average rank."""
    n_pos = int(pos_mask.sum())
    n_neg = pos_mask.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC needs at least one positive and one negative")
    ranks = rankdata(score, method="average")
    u = ranks[pos_mask].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc_binary(pos_mask: np.ndarray, score: np.ndarray) -> float:
    """Step-interpolated area under the precision-recall curve.

    Thresholds run over the distinct scores from high to low; each step adds
    ``(recall_k - recall_{k-1}) * precision_k``.
    """
    n_pos = int(pos_mask.sum())
    if n_pos == 0:
        raise DataError("AUPRC needs at least one positive")
    order = np.argsort(-score, kind="stable")
    s = score[order]
    hit = pos_mask[order].astype(np.float64)
    tp = np.cumsum(hit)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = tp[ends]
    precision = tp / (ends + 1)
    recall = tp / n_pos
    steps = np.diff(np.r_[0.0, recall])
    return float((steps * precision).sum())


def compute_metrics(y_true, scores) -> MetricsReport:
    """Accuracy plus macro precision/recall/F1/AUROC/AUPRC.

    Predictions are the per-row argmax of ``scores``.  Precision, recall and
    F1 are averaged over the classes seen in ``y_true`` or in the
    predictions, with 0 for an empty denominator.  AUROC and AUPRC are
    one-vs-rest per class, averaged over the classes that have both
    positives and negatives in ``y_true``.
    """
    y = np.asarray(y_true)
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2 or y.ndim != 1 or S.shape[0] != y.shape[0]:
        raise DimensionError(f"compute_metrics: y {y.shape} and scores {S.shape} do not align")
    n, n_classes = S.shape
    if n == 0:
        raise EmptyInputError("compute_metrics on an empty set")
    if not np.isfinite(S).all():
        raise NumericError("scores contain non-finite values")
    if y.dtype.kind not in "iu":
        if not np.all(np.mod(y, 1) == 0):
            raise DataError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes}), got range [{y.min()}, {y.max()}]")

    pred = np.argmax(S, axis=1)
    acc = float(np.mean(pred == y))
    labels = np.union1d(y, pred)
    prec, rec, f1 = [], [], []
    for c in labels:
        tp = float(np.sum((pred == c) & (y == c)))
        fp = float(np.sum((pred == c) & (y != c)))
        fn = float(np.sum((pred != c) & (y == c)))
        p = _safe_div(tp, tp + fp)
        r = _safe_div(tp, tp + fn)
        prec.append(p)
        rec.append(r)
        f1.append(_safe_div(2 * p * r, p + r))

    aurocs, auprcs, excluded = [], [], []
    for c in range(n_classes):
        pos = y == c
        if not pos.any() or pos.all():
            excluded.append(c)
            continue
        aurocs.append(auroc_binary(pos, S[:, c]))
        auprcs.append(auprc_binary(pos, S[:, c]))
    if not aurocs:
        raise DataError(f"no class has both positives and negatives in y_true (classes {list(range(n_classes))})")
    return MetricsReport(
        accuracy=acc,
        precision_macro=float(np.mean(prec)),
        recall_macro=float(np.mean(rec)),
        f1_macro=float(np.mean(f1)),
        auroc_macro=float(np.mean(aurocs)),
        auprc_macro=float(np.mean(auprcs)),
        excluded_classes=tuple(excluded),
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# frozen-encoder embeddings and the linear probe


def embed_dataset(ds, params: EncoderParams, batch_size: int = 256) -> np.ndarray:
    """Max-pooled representations of every sample, [N, out_dim], no masking."""
    x = ds.values if isinstance(ds, LeveledDataset) else np.asarray(ds)
    if x.ndim != 3 or x.shape[2] != params.config.input_dim:
        raise DimensionError(f"encoder expects [N,T,{params.config.input_dim}] samples, got {x.shape}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    frozen = params.copy(requires_grad=False)
    out = np.empty((x.shape[0], params.config.out_dim), dtype=params.dtype)
    for i in range(0, x.shape[0], batch_size):
        out[i : i + batch_size] = sample_repr(encode(x[i : i + batch_size], frozen)).data
    return out


@dataclass
class ProbeConfig:
    C: float = 1.0
    max_iter: int = 100_000
    tol: float = 1e-6
    # window of the non-monotone line search; 1 gives plain Armijo descent
    memory: int = 10


@dataclass
class ProbeModel:
    W: np.ndarray  # [K, n_classes]
    b: np.ndarray  # [n_classes]
    C: float
    max_iter: int
    n_iter: int = 0
    grad_norm: float = float("nan")

    def decision_function(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.W + self.b

    def predict_proba(self, Z) -> np.ndarray:
        return softmax(self.decision_function(Z))

    def predict(self, Z) -> np.ndarray:
        return np.argmax(self.decision_function(Z), axis=1)


def _probe_objective(Z, Y, W, b, inv_c):
    logits = Z @ W + b
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(lse.sum() - (logits * Y).sum() + 0.5 * inv_c * (W * W).sum())
    P = np.exp(logits - lse[:, None])
    D = P - Y
    gW = Z.T @ D + inv_c * W
    gb = D.sum(axis=0)
    return loss, gW, gb


def fit_linear_probe(Z, y, cfg: ProbeConfig | None = None, n_classes: int | None = None) -> ProbeModel:
    """Multinomial logistic regression on frozen features.

    Minimizes ``sum_i CE_i + ||W||^2 / (2C)`` (bias unpenalized) by
    full-batch gradient descent from zero.  Each step starts from the
    Barzilai-Borwein step length and backtracks until the loss is below
    the largest of the last ``memory`` losses by the Armijo margin
    (Grippo-Lampariello-Lucidi rule); iteration stops once the gradient
    norm drops below ``tol``.
    """
    cfg = cfg or ProbeConfig()
    if not cfg.C > 0:
        raise ConfigError(f"probe C must be positive, got {cfg.C}")
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if Z.ndim != 2 or y.shape != (Z.shape[0],):
        raise DimensionError(f"probe: features {Z.shape} and labels {y.shape} do not align")
    if not np.isfinite(Z).all():
        raise NumericError("probe features contain non-finite values")
    if np.unique(y).size < 2:
        raise DataError(f"linear probe needs at least 2 classes, got labels {np.unique(y).tolist()}")
    k = int(n_classes or y.max() + 1)
    Y = np.eye(k)[y]
    inv_c = 1.0 / cfg.C
    W = np.zeros((Z.shape[1], k))
    b = np.zeros(k)
    loss, gW, gb = _probe_objective(Z, Y, W, b, inv_c)
    recent = [loss]
    step = 1.0 / max(1.0, float((Z * Z).sum(axis=1).max()) * Z.shape[0])
    gnorm = math.sqrt(float((gW * gW).sum() + (gb * gb).sum()))
    it = 0
    while it < cfg.max_iter and gnorm >= cfg.tol:
        it += 1
        g2 = gnorm * gnorm
        ref = max(recent[-cfg.memory :])
        while True:
            W_new = W - step * gW
            b_new = b - step * gb
            loss_new, gW_new, gb_new = _probe_objective(Z, Y, W_new, b_new, inv_c)
            if loss_new <= ref - 1e-4 * step * g2 or step < 1e-20:
                break
            step *= 0.5
        sW, sb = W_new - W, b_new - b
        dW, db = gW_new - gW, gb_new - gb
        sy = float((sW * dW).sum() + (sb * db).sum())
        ss = float((sW * sW).sum() + (sb * sb).sum())
        W, b, loss, gW, gb = W_new, b_new, loss_new, gW_new, gb_new
        recent.append(loss)
        gnorm = math.sqrt(float((gW * gW).sum() + (gb * gb).sum()))
        if sy > 0:
            step = ss / sy
        if not math.isfinite(loss):
            raise NumericError(f"probe objective diverged at iteration {it}")
    if gnorm >= cfg.tol:
        log.warning("linear probe stopped at max_iter=%d with gradient norm %.3g", cfg.max_iter, gnorm)
    return ProbeModel(W, b, cfg.C, cfg.max_iter, it, gnorm)


# ---------------------------------------------------------------------------
# full fine-tuning


class FineTuneHead:
    """Two-layer classifier ``K -> hidden -> n_classes`` with GELU in between."""

    def __init__(self, in_dim: int, n_classes: int, hidden: int = 128, seed: int = 0, dtype=np.float64):
        rng = stream(seed, "finetune-head")
        self.in_dim, self.hidden, self.n_classes = int(in_dim), int(hidden), int(n_classes)
        self.tensors = {}
        for name, (fan_in, fan_out) in (("fc1", (in_dim, hidden)), ("fc2", (hidden, n_classes))):
            bound = math.sqrt(1.0 / fan_in)
            self.tensors[name + ".w"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype), name=name + ".w")
            self.tensors[name + ".b"] = Tensor(np.zeros(fan_out, dtype=dtype), name=name + ".b")

    def __iter__(self):
        return iter(self.tensors.values())

    def __call__(self, h: Tensor) -> Tensor:
        t = self.tensors
        z = kernel.gelu(kernel.linear(h, t["fc1.w"], t["fc1.b"]))
        return kernel.linear(z, t["fc2.w"], t["fc2.b"])

    def copy(self, requires_grad: bool | None = None) -> "FineTuneHead":
        new = object.__new__(FineTuneHead)
        new.in_dim, new.hidden, new.n_classes = self.in_dim, self.hidden, self.n_classes
        new.tensors = {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad, name=k)
            for k, v in self.tensors.items()
        }
        return new


@dataclass
class FineTuneConfig:
    lr: float = 1e-4
    batch_size: int = 128
    # None picks 50 epochs at fraction 1.0 and 100 otherwise
    epochs: int | None = None
    seed: int = 41
    freeze_encoder: bool = False
    dtype: str = "float64"

    def epochs_for(self, fraction: float) -> int:
        if self.epochs is not None:
            return int(self.epochs)
        return 50 if fraction >= 1.0 else 100


@dataclass
class FineTuneRecord:
    epoch: int  # 0 means the untrained starting point
    val_f1: float
    train_loss: float
    history: list[dict] = field(default_factory=list)


def _ce_loss(logits: Tensor, y: np.ndarray) -> Tensor:
    n = logits.shape[0]
    onehot = np.eye(logits.shape[1], dtype=logits.dtype)[y]
    lse = kernel.logsumexp(logits, axis=1)
    picked = kernel.sum_(kernel.mul(logits, onehot), axis=1)
    return kernel.mean(lse - picked) if n else Tensor(np.zeros((), dtype=logits.dtype))


def classifier_scores(params: EncoderParams, head: FineTuneHead, values, batch_size: int = 256) -> np.ndarray:
    """Softmax class scores of encoder + head on raw samples [N,T,F]."""
    values = np.asarray(values)
    p = params.copy(requires_grad=False)
    h = head.copy(requires_grad=False)
    out = []
    for i in range(0, values.shape[0], batch_size):
        logits = h(sample_repr(encode(values[i : i + batch_size], p)))
        out.append(softmax(logits.data.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, head.n_classes))


def finetune_full(params: EncoderParams, ds_train: LeveledDataset, ds_val: LeveledDataset, fraction: float, cfg: FineTuneConfig | None = None, n_classes: int | None = None):
    """Train encoder + head with cross-entropy on a label fraction.

    After every epoch the validation macro F1 is measured and the best
    state is kept (earliest epoch wins ties; the starting point counts as
    epoch 0).  Returns ``(params, head, record)``.
    """
    cfg = cfg or FineTuneConfig()
    sub = label_fraction_subset(ds_train, fraction, cfg.seed)
    if len(sub) == 0:
        raise DataError("label fraction selected no training samples")
    if len(ds_val) == 0:
        raise DataError("fine-tuning needs a non-empty validation set for model selection")
    k = int(n_classes or max(int(ds_train.label.max()), int(ds_val.label.max())) + 1)
    dtype = np.dtype(cfg.dtype)
    enc = params.copy(dtype=dtype, requires_grad=not cfg.freeze_encoder)
    head = FineTuneHead(params.config.out_dim, k, seed=cfg.seed, dtype=dtype)
    for t in head:
        t.requires_grad = True
    trainable = ([] if cfg.freeze_encoder else list(enc)) + list(head)
    state = AdamState()
    x_all = sub.values.astype(dtype, copy=False)

    def val_f1() -> float:
        return compute_metrics(ds_val.label, classifier_scores(enc, head, ds_val.values)).f1_macro

    best = FineTuneRecord(0, val_f1(), float("nan"))
    best_enc, best_head = enc.copy(requires_grad=False), head.copy(requires_grad=False)
    history = [{"epoch": 0, "train_loss": float("nan"), "val_f1": best.val_f1}]
    for epoch in range(1, cfg.epochs_for(fraction) + 1):
        perm = stream(cfg.seed, "finetune-order", epoch).permutation(len(sub))
        total, seen = 0.0, 0
        for i in range(0, len(sub), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            with GradTape() as tape:
                loss = _ce_loss(head(sample_repr(encode(x_all[idx], enc))), sub.label[idx])
            grads = kernel.backward(tape, loss)
            adam_update(trainable, [grads.get(t, np.zeros_like(t.data)) for t in trainable], state, cfg.lr)
            total += float(loss.data) * idx.size
            seen += idx.size
        f1 = val_f1()
        history.append({"epoch": epoch, "train_loss": total / seen, "val_f1": f1})
        if f1 > best.val_f1:
            best = FineTuneRecord(epoch, f1, total / seen)
            best_enc, best_head = enc.copy(requires_grad=False), head.copy(requires_grad=False)
    best.history = history
    return best_enc, best_head, best


# ---------------------------------------------------------------------------
# clustering and anomaly detection


def clustering_eval(Z, y, k: int = 2, seed: int = 41) -> tuple[float, float, float]:
    """k-means (k-means++, 10 restarts) then (silhouette, ARI, NMI)."""
    # imported here: sklearn is slow to load and only this task needs it
    from sklearn.cluster import KMeans
    from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score, silhouette_score

    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if Z.ndim != 2 or y.shape != (Z.shape[0],):
        raise DimensionError(f"clustering: features {Z.shape} and labels {y.shape} do not align")
    if Z.shape[0] <= k:
        raise DataError(f"clustering needs more than k={k} samples, got {Z.shape[0]}")
    km = KMeans(n_clusters=k, init="k-means++", n_init=10, random_state=seed).fit(Z)
    assign = km.labels_
    sil = float(silhouette_score(Z, assign, metric="euclidean")) if np.unique(assign).size > 1 else 0.0
    return sil, float(adjusted_rand_score(y, assign)), float(normalized_mutual_info_score(y, assign))


def anomaly_subset(ds: LeveledDataset, neg_frac: float = 0.9, seed: int = 41) -> LeveledDataset:
    """Keep every negative (label 0) and ``floor(n_neg (1-f)/f)`` positives."""
    if not 0.0 < neg_frac < 1.0:
        raise ConfigError(f"neg_frac must lie in (0, 1), got {neg_frac}")
    neg = np.flatnonzero(ds.label == 0)
    pos = np.flatnonzero(ds.label > 0)
    if neg.size == 0 or pos.size == 0:
        raise DataError(f"anomaly evaluation needs both classes; have {neg.size} negatives and {pos.size} positives")
    f = Fraction(neg_frac).limit_denominator(10**6)
    need = int(neg.size * (1 - f) // f)
    if need < 1 or need > pos.size:
        raise DataError(
            f"ratio {neg_frac} with {neg.size} negatives needs {need} positives, {pos.size} available"
        )
    keep = np.sort(stream(seed, "anomaly").choice(pos, size=need, replace=False))
    return ds.subset(np.sort(np.concatenate([neg, keep])), name=f"{ds.name}/anomaly")


def anomaly_eval(ds_test: LeveledDataset, model: Callable[[np.ndarray], np.ndarray], neg_frac: float = 0.9, seed: int = 41) -> MetricsReport:
    """Metrics of ``model`` (raw samples -> class scores) on a re-balanced test set.

    Labels are binarized: 0 is healthy, anything else is an anomaly.
    """
    sub = anomaly_subset(ds_test, neg_frac, seed)
    scores = np.asarray(model(sub.values), dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != len(sub):
        raise DimensionError(f"model returned scores of shape {scores.shape} for {len(sub)} samples")
    if scores.shape[1] > 2:
        scores = np.stack([scores[:, 0], scores[:, 1:].max(axis=1)], axis=1)
    return compute_metrics((sub.label > 0).astype(np.int64), scores)


# ---------------------------------------------------------------------------
# tables


@dataclass
class MetricsRow:
    setup: str
    fraction: float
    seed: int
    report: MetricsReport

    def flat(self) -> dict:
        return {"setup": self.setup, "fraction": self.fraction, "seed": self.seed, **self.report.as_dict()}


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("setup", "fraction", "seed") + METRIC_NAMES)
        for r in rows:
            w.writerow([r.setup, repr(float(r.fraction)), r.seed] + [repr(getattr(r.report, m)) for m in METRIC_NAMES])


def summarize(rows: Sequence[MetricsRow]) -> list[dict]:
    """Mean and (population) std of each metric per (setup, fraction)."""
    groups: dict[tuple, list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.setup, r.fraction), []).append(r)
    out = []
    for (setup, frac), rs in groups.items():
        rec = {"setup": setup, "fraction": frac, "n": len(rs)}
        for m in METRIC_NAMES:
            v = np.array([getattr(r.report, m) for r in rs])
            rec[m] = (float(v.mean()), float(v.std()))
        out.append(rec)
    return out


def format_table(rows: Sequence[MetricsRow]) -> str:
    """Aligned plain-text table of per-run rows followed by mean +- std lines."""
    header = ["setup", "fraction", "seed"] + [m.replace("_macro", "") for m in METRIC_NAMES]
    body = [[r.setup, f"{r.fraction:g}", str(r.seed)] + [f"{getattr(r.report, m):.4f}" for m in METRIC_NAMES] for r in rows]
    for s in summarize(rows):
        body.append([s["setup"], f"{s['fraction']:g}", "mean"] + [f"{s[m][0]:.4f}+-{s[m][1]:.4f}" for m in METRIC_NAMES])
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
    return "\n".join(lines) + "\n"


def report_dict(rep: MetricsReport) -> dict:
    return asdict(rep)
