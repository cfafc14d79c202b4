"""Independent reference implementations used only by the tests.

Everything here is written with explicit Python loops over scalars so that
it shares no code path with the vectorized package internals.
"""

from __future__ import annotations

import math

import numpy as np


def dot(u, v) -> float:
    return float(sum(float(a) * float(b) for a, b in zip(u, v)))


def _neg_log_ratio(num: float, terms: list[float]) -> float:
    m = max(terms + [num])
    return -(num - m) + math.log(sum(math.exp(t - m) for t in terms))


def observation_loss(H, Ht) -> float:
    B, T, _ = H.shape
    total = 0.0
    for b in range(B):
        for t in range(T):
            pos = dot(H[b, t], Ht[b, t])
            terms = []
            for s in range(T):
                terms.append(dot(H[b, t], Ht[b, s]))
                if s != t:
                    terms.append(dot(H[b, t], H[b, s]))
            total += _neg_log_ratio(pos, terms)
    return total / (B * T)


def sample_loss(h, ht) -> float:
    B = h.shape[0]
    total = 0.0
    for i in range(B):
        pos = dot(h[i], ht[i])
        terms = []
        for j in range(B):
            terms.append(dot(h[i], ht[j]))
            if j != i:
                terms.append(dot(h[i], h[j]))
        total += _neg_log_ratio(pos, terms)
    return total / B


def cosine(u, v, eps=1e-12) -> float:
    nu = max(math.sqrt(dot(u, u)), eps)
    nv = max(math.sqrt(dot(v, v)), eps)
    return dot(u, v) / (nu * nv)


def group_loss(h, groups, tau) -> float:
    B = h.shape[0]
    per_anchor = []
    for a in range(B):
        positives = [p for p in range(B) if p != a and groups[p] == groups[a]]
        negatives = [n for n in range(B) if groups[n] != groups[a]]
        if not positives or not negatives:
            continue
        neg_terms = [cosine(h[a], h[n]) / tau for n in negatives]
        m = max(neg_terms)
        lse = m + math.log(sum(math.exp(t - m) for t in neg_terms))
        per_anchor.append(sum(lse - cosine(h[a], h[p]) / tau for p in positives) / len(positives))
    return sum(per_anchor) / len(per_anchor) if per_anchor else 0.0


def max_over_time(H):
    B, T, K = H.shape
    out = np.empty((B, K))
    for b in range(B):
        for k in range(K):
            best = H[b, 0, k]
            for t in range(1, T):
                if H[b, t, k] > best:
                    best = H[b, t, k]
            out[b, k] = best
    return out


def pool_pairs(H):
    B, T, K = H.shape
    half = (T + 1) // 2
    out = np.empty((B, half, K))
    for b in range(B):
        for u in range(half):
            for k in range(K):
                vals = [H[b, t, k] for t in (2 * u, 2 * u + 1) if t < T]
                out[b, u, k] = max(vals)
    return out


def hierarchical(H, Ht, lam_obs, lam_samp) -> float:
    total, levels = 0.0, 0
    while True:
        levels += 1
        T = H.shape[1]
        if T > 1 and lam_obs:
            total += lam_obs * observation_loss(H, Ht)
        if lam_samp:
            total += lam_samp * sample_loss(max_over_time(H), max_over_time(Ht))
        if T == 1:
            break
        H, Ht = pool_pairs(H), pool_pairs(Ht)
    return total / levels


def conv1d(x, w, b, d):
    B, T, Cin = x.shape
    Cout = w.shape[0]
    out = np.zeros((B, T, Cout))
    for bb in range(B):
        for t in range(T):
            for o in range(Cout):
                acc = b[o] if b is not None else 0.0
                for c in range(Cin):
                    for j in range(3):
                        s = t + (j - 1) * d
                        if 0 <= s < T:
                            acc += w[o, c, j] * x[bb, s, c]
                out[bb, t, o] = acc
    return out


def matmul(x, w):
    n, k = x.shape
    m = w.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = sum(x[i, r] * w[r, j] for r in range(k))
    return out


def confusion_f1(y, pred, classes) -> float:
    f1s = []
    for c in classes:
        tp = sum(1 for a, b in zip(y, pred) if a == c and b == c)
        fp = sum(1 for a, b in zip(y, pred) if a != c and b == c)
        fn = sum(1 for a, b in zip(y, pred) if a == c and b != c)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    return sum(f1s) / len(f1s)


def auroc_pairs(pos_scores, neg_scores) -> float:
    # probability a random positive outranks a random negative, ties 1/2
    wins = 0.0
    for p in pos_scores:
        for n in neg_scores:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos_scores) * len(neg_scores))
