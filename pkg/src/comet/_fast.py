"""numba kernels for the two elementwise hot spots of the encoder.

``gelu_f32`` evaluates erf with a rational approximation that is exact to
float32 rounding (clamped to [-4, 4], beyond which erf is +-1 in float32).
float64 callers use scipy's ``ndtr`` instead.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_A = (
    np.float32(-2.72614225801306e-10),
    np.float32(2.77068142495902e-08),
    np.float32(-2.10102402082508e-06),
    np.float32(-5.69250639462346e-05),
    np.float32(-7.34990630326855e-04),
    np.float32(-2.95459980854025e-03),
    np.float32(-1.60960333262415e-02),
)
_B = (
    np.float32(-1.45660718464996e-05),
    np.float32(-2.13374055278905e-04),
    np.float32(-1.68282697438203e-03),
    np.float32(-7.37332916720468e-03),
    np.float32(-1.42647390514189e-02),
)
_INV_SQRT2 = np.float32(1.0 / math.sqrt(2.0))
_INV_SQRT_2PI = np.float32(1.0 / math.sqrt(2.0 * math.pi))


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _gelu_pre(flat, out, cdf, t):
    # clamp-by-select and a pure polynomial keep the loop vectorizable
    for i in range(flat.size):
        v = flat[i]
        x = v * _INV_SQRT2
        x = np.float32(-4.0) if x < np.float32(-4.0) else x
        x = np.float32(4.0) if x > np.float32(4.0) else x
        x2 = x * x
        p = _A[0]
        p = p * x2 + _A[1]
        p = p * x2 + _A[2]
        p = p * x2 + _A[3]
        p = p * x2 + _A[4]
        p = p * x2 + _A[5]
        p = p * x2 + _A[6]
        q = _B[0]
        q = q * x2 + _B[1]
        q = q * x2 + _B[2]
        q = q * x2 + _B[3]
        q = q * x2 + _B[4]
        c = np.float32(0.5) + np.float32(0.5) * (x * p / q)
        cdf[i] = c
        out[i] = v * c
        t[i] = np.float32(-0.5) * v * v


@numba.njit(cache=True, fastmath=True)
def _gelu_deriv(flat, cdf, e):
    # e holds exp(-v^2/2) on entry and the derivative on exit
    for i in range(flat.size):
        e[i] = cdf[i] + flat[i] * e[i] * _INV_SQRT_2PI


def gelu_f32(x: np.ndarray):
    """Return (gelu(x), d gelu / dx) for a float32 array."""
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    cdf = np.empty_like(flat)
    e = np.empty_like(flat)
    _gelu_pre(flat, out, cdf, e)
    # numba's scalar exp does not vectorize; numpy's does
    np.exp(e, out=e)
    _gelu_deriv(flat, cdf, e)
    return out.reshape(x.shape), e.reshape(x.shape)


@numba.njit(cache=True)
def max_over_time(x):
    """[B,T,C] -> (max [B,C], argmax [B,C]); the first maximum wins ties."""
    B, T, C = x.shape
    out = np.empty((B, C), dtype=x.dtype)
    idx = np.zeros((B, C), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            out[b, c] = x[b, 0, c]
        for t in range(1, T):
            for c in range(C):
                v = x[b, t, c]
                if v > out[b, c]:
                    out[b, c] = v
                    idx[b, c] = t
    return out, idx


@numba.njit(cache=True)
def scatter_over_time(g, idx, T):
    B, C = g.shape
    gx = np.zeros((B, T, C), dtype=g.dtype)
    for b in range(B):
        for c in range(C):
            gx[b, idx[b, c], c] = g[b, c]
    return gx


@numba.njit(cache=True, fastmath=True)
def tap_sum(y, d, bias):
    """out[b,t] = y[b,t-d,0] + y[b,t,1] + y[b,t+d,2] + bias, zero outside [0,T)."""
    B, T, _, C = y.shape
    out = np.empty((B, T, C), dtype=y.dtype)
    for b in range(B):
        for t in range(T):
            for c in range(C):
                v = y[b, t, 1, c] + bias[c]
                if t >= d:
                    v += y[b, t - d, 0, c]
                if t + d < T:
                    v += y[b, t + d, 2, c]
                out[b, t, c] = v
    return out


@numba.njit(cache=True)
def tap_stack(g, d):
    """Adjoint layout of ``tap_sum``: [B,T,C] -> [B,T,3,C] with
    out[b,t,0] = g[b,t+d], out[b,t,1] = g[b,t], out[b,t,2] = g[b,t-d]."""
    B, T, C = g.shape
    out = np.zeros((B, T, 3, C), dtype=g.dtype)
    for b in range(B):
        for t in range(T):
            for c in range(C):
                out[b, t, 1, c] = g[b, t, c]
            if t + d < T:
                for c in range(C):
                    out[b, t, 0, c] = g[b, t + d, c]
            if t >= d:
                for c in range(C):
                    out[b, t, 2, c] = g[b, t - d, c]
    return out


@numba.njit(cache=True)
def pair_max(x):
    """[B,T,C] -> (max over disjoint timestamp pairs [B,ceil(T/2),C], source index).

    The earlier timestamp wins ties; an odd last timestamp passes through.
    """
    B, T, C = x.shape
    half = (T + 1) // 2
    out = np.empty((B, half, C), dtype=x.dtype)
    src = np.empty((B, half, C), dtype=np.int32)
    for b in range(B):
        for k in range(T // 2):
            for c in range(C):
                u = x[b, 2 * k, c]
                v = x[b, 2 * k + 1, c]
                if v > u:
                    out[b, k, c] = v
                    src[b, k, c] = 2 * k + 1
                else:
                    out[b, k, c] = u
                    src[b, k, c] = 2 * k
        if T % 2:
            for c in range(C):
                out[b, half - 1, c] = x[b, T - 1, c]
                src[b, half - 1, c] = T - 1
    return out, src


@numba.njit(cache=True)
def pair_scatter(g, src, T):
    B, H, C = g.shape
    gx = np.zeros((B, T, C), dtype=g.dtype)
    for b in range(B):
        for k in range(H):
            for c in range(C):
                gx[b, src[b, k, c], c] = g[b, k, c]
    return gx
