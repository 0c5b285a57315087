"""Fused selective-scan loops compiled with numba.

Internal layouts: x, dt (B, N, Di); A (S, Di); Bm, Cm (B, N, S);
hist and em1 (B, N, S, Di). Channels are innermost so the per-state loops
vectorize. expm1(dt*A), the one transcendental per element, comes from
numpy's vectorized expm1 and is shared between forward and backward.
error_model="numpy" drops the per-division zero checks that otherwise
block vectorization.
"""

import numba
import numpy as np

_SMALL = 1e-6


@numba.njit(cache=True, fastmath=True, error_model="numpy", nogil=True)
def step_exponent(dt, A, out):
    # out[b, t, s, d] = dt[b, t, d] * A[s, d]
    nb, n, di = dt.shape
    ns = A.shape[0]
    for b in range(nb):
        for t in range(n):
            for s in range(ns):
                for d in range(di):
                    out[b, t, s, d] = dt[b, t, d] * A[s, d]


@numba.njit(cache=True, fastmath=True, error_model="numpy", nogil=True)
def scan_forward(x, dt, A, Bm, Cm, em1, y, hist):
    nb, n, di = x.shape
    ns = A.shape[0]
    zero = A[0, 0] * 0
    one = zero + 1
    half = one / 2
    small = one * _SMALL
    u = np.empty(di, dtype=x.dtype)
    for b in range(nb):
        for t in range(n):
            for d in range(di):
                u[d] = dt[b, t, d] * x[b, t, d]
                y[b, t, d] = zero
            for s in range(ns):
                bv = Bm[b, t, s]
                cv = Cm[b, t, s]
                for d in range(di):
                    z = dt[b, t, d] * A[s, d]
                    e = em1[b, t, s, d]
                    g = one + z * half if abs(z) < small else e / z
                    hp = hist[b, t - 1, s, d] if t > 0 else zero
                    hv = (e + one) * hp + g * u[d] * bv
                    hist[b, t, s, d] = hv
                    y[b, t, d] += hv * cv


@numba.njit(cache=True, fastmath=True, error_model="numpy", nogil=True)
def scan_infer(x, dt, A, Bm, Cm, em1, y):
    # forward only: keeps the running state, not the history
    nb, n, di = x.shape
    ns = A.shape[0]
    zero = A[0, 0] * 0
    one = zero + 1
    half = one / 2
    small = one * _SMALL
    h = np.empty((ns, di), dtype=x.dtype)
    for b in range(nb):
        h[:, :] = zero
        for t in range(n):
            for d in range(di):
                y[b, t, d] = zero
            for s in range(ns):
                bv = Bm[b, t, s]
                cv = Cm[b, t, s]
                for d in range(di):
                    dtv = dt[b, t, d]
                    z = dtv * A[s, d]
                    e = em1[b, t, s, d]
                    g = one + z * half if abs(z) < small else e / z
                    hv = (e + one) * h[s, d] + g * dtv * x[b, t, d] * bv
                    h[s, d] = hv
                    y[b, t, d] += hv * cv


@numba.njit(cache=True, fastmath=True, error_model="numpy", nogil=True)
def scan_backward(x, dt, A, Bm, Cm, em1, hist, gy, gx, gdt, gA, gB, gC):
    nb, n, di = x.shape
    ns = A.shape[0]
    zero = A[0, 0] * 0
    one = zero + 1
    half = one / 2
    third = one / 3
    small = one * _SMALL
    adj = np.zeros((ns, di), dtype=x.dtype)
    sb = np.empty(di, dtype=x.dtype)
    sa = np.empty(di, dtype=x.dtype)
    u = np.empty(di, dtype=x.dtype)
    for b in range(nb):
        adj[:, :] = zero
        for t in range(n - 1, -1, -1):
            for d in range(di):
                sb[d] = zero
                sa[d] = zero
                u[d] = dt[b, t, d] * x[b, t, d]
            for s in range(ns):
                bv = Bm[b, t, s]
                cv = Cm[b, t, s]
                gb = zero
                gc = zero
                for d in range(di):
                    dtv = dt[b, t, d]
                    gyv = gy[b, t, d]
                    hv = hist[b, t, s, d]
                    gc += hv * gyv
                    G = adj[s, d] + gyv * cv
                    z = dtv * A[s, d]
                    e = em1[b, t, s, d]
                    a = e + one
                    if abs(z) < small:
                        g = one + z * half
                        dg = half + z * third
                    else:
                        iz = one / z
                        g = e * iz
                        dg = (a - g) * iz
                    hp = hist[b, t - 1, s, d] if t > 0 else zero
                    g_dA = G * (hp * a + u[d] * bv * dg)
                    g_q = G * g
                    sb[d] += g_q * bv
                    sa[d] += g_dA * A[s, d]
                    gb += g_q * u[d]
                    gA[s, d] += g_dA * dtv
                    adj[s, d] = G * a
                gB[b, t, s] = gb
                gC[b, t, s] = gc
            for d in range(di):
                gx[b, t, d] = sb[d] * dt[b, t, d]
                gdt[b, t, d] = sa[d] + sb[d] * x[b, t, d]


def _expm1_table(dt, at):
    em1 = np.empty(dt.shape[:2] + at.shape, dtype=dt.dtype)
    step_exponent(dt, at, em1)
    return np.expm1(em1, out=em1)


def infer(x, dt, A, Bm, Cm):
    at = np.ascontiguousarray(A.T)
    y = np.empty_like(x)
    scan_infer(x, dt, at, Bm, Cm, _expm1_table(dt, at), y)
    return y


def forward(x, dt, A, Bm, Cm):
    """A is (Di, S) as stored on the model. Returns y and the saved state."""
    at = np.ascontiguousarray(A.T)
    em1 = _expm1_table(dt, at)
    y = np.empty_like(x)
    hist = np.empty_like(em1)
    scan_forward(x, dt, at, Bm, Cm, em1, y, hist)
    return y, (at, em1, hist)


def backward(x, dt, Bm, Cm, saved, gy):
    at, em1, hist = saved
    gx = np.empty_like(x)
    gdt = np.empty_like(dt)
    gA = np.zeros_like(at)
    gB = np.empty_like(Bm)
    gC = np.empty_like(Cm)
    scan_backward(x, dt, at, Bm, Cm, em1, hist, np.ascontiguousarray(gy), gx, gdt, gA, gB, gC)
    return gx, gdt, gA.T, gB, gC
