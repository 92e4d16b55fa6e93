"""JIT-compiled scans; semantics defined by numpy_impl.

Explicit scalar loops so numba emits tight machine code. fastmath stays
off: the equivalence and causality tests rely on deterministic,
IEEE-ordered float32 accumulation.
"""

import numpy as np
from numba import njit

_OPTS = dict(cache=True, nogil=True)
# backward kernels do not need bit-reproducible ordering against any other
# path, so they may trade IEEE ordering for vectorization
_BWD_OPTS = dict(cache=True, nogil=True, fastmath=True)


@njit(**_OPTS)
def ssm_scan_fwd(u, a, b, c, s0):
    L, H, P = u.shape
    N = b.shape[1]
    y = np.empty((L, H, P), dtype=np.float32)
    states = np.empty((L, H, N, P), dtype=np.float32)
    for t in range(L):
        prev = states[t - 1] if t > 0 else s0
        for h in range(H):
            ath = a[t, h]
            for n in range(N):
                btn = b[t, n]
                for p_ in range(P):
                    states[t, h, n, p_] = ath * prev[h, n, p_] + btn * u[t, h, p_]
            for p_ in range(P):
                acc = np.float32(0.0)
                for n in range(N):
                    acc += c[t, n] * states[t, h, n, p_]
                y[t, h, p_] = acc
    return y, states


@njit(**_BWD_OPTS)
def ssm_scan_bwd(g, u, a, b, c, s0, states):
    L, H, P = u.shape
    N = b.shape[1]
    du = np.zeros_like(u)
    da = np.zeros_like(a)
    db = np.zeros_like(b)
    dc = np.zeros_like(c)
    d = np.zeros((H, N, P), dtype=np.float32)
    for t in range(L - 1, -1, -1):
        for h in range(H):
            for n in range(N):
                acc_c = np.float32(0.0)
                for p_ in range(P):
                    acc_c += states[t, h, n, p_] * g[t, h, p_]
                dc[t, n] += acc_c
                ctn = c[t, n]
                for p_ in range(P):
                    d[h, n, p_] += ctn * g[t, h, p_]
            acc_a = np.float32(0.0)
            if t > 0:
                for n in range(N):
                    for p_ in range(P):
                        acc_a += d[h, n, p_] * states[t - 1, h, n, p_]
            else:
                for n in range(N):
                    for p_ in range(P):
                        acc_a += d[h, n, p_] * s0[h, n, p_]
            da[t, h] = acc_a
            for n in range(N):
                acc_b = np.float32(0.0)
                for p_ in range(P):
                    acc_b += d[h, n, p_] * u[t, h, p_]
                db[t, n] += acc_b
            for p_ in range(P):
                acc_u = np.float32(0.0)
                for n in range(N):
                    acc_u += b[t, n] * d[h, n, p_]
                du[t, h, p_] = acc_u
            ath = a[t, h]
            for n in range(N):
                for p_ in range(P):
                    d[h, n, p_] *= ath
    return du, da, db, dc, d


@njit(**_OPTS)
def ssm_step_fwd(u, a, b, c, s):
    H, P = u.shape
    N = b.shape[0]
    y = np.empty_like(u)
    for h in range(H):
        ah = a[h]
        for n in range(N):
            bn = b[n]
            for p_ in range(P):
                s[h, n, p_] = ah * s[h, n, p_] + bn * u[h, p_]
        for p_ in range(P):
            acc = np.float32(0.0)
            for n in range(N):
                acc += c[n] * s[h, n, p_]
            y[h, p_] = acc
    return y


@njit(**_OPTS)
def ema_scan_fwd(z, p, z0):
    M, D = z.shape
    zbar = np.empty((M, D), dtype=np.float32)
    prev = z0.copy()
    for t in range(M):
        pt = p[t]
        qt = np.float32(1.0) - pt
        for j in range(D):
            prev[j] = pt * z[t, j] + qt * prev[j]
            zbar[t, j] = prev[j]
    return zbar


@njit(**_BWD_OPTS)
def ema_scan_bwd(g, z, p, z0, zbar):
    M, D = z.shape
    dz = np.zeros_like(z)
    dp = np.zeros_like(p)
    e = np.zeros(D, dtype=np.float32)
    for t in range(M - 1, -1, -1):
        pt = p[t]
        acc = np.float32(0.0)
        for j in range(D):
            e[j] = e[j] + g[t, j]
            dz[t, j] = pt * e[j]
            prev = zbar[t - 1, j] if t > 0 else z0[j]
            acc += e[j] * (z[t, j] - prev)
            e[j] = (np.float32(1.0) - pt) * e[j]
        dp[t] = acc
    return dz, dp, e
