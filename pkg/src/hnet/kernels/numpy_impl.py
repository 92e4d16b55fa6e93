"""Reference numpy implementations of the recurrent scans.

These define the semantics; the numba versions must match them to float32
round-off. Shapes:

    u : [L, H, P]   per-head inner activations
    a : [L, H]      per-head decay in (0, 1)
    b : [L, N]      state input projection, shared across heads
    c : [L, N]      state readout projection, shared across heads
    s0: [H, N, P]   initial recurrent state

The selective-state recurrence per head h is

    S_t = a[t,h] * S_{t-1} + outer(b[t], u[t,h])
    y[t,h] = c[t] @ S_t

and the moving-average scan over compressed vectors is

    zbar_t = p[t] * z[t] + (1 - p[t]) * zbar_{t-1}.
"""

import numpy as np


def ssm_scan_fwd(u, a, b, c, s0):
    """Returns (y [L,H,P], states [L,H,N,P]); states[t] is S after step t."""
    L, H, P = u.shape
    N = b.shape[1]
    y = np.empty((L, H, P), dtype=np.float32)
    states = np.empty((L, H, N, P), dtype=np.float32)
    s = s0.copy()
    for t in range(L):
        for h in range(H):
            s[h] = a[t, h] * s[h] + np.outer(b[t], u[t, h])
            y[t, h] = c[t] @ s[h]
        states[t] = s
    return y, states


def ssm_scan_bwd(g, u, a, b, c, s0, states):
    """Vector-Jacobian products for ssm_scan_fwd.

    Returns (du, da, db, dc, ds0). ``d`` is the running dL/dS_t
    accumulator, swept from the last step backward.
    """
    L, H, P = u.shape
    N = b.shape[1]
    du = np.zeros_like(u)
    da = np.zeros_like(a)
    db = np.zeros_like(b)
    dc = np.zeros_like(c)
    d = np.zeros((H, N, P), dtype=np.float32)
    for t in range(L - 1, -1, -1):
        s_prev = states[t - 1] if t > 0 else s0
        for h in range(H):
            dc[t] += states[t, h] @ g[t, h]
            d[h] += np.outer(c[t], g[t, h])
            da[t, h] = np.float32((d[h] * s_prev[h]).sum(dtype=np.float32))
            db[t] += d[h] @ u[t, h]
            du[t, h] = b[t] @ d[h]
            d[h] *= a[t, h]
    return du, da, db, dc, d


def ssm_step_fwd(u, a, b, c, s):
    """One recurrence step, updating s in place; u [H,P], a [H], b/c [N].

    Must reproduce one iteration of ssm_scan_fwd bitwise so stepped
    inference matches full forwards.
    """
    H = u.shape[0]
    y = np.empty_like(u)
    for h in range(H):
        s[h] = a[h] * s[h] + np.outer(b, u[h])
        y[h] = c @ s[h]
    return y


def ema_scan_fwd(z, p, z0):
    """Returns zbar [M,D] for z [M,D], weights p [M], initial value z0 [D]."""
    M, D = z.shape
    zbar = np.empty((M, D), dtype=np.float32)
    prev = z0.copy()
    for t in range(M):
        prev = p[t] * z[t] + (np.float32(1.0) - p[t]) * prev
        zbar[t] = prev
    return zbar


def ema_scan_bwd(g, z, p, z0, zbar):
    """Vector-Jacobian products for ema_scan_fwd: (dz, dp, dz0)."""
    M, D = z.shape
    dz = np.zeros_like(z)
    dp = np.zeros_like(p)
    e = np.zeros(D, dtype=np.float32)
    for t in range(M - 1, -1, -1):
        e = e + g[t]
        dz[t] = p[t] * e
        prev = zbar[t - 1] if t > 0 else z0
        dp[t] = np.float32((e * (z[t] - prev)).sum(dtype=np.float32))
        e = (np.float32(1.0) - p[t]) * e
    return dz, dp, e
