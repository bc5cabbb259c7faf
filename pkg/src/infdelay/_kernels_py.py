"""Pure numpy versions of the hot loops.

Summation order matches the compiled kernels term by term, and every
operation is elementwise over trajectories, so results do not depend on how
trajectories are chunked.
"""
import numpy as np


def lag_sum(values, src, weights):
    """out[p, k] = sum_j weights[j, k] @ values[p, src[j, k]]  (src < 0 skipped).

    values : (P, n_in, din)
    src : (J, n_out) int64
    weights : (J, n_out, dout, din)
    """
    P = values.shape[0]
    J, n_out, dout, din = weights.shape
    out = np.zeros((P, n_out, dout))
    for j in range(J):
        ok = src[j] >= 0
        if not ok.any():
            continue
        idx = np.where(ok, src[j], 0)
        v = values[:, idx, :]
        w = np.where(ok[:, None, None], weights[j], 0.0)
        for a in range(dout):
            acc = out[:, :, a]
            for b in range(din):
                acc += w[:, a, b] * v[:, :, b]
    return out


def euler_linear(X, i0, n_steps, dt, offA, WA, offC, WC, drift_add, diff_add, dW, guard):
    """Euler-Maruyama for dX = (A X_t + drift_add) dt + (C X_t + diff_add) dW in place.

    X : (P, n_nodes, d) with history filled up to index i0.
    WA : (JA, N, d, d); WC : (JC, N, d*m, d) with row index i*m + c.
    drift_add : (1 or P, N, d); diff_add : (1 or P, N, d, m); dW : (P, N, m).
    Returns -1, or the first step index at which |X| exceeded the guard.
    """
    P, _, d = X.shape
    m = dW.shape[2]
    for k in range(n_steps):
        cur = i0 + k
        drift = np.zeros((P, d))
        for a in range(d):
            acc = drift[:, a]
            for j in range(len(offA)):
                src = X[:, cur - offA[j], :]
                for b in range(d):
                    acc += WA[j, k, a, b] * src[:, b]
            acc += drift_add[:, k, a]
        diff = np.zeros((P, d, m))
        for a in range(d):
            for c in range(m):
                acc = diff[:, a, c]
                for j in range(len(offC)):
                    src = X[:, cur - offC[j], :]
                    for b in range(d):
                        acc += WC[j, k, a * m + c, b] * src[:, b]
                acc += diff_add[:, k, a, c]
        nxt = X[:, cur, :] + drift * dt
        for c in range(m):
            nxt = nxt + diff[:, :, c] * dW[:, k, c][:, None]
        X[:, cur + 1, :] = nxt
        if not np.all(np.abs(nxt) <= guard):
            return k
    return -1
