"""Compiled inner loop for penalized weighted least squares.

Minimizes over (delta, beta)

    (1/2n) sum_i w_i (z_i - t_i'delta - x_i'beta)^2 + lam1 |beta|_1 + lam2 |beta|_2^2

by cyclic coordinate descent. ``delta`` is unpenalized and updated as a
block each sweep. The residual vector ``r`` is kept in sync in place.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def cd_sweeps(XT, T, TwT_inv, w, beta, delta, r, xv, idx, lam1, lam2, tol, max_sweeps):
    n = r.shape[0]
    q = T.shape[1]
    tw = np.empty(q)
    step = np.empty(q)
    for sweep in range(max_sweeps):
        maxch = 0.0
        if q > 0:
            for k in range(q):
                acc = 0.0
                for i in range(n):
                    acc += T[i, k] * w[i] * r[i]
                tw[k] = acc
            for k in range(q):
                acc = 0.0
                for l in range(q):
                    acc += TwT_inv[k, l] * tw[l]
                step[k] = acc
            ss = 0.0
            for i in range(n):
                fi = 0.0
                for k in range(q):
                    fi += T[i, k] * step[k]
                r[i] -= fi
                ss += w[i] * fi * fi
            for k in range(q):
                delta[k] += step[k]
            ss = np.sqrt(ss / n)
            if ss > maxch:
                maxch = ss
        for jj in range(idx.shape[0]):
            j = idx[jj]
            denom = xv[j] + 2.0 * lam2
            if denom <= 0.0:
                continue
            xj = XT[j]
            acc = 0.0
            for i in range(n):
                acc += w[i] * xj[i] * r[i]
            g = acc / n + xv[j] * beta[j]
            if g > lam1:
                new = (g - lam1) / denom
            elif g < -lam1:
                new = (g + lam1) / denom
            else:
                new = 0.0
            diff = new - beta[j]
            if diff != 0.0:
                for i in range(n):
                    r[i] -= diff * xj[i]
                beta[j] = new
                ch = abs(diff) * np.sqrt(xv[j])
                if ch > maxch:
                    maxch = ch
        if maxch < tol:
            return sweep + 1, True
    return max_sweeps, False


@njit(cache=True, nogil=True)
def cd_solve(XT, T, TwT_inv, w, beta, delta, r, xv, idx, lam1, lam2, tol, max_sweeps, stall):
    """Active-set cycling: a sweep over ``idx``, then sweeps over the nonzero
    coordinates only until they settle, repeated until a full sweep is quiet.

    Gives up early (``stalled``) when one round of active-set sweeps
    exceeds ``stall`` sweeps, so the caller can try a direct solve.

    Returns ``(total_sweeps, converged, changed_on_first_sweep, stalled)``.
    """
    total = 0
    first_quiet = False
    while total < max_sweeps:
        used, quiet = cd_sweeps(XT, T, TwT_inv, w, beta, delta, r, xv, idx,
                                lam1, lam2, tol, 1)
        total += used
        if total == 1:
            first_quiet = quiet
        if quiet:
            return total, True, not first_quiet, False
        k = 0
        for jj in range(idx.shape[0]):
            if beta[idx[jj]] != 0.0:
                k += 1
        act = np.empty(k, dtype=np.int64)
        k = 0
        for jj in range(idx.shape[0]):
            if beta[idx[jj]] != 0.0:
                act[k] = idx[jj]
                k += 1
        budget = min(stall, max_sweeps - total)
        used, quiet = cd_sweeps(XT, T, TwT_inv, w, beta, delta, r, xv, act,
                                lam1, lam2, tol, budget)
        total += used
        if not quiet and used >= stall:
            return total, False, True, True
    return total, False, True, False


@njit(cache=True, nogil=True)
def weighted_sq_norms(XT, w):
    N, n = XT.shape
    out = np.empty(N)
    for j in range(N):
        acc = 0.0
        for i in range(n):
            acc += w[i] * XT[j, i] * XT[j, i]
        out[j] = acc / n
    return out
