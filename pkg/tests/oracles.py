"""Slow, explicit reference implementations used only by the tests."""

from __future__ import annotations

import itertools

import numpy as np


def analysis_matrix(filt: np.ndarray, L: int) -> np.ndarray:
    """``(L/2) x L`` periodized filtering-and-downsampling matrix.

    Row ``k`` holds ``filt[m]`` in column ``(2k + m) mod L``.
    """
    M = np.zeros((L // 2, L))
    for k in range(L // 2):
        for m, v in enumerate(filt):
            M[k, (2 * k + m) % L] += v
    return M


def _apply(M: np.ndarray, a: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(M, a, axes=([1], [axis])), 0, axis)


def matrix_dwt(x: np.ndarray, h: np.ndarray, g: np.ndarray, j0: int) -> np.ndarray:
    """Coefficient vector of ``x`` built from explicit analysis matrices.

    Ordering: scaling block, then levels ``j0`` up to the finest, each
    level listing its orientations in ``product('ad')`` order over the
    axes that are still being split (all-``a`` excluded).
    """
    x = np.asarray(x, dtype=np.float64)
    levels = [int(np.log2(s)) for s in x.shape]
    cur = x
    per_level = {}
    for j in range(max(levels) - 1, j0 - 1, -1):
        active = [ax for ax in range(x.ndim) if levels[ax] > j]
        bands = {"": cur}
        for ax in active:
            L = cur.shape[ax]
            H, G = analysis_matrix(h, L), analysis_matrix(g, L)
            bands = {k + c: _apply(M, v, ax) for k, v in bands.items()
                     for c, M in (("a", H), ("d", G))}
        per_level[j] = [bands["".join(c)].ravel()
                        for c in itertools.product("ad", repeat=len(active)) if "d" in c]
        cur = bands["a" * len(active)]
    out = [cur.ravel()]
    for j in range(j0, max(levels)):
        out.extend(per_level[j])
    return np.concatenate(out)


def dense_pseudo_predictor(T: np.ndarray, X: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """``P X + Pi (I - P) X`` with explicit ``n x n`` matrices."""
    n = T.shape[0]
    P = T @ np.linalg.solve(T.T @ T, T.T)
    Pi = np.zeros((n, n))
    Pi[np.arange(n), perm] = 1.0
    return P @ X + Pi @ (np.eye(n) - P) @ X


def ols(design: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.solve(design.T @ design, design.T @ y)
