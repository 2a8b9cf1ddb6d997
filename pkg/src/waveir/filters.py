"""Orthonormal wavelet filter banks.

Only two families are provided: the Daubechies least-asymmetric wavelet
with 10 vanishing moments (20 taps, the working basis) and Haar, which
is kept because its transforms can be checked by hand.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

# Scaling (low-pass synthesis) filter of the least-asymmetric Daubechies
# wavelet with 10 vanishing moments ("symlet 10").
_LA20 = (
    -0.0004593294210046588,
    5.7036083618494284e-05,
    0.004593173585311828,
    -0.0008043589320165449,
    -0.02035493981231129,
    0.005764912033581909,
    0.04999497207737669,
    -0.0319900568824278,
    -0.03553674047381755,
    0.38382676106708546,
    0.7695100370211071,
    0.47169066693843925,
    -0.07088053578324385,
    -0.15949427888491757,
    0.011609893903711381,
    0.0459272392310922,
    -0.0014653825813050513,
    -0.008641299277022422,
    9.563267072289475e-05,
    0.0007701598091144901,
)

_HAAR = (2.0 ** -0.5, 2.0 ** -0.5)

FAMILIES = ("daubechies-least-asymmetric", "haar")


def _check_orthonormal(h: np.ndarray, tol: float = 1e-12) -> None:
    if abs(h.sum() - np.sqrt(2.0)) > tol:
        raise ValueError("scaling filter taps must sum to sqrt(2)")
    for shift in range(0, len(h), 2):
        target = 1.0 if shift == 0 else 0.0
        if abs(np.dot(h[: len(h) - shift], h[shift:]) - target) > tol:
            raise ValueError(f"scaling filter not orthogonal at even shift {shift}")


@lru_cache(maxsize=None)
def filter_pair(family: str, vanishing_moments: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(h, g)``: scaling and wavelet filters of an orthonormal bank.

    The wavelet filter is the quadrature mirror ``g[m] = (-1)**m h[L-1-m]``.
    Both arrays are read-only.
    """
    if family == "haar":
        if vanishing_moments != 1:
            raise ValueError("haar has exactly 1 vanishing moment")
        taps = _HAAR
    elif family == "daubechies-least-asymmetric":
        if vanishing_moments != 10:
            raise ValueError(
                "only 10 vanishing moments are available for the least-asymmetric family"
            )
        taps = _LA20
    else:
        raise ValueError(f"unknown wavelet family {family!r}; expected one of {FAMILIES}")
    h = np.array(taps, dtype=np.float64)
    _check_orthonormal(h)
    g = h[::-1].copy()
    g[1::2] *= -1.0
    h.setflags(write=False)
    g.setflags(write=False)
    return h, g


# build-time validation of the embedded constants
filter_pair("daubechies-least-asymmetric", 10)
filter_pair("haar", 1)
