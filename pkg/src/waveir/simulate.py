"""Synthetic predictors, coefficient images and outcomes.

Everything here is a deterministic function of its inputs and an
integer seed; randomness goes through :func:`waveir.rng.stream`.

R-squared conventions
---------------------
Both conventions live in :func:`signal_variance_for_r2` and
:func:`empirical_r2`, so they can be swapped in one place.

* Gaussian: ``R2 = V / (V + sigma^2)`` with ``V = Var(x'beta)`` and
  ``sigma = 1`` unless stated.
* Binary: latent-logistic form ``R2 = V / (V + pi^2 / 3)``. With a
  scalar covariate independent of the images the same formula gives
  the partial R-squared of the image term.

Variances over a finite sample use ``ddof=0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import optimize
from scipy.special import expit

from .dwt import ImageStack, WaveletSpec, dwt_stack, idwt_rows
from .estimators import Dataset, RankError
from .glm import Family, fit_glm
from .rng import stream

LOGISTIC_VARIANCE = np.pi ** 2 / 3

# --- coefficient images ------------------------------------------------------

# beta1: difference of two isotropic normal densities on [1, 64]^2
BETA1_MEANS = ((30.0, 20.0), (20.0, 55.0))
BETA1_VARIANCE = 10.0

# beta2: 2D bumps. Positions, heights and widths are the classical 1D
# bumps constants on [0, 1]. Bump j sits at (pos[j], pos[(j + 5) % 11]),
# snapped to the nearest pixel, with kernel (1 + r)^-4 where r is the
# distance in [0, 1] units divided by the width. On a 64 x 64 grid the
# centers (row, column) are
#   (6, 25) (8, 28) (9, 41) (14, 48) (16, 49) (25, 51)
#   (28, 6) (41, 8) (48, 9) (49, 14) (51, 16)
# and each is a strict local maximum of the image.
BUMP_POSITIONS = (0.10, 0.13, 0.15, 0.23, 0.25, 0.40, 0.44, 0.65, 0.76, 0.78, 0.81)
BUMP_HEIGHTS = (4.0, 5.0, 3.0, 4.0, 5.0, 4.2, 2.1, 4.3, 3.1, 5.1, 4.2)
BUMP_WIDTHS = (0.005, 0.005, 0.006, 0.01, 0.01, 0.03, 0.01, 0.01, 0.005, 0.008, 0.005)
BUMP_PAIR_SHIFT = 5

# power-study block: centered box whose sides are a quarter of the grid's,
# so it covers 1/16 (6.25%) of a 2D grid
BLOCK_FRACTION = 0.25

KINDS = ("gauss-diff", "bumps2d", "block", "custom-grid")


def _domain_coords(n: int, lo: float = 1.0, hi: float = 64.0) -> np.ndarray:
    """Pixel centers of an ``n``-point axis mapped onto ``[lo, hi]``."""
    if n == 1:
        return np.array([(lo + hi) / 2])
    return lo + (hi - lo) * np.arange(n) / (n - 1)


def _normal_density_2d(s1, s2, mean, var):
    d2 = (s1 - mean[0]) ** 2 + (s2 - mean[1]) ** 2
    return np.exp(-d2 / (2 * var)) / (2 * np.pi * var)


def make_beta1(grid=(64, 64), scale: float = 1.0) -> np.ndarray:
    """Difference of two normal densities, the axes mapped onto [1, 64].

    Pixel ``(i, j)`` of a 64 x 64 grid has coordinates ``(i + 1, j + 1)``.
    """
    grid = _grid2(grid)
    s1, s2 = np.meshgrid(_domain_coords(grid[0]), _domain_coords(grid[1]), indexing="ij")
    g1 = _normal_density_2d(s1, s2, BETA1_MEANS[0], BETA1_VARIANCE)
    g2 = _normal_density_2d(s1, s2, BETA1_MEANS[1], BETA1_VARIANCE)
    return scale * (g1 - g2)


def bump_centers(grid=(64, 64)) -> list[tuple[int, int]]:
    """Pixel indices of the bump centers of :func:`make_beta2`."""
    grid = _grid2(grid)
    pos = np.asarray(BUMP_POSITIONS)
    k = len(pos)
    return [(int(np.round(pos[j] * (grid[0] - 1))),
             int(np.round(pos[(j + BUMP_PAIR_SHIFT) % k] * (grid[1] - 1))))
            for j in range(k)]


def make_beta2(grid=(64, 64), scale: float = 1.0) -> np.ndarray:
    """Two-dimensional bumps image (nonnegative)."""
    grid = _grid2(grid)
    u = np.arange(grid[0]) / max(grid[0] - 1, 1)
    v = np.arange(grid[1]) / max(grid[1] - 1, 1)
    U, V = np.meshgrid(u, v, indexing="ij")
    out = np.zeros(grid)
    for (ci, cj), h, w in zip(bump_centers(grid), BUMP_HEIGHTS, BUMP_WIDTHS):
        r = np.hypot(U - ci / max(grid[0] - 1, 1), V - cj / max(grid[1] - 1, 1)) / w
        out += h * (1.0 + r) ** -4
    return scale * out


def make_block(grid=(64, 64), scale: float = 1.0) -> np.ndarray:
    """Centered binary box, each side ``BLOCK_FRACTION`` of the grid side."""
    grid = tuple(int(g) for g in grid)
    out = np.zeros(grid)
    sl = []
    for g in grid:
        w = max(1, int(round(g * BLOCK_FRACTION)))
        start = (g - w) // 2
        sl.append(slice(start, start + w))
    out[tuple(sl)] = 1.0
    return scale * out


def _grid2(grid) -> tuple[int, int]:
    grid = tuple(int(g) for g in grid)
    if len(grid) != 2:
        raise ValueError("this coefficient image is defined on 2D grids only")
    return grid


@dataclass
class CoefficientImageSpec:
    kind: str
    grid_shape: tuple[int, ...] = (64, 64)
    scale: float = 1.0
    values: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        self.grid_shape = tuple(int(g) for g in self.grid_shape)
        if self.kind == "custom-grid":
            if self.values is None:
                raise ValueError("custom-grid needs values")
            self.values = np.asarray(self.values, dtype=np.float64)
            if self.values.shape != self.grid_shape:
                raise ValueError("custom values do not match grid_shape")

    def generate(self) -> np.ndarray:
        if self.kind == "gauss-diff":
            img = make_beta1(self.grid_shape, self.scale)
        elif self.kind == "bumps2d":
            img = make_beta2(self.grid_shape, self.scale)
        elif self.kind == "block":
            img = make_block(self.grid_shape, self.scale)
        else:
            img = self.scale * self.values
        if not np.all(np.isfinite(img)):
            raise ValueError("coefficient image is not finite")
        return img


DESIGN_KINDS = {"beta1": "gauss-diff", "beta2": "bumps2d", "block": "block"}


# --- predictor model -----------------------------------------------------------


def synthetic_seed_stack(grid=(64, 64), n_images: int = 33, seed: int = 0,
                         order: int = 6) -> ImageStack:
    """Smooth random fields standing in for a small real image sample.

    Each image is a common smooth template plus a random combination of
    low-order cosine products ``cos(pi k u) cos(pi l v)``, ``k, l < order``,
    whose standard deviations decay like ``1 / (1 + k + l)^2``.
    """
    grid = _grid2(grid)
    rng = stream(seed, "seed-stack")
    u = (np.arange(grid[0]) + 0.5) / grid[0]
    v = (np.arange(grid[1]) + 0.5) / grid[1]
    basis, sd = [], []
    for k in range(order):
        for l in range(order):
            basis.append(np.outer(np.cos(np.pi * k * u), np.cos(np.pi * l * v)))
            sd.append(1.0 / (1.0 + k + l) ** 2)
    basis = np.array(basis)
    sd = np.array(sd)
    U, V = np.meshgrid(u, v, indexing="ij")
    template = 2.0 + np.exp(-((U - 0.5) ** 2 + (V - 0.45) ** 2) / 0.08)
    coef = rng.standard_normal((n_images, len(sd))) * sd
    images = template + np.einsum("ib,bxy->ixy", coef, basis)
    return ImageStack(images)


@dataclass
class PredictorModel:
    """Eigenimages and variances for generating predictor images."""

    eigenimages: np.ndarray          # (J, *grid)
    variances: np.ndarray            # (J,)
    support: np.ndarray              # screened wavelet coefficient indices
    grid_shape: tuple[int, ...]
    spec: WaveletSpec
    retained_fraction: float = 1.0   # share of excess variance kept by screening

    @property
    def n_components(self) -> int:
        return self.variances.shape[0]

    def basis(self) -> np.ndarray:
        return self.eigenimages.reshape(self.n_components, -1)


def excess_variance(variances: np.ndarray) -> np.ndarray:
    """Coefficient variance above the median level (taken as the noise floor)."""
    variances = np.asarray(variances, dtype=np.float64)
    return np.maximum(variances - np.median(variances), 0.0)


def retained_excess_fraction(variances: np.ndarray, c: int) -> float:
    """Share of the total excess variance held by the ``c`` largest variances."""
    cum = np.cumsum(np.sort(excess_variance(variances))[::-1])
    if cum.size == 0 or cum[-1] == 0:
        return 1.0
    return float(cum[min(max(int(c), 1), cum.size) - 1] / cum[-1])


def fit_predictor_model(seed_images: ImageStack | np.ndarray, n_components: int,
                        n_wavelet_coefs: int, spec: WaveletSpec | None = None) -> PredictorModel:
    """Screened wavelet PCA of a seed stack.

    The seed images are transformed, the ``n_wavelet_coefs``
    highest-variance coefficients are kept, and an SVD of that centered
    submatrix gives the loadings. Eigenimages are the inverse transforms
    of the loadings (zero off the screened set), so they are orthonormal
    when the grid needs no padding.
    """
    stack = seed_images if isinstance(seed_images, ImageStack) else ImageStack(seed_images)
    spec = spec or WaveletSpec()
    if any(g & (g - 1) for g in stack.grid_shape):
        raise ValueError("seed images must have power-of-two sides")
    X, layout = dwt_stack(stack, spec)
    n, N = X.shape
    if not 1 <= n_wavelet_coefs <= N:
        raise ValueError(f"n_wavelet_coefs must be between 1 and {N}")
    Xc = X - X.mean(axis=0)
    var = np.einsum("ij,ij->j", Xc, Xc) / max(n - 1, 1)
    support = np.sort(np.argsort(-var, kind="stable")[:n_wavelet_coefs])
    _, s, Vt = np.linalg.svd(Xc[:, support], full_matrices=False)
    rank = int(np.sum(s > s[0] * max(n, len(support)) * np.finfo(float).eps)) if s.size and s[0] > 0 else 0
    if n_components > rank:
        raise RankError(n_components, rank)
    loadings = np.zeros((n_components, N))
    loadings[:, support] = Vt[:n_components]
    eig = idwt_rows(loadings, layout)
    return PredictorModel(
        eigenimages=eig,
        variances=s[:n_components] ** 2 / max(n - 1, 1),
        support=support,
        grid_shape=stack.grid_shape,
        spec=spec,
        retained_fraction=retained_excess_fraction(var, n_wavelet_coefs),
    )


def default_wavelet_coefs(grid) -> int:
    """Screened-set size scaled from 492 coefficients on a 64 x 64 grid."""
    N = int(np.prod(grid))
    return max(32, int(round(492 * N / 4096)))


def default_j0(grid) -> int:
    """Level two below the finest for small grids, 4 from 64 up."""
    J = int(np.log2(min(grid)))
    return min(4, max(J - 2, 0))


@lru_cache(maxsize=8)
def default_predictor_model(grid=(64, 64)) -> PredictorModel:
    """Model fitted to the synthetic seed stack with package defaults."""
    grid = _grid2(grid)
    stack = synthetic_seed_stack(grid)
    return fit_predictor_model(stack, stack.n - 1, default_wavelet_coefs(grid),
                               WaveletSpec(j0=default_j0(grid)))


def simulate_predictors(model: PredictorModel, n: int, seed: int) -> ImageStack:
    """``x_i = sum_j c_ij rho_j`` with independent ``c_ij ~ N(0, lambda_j)``."""
    c = simulate_scores(model, n, seed)
    return ImageStack((c @ model.basis()).reshape((n,) + tuple(model.grid_shape)))


def simulate_scores(model: PredictorModel, n: int, seed: int) -> np.ndarray:
    rng = stream(seed, "predictors")
    return rng.standard_normal((n, model.n_components)) * np.sqrt(model.variances)


# --- outcomes --------------------------------------------------------------------


@dataclass(frozen=True)
class OutcomeSpec:
    family: str = "gaussian"
    target_r2: float = 0.5
    base_rate: float = 0.5
    seed: int = 0
    sigma: float = 1.0

    def __post_init__(self):
        fam = Family.parse(self.family)
        if not 0.0 <= self.target_r2 < 1.0:
            raise ValueError("target_r2 must lie in [0, 1)")
        if fam.is_binomial and not 0.0 < self.base_rate < 1.0:
            raise ValueError("base_rate must lie in (0, 1)")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def signal_variance_for_r2(r2: float, family, sigma: float = 1.0) -> float:
    """Variance of ``x'beta`` that yields ``r2`` under the module's definitions."""
    noise = LOGISTIC_VARIANCE if Family.parse(family).is_binomial else sigma ** 2
    return r2 / (1.0 - r2) * noise


def _image_matrix(predictors) -> np.ndarray:
    if isinstance(predictors, ImageStack):
        return predictors.matrix()
    X = np.asarray(predictors, dtype=np.float64)
    return X.reshape(X.shape[0], -1)


@dataclass
class ScaledBeta:
    beta: np.ndarray
    delta0: float
    factor: float


def solve_base_rate(score: np.ndarray, base_rate: float, tol: float = 1e-10) -> float:
    """Intercept giving mean ``expit(delta0 + score)`` equal to ``base_rate``."""
    score = np.asarray(score, dtype=np.float64)
    f = lambda d: float(np.mean(expit(d + score))) - base_rate
    lo = np.log(base_rate / (1 - base_rate)) - np.max(np.abs(score)) - 1.0
    hi = np.log(base_rate / (1 - base_rate)) + np.max(np.abs(score)) + 1.0
    return float(optimize.bisect(f, lo, hi, xtol=tol, maxiter=500))


def scale_beta_for_r2(beta: np.ndarray, predictors, spec: OutcomeSpec) -> ScaledBeta:
    """Rescale ``beta`` to the target R-squared over the given predictor sample.

    For binary outcomes the intercept ``delta0`` is then chosen so that
    the average success probability over the sample is the base rate.
    """
    beta = np.asarray(beta, dtype=np.float64)
    X = _image_matrix(predictors)
    if X.shape[1] != beta.size:
        raise ValueError(f"beta has {beta.size} entries, images have {X.shape[1]} voxels")
    score = X @ beta.ravel()
    v = float(np.var(score))
    fam = Family.parse(spec.family)
    if spec.target_r2 == 0:
        factor = 0.0
    elif v <= 0:
        raise ValueError("x'beta has zero variance; no scaling reaches a positive R2")
    else:
        factor = float(np.sqrt(signal_variance_for_r2(spec.target_r2, fam, spec.sigma) / v))
    delta0 = solve_base_rate(factor * score, spec.base_rate) if fam.is_binomial else 0.0
    return ScaledBeta(beta * factor, delta0, factor)


def simulate_outcomes(predictors, beta, delta0: float = 0.0, T=None, delta=None,
                      family="gaussian", seed: int = 0, sigma: float = 1.0) -> np.ndarray:
    """Responses from the linear or logistic model with the given truth."""
    X = _image_matrix(predictors)
    n = X.shape[0]
    eta = X @ np.asarray(beta, dtype=np.float64).ravel() + delta0
    if T is not None:
        eta = eta + np.asarray(T, dtype=np.float64).reshape(n, -1) @ np.asarray(delta, dtype=np.float64).ravel()
    rng = stream(seed, "outcomes")
    if Family.parse(family).is_binomial:
        return (rng.random(n) < expit(eta)).astype(np.float64)
    return eta + sigma * rng.standard_normal(n)


def empirical_r2(y: np.ndarray, score: np.ndarray, family, sigma: float | None = None) -> float:
    """R-squared of outcomes ``y`` explained by the true signal ``score``.

    Gaussian: ``1 - Var(y - score) / Var(y)``. Binary: logistic
    regression of ``y`` on ``score`` gives slope ``b``, and the latent
    form ``b^2 V / (b^2 V + pi^2/3)`` is reported with ``V = Var(score)``.
    """
    y = np.asarray(y, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    if not Family.parse(family).is_binomial:
        return float(1.0 - np.var(y - score) / np.var(y))
    g = fit_glm(np.column_stack([np.ones_like(score), score]), y, "binomial")
    v = g.coefficients[1] ** 2 * np.var(score)
    return float(v / (v + LOGISTIC_VARIANCE))


# --- covariate designs -------------------------------------------------------------


def covariate_effect_for_r2(r2: float, family, sigma: float = 1.0) -> float:
    """Coefficient of a standard normal covariate explaining ``r2`` on its own."""
    return float(np.sqrt(signal_variance_for_r2(r2, family, sigma)))


def simulate_covariate(n: int, seed: int) -> np.ndarray:
    return stream(seed, "covariate").standard_normal(n)


@dataclass
class SimulatedData:
    dataset: Dataset
    beta: np.ndarray          # true coefficient image
    delta: np.ndarray         # true scalar coefficients (intercept first)
    truth: dict


def simulate_dataset(design: str = "beta1", n: int = 200, grid: int = 64,
                     family: str = "gaussian", r2: float = 0.5, base_rate: float = 0.5,
                     seed: int = 0, covariate_r2: float | None = None,
                     sigma: float = 1.0) -> SimulatedData:
    """Images, outcomes and truth for one replicate.

    Predictors come from :func:`default_predictor_model` on a square
    grid. With ``covariate_r2`` a standard normal covariate is added
    whose effect alone explains that R-squared, and ``r2`` then refers
    to the image term.
    """
    if design not in DESIGN_KINDS:
        raise ValueError(f"design must be one of {tuple(DESIGN_KINDS)}")
    fam = Family.parse(family)
    shape = (int(grid), int(grid))
    model = default_predictor_model(shape)
    images = simulate_predictors(model, n, seed)
    X = images.matrix()
    X = X - X.mean(axis=0)
    images = ImageStack(X.reshape((n,) + shape))
    beta0 = CoefficientImageSpec(DESIGN_KINDS[design], shape).generate()
    spec = OutcomeSpec(fam.kind, r2, base_rate, seed, sigma)
    T = np.ones((n, 1))
    names = ("intercept",)
    d1 = None
    if covariate_r2 is not None:
        t = simulate_covariate(n, seed)
        d1 = covariate_effect_for_r2(covariate_r2, fam, sigma)
        T = np.column_stack([T, t])
        names = ("intercept", "t")
    scaled = scale_beta_for_r2(beta0, X, spec)
    beta = scaled.beta
    delta0 = scaled.delta0
    if d1 is not None and fam.is_binomial:
        delta0 = solve_base_rate(X @ beta.ravel() + d1 * T[:, 1], base_rate)
    delta = np.array([delta0] + ([d1] if d1 is not None else []))
    y = simulate_outcomes(X, beta, 0.0, T, delta, fam, seed, sigma)
    truth = {
        "design": design, "n": int(n), "grid": int(grid), "family": fam.kind,
        "r2": float(r2), "base_rate": float(base_rate) if fam.is_binomial else None,
        "seed": int(seed), "covariate_r2": covariate_r2, "sigma": float(sigma),
        "delta": delta.tolist(), "beta_scale": scaled.factor,
    }
    return SimulatedData(Dataset(y, T, images, fam, names), beta, delta, truth)


def confounded_dataset(n: int = 200, grid: int = 16, seed: int = 0, confounded: bool = True,
                       t_effect: float = 1.5, image_shift: float = 1.0,
                       image_r2: float = 0.3) -> SimulatedData:
    """Binary outcomes with a scalar covariate ``t`` and a planted confound.

    Confounded: ``t`` drives the outcome, and it also adds
    ``image_shift * t`` (in units of the predictor standard deviation)
    to every voxel of the central block. The images have no effect of
    their own.

    Null: ``t`` still drives the outcome but is independent of the
    images, which carry a genuine effect through the block image
    (``image_r2`` on the latent scale).
    """
    shape = (int(grid), int(grid))
    model = default_predictor_model(shape)
    images = simulate_predictors(model, n, seed).matrix()
    t = simulate_covariate(n, seed)
    block = make_block(shape).ravel()
    if confounded:
        sd = float(np.sqrt(np.mean(np.var(images[:, block > 0], axis=0))))
        images = images + image_shift * sd * np.outer(t, block)
        beta = np.zeros(block.size)
    else:
        beta = scale_beta_for_r2(block, images, OutcomeSpec("binomial", image_r2)).beta
    images = images - images.mean(axis=0)
    score = images @ beta
    delta0 = solve_base_rate(score + t_effect * t, 0.5)
    delta = np.array([delta0, t_effect])
    T = np.column_stack([np.ones(n), t])
    y = simulate_outcomes(images, beta, 0.0, T, delta, "binomial", seed)
    truth = {"design": "confounded" if confounded else "unconfounded", "n": int(n),
             "grid": int(grid), "seed": int(seed), "t_effect": t_effect,
             "image_shift": image_shift if confounded else 0.0,
             "image_r2": 0.0 if confounded else image_r2, "delta": delta.tolist()}
    return SimulatedData(Dataset(y, T, ImageStack(images.reshape((n,) + shape)),
                                 "binomial", ("intercept", "t")),
                         beta.reshape(shape), delta, truth)
