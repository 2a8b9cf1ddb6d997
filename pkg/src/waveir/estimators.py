"""Sparse PCR, sparse PLS and elastic-net scalar-on-image estimators.

All three work on the transformed design ``X~ = X W'`` (wavelet domain)
or on the raw voxel matrix (``domain="voxel"``, W = identity), with
mean-centered columns. Scalar covariates ``T`` are never screened or
penalized.

Elastic-net objective
---------------------
For a Gaussian response the net minimizes::

    (1/(2n)) ||y - T delta - X~ beta||^2 + lam * (alpha ||beta||_1 + (1 - alpha) ||beta||_2^2)

and for a binary response the first term becomes ``deviance / (2n)``.
The ridge term is *not* halved. Consequences used throughout:

* smallest penalty giving ``beta = 0``:
  ``lam_max = max_j |x_j' (y - mu_0)| / (n alpha)`` with ``mu_0`` the
  null fit of ``y`` on ``T``;
* orthonormal design, ``alpha = 0``: ``beta_j = x_j'y / (1 + 2 n lam)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import _cd
from .dwt import ImageStack, Layout, WaveletSpec, dwt_stack, idwt_rows, stack_layout
from .glm import Family, GlmFit, deviance, fit_glm

METHODS = ("pcr", "pls", "net")
DOMAINS = ("wavelet", "voxel")

NET_TOL = 1e-7
# Binary fits stop the inner solve once the linear predictor moves by less
# than this; CV deviances then agree with the strict setting to ~1e-6.
NET_TOL_BINOMIAL = 1e-5
NET_MAX_SWEEPS = 100_000
NET_MAX_OUTER = 100
MIN_WEIGHT = 1e-5
SATURATION = 1e-3


class EstimationError(ValueError):
    """A fit cannot be computed for this data and configuration."""


class RankError(EstimationError):
    def __init__(self, requested: int, rank: int, what: str = "components"):
        super().__init__(
            f"requested {requested} {what} but the screened design has rank {rank}; "
            f"at most {rank} are achievable"
        )
        self.requested = requested
        self.rank = rank


# ---------------------------------------------------------------------------
# configuration and data


@dataclass(frozen=True)
class EstimatorConfig:
    method: str
    domain: str = "wavelet"
    wavelet: WaveletSpec = field(default_factory=WaveletSpec)
    c: int | None = None
    m: int | None = None
    alpha: float | None = None
    lambda_: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")
        if self.method in ("pcr", "pls"):
            if self.alpha is not None or self.lambda_ is not None:
                raise ValueError(f"alpha/lambda do not apply to method {self.method!r}")
            if self.c is None or self.m is None:
                raise ValueError(f"method {self.method!r} needs both c and m")
            if self.c < 1 or self.m < 1 or self.m > self.c:
                raise ValueError("need 1 <= m <= c")
        else:
            if self.c is not None or self.m is not None:
                raise ValueError("c/m do not apply to method 'net'")
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ValueError("net needs alpha in [0, 1]")
            if self.lambda_ is not None and self.lambda_ < 0:
                raise ValueError("lambda must be nonnegative")

    @property
    def label(self) -> str:
        prefix = "W" if self.domain == "wavelet" else "V"
        return prefix + {"pcr": "PCR", "pls": "PLS", "net": "Net"}[self.method]

    def replace(self, **kw) -> "EstimatorConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wavelet"] = self.wavelet.to_dict()
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        return cls(
            method=d["method"],
            domain=d.get("domain", "wavelet"),
            wavelet=WaveletSpec.from_dict(d["wavelet"]) if "wavelet" in d else WaveletSpec(),
            c=d.get("c"),
            m=d.get("m"),
            alpha=d.get("alpha"),
            lambda_=d.get("lambda"),
        )


def voxel_counterpart(config: EstimatorConfig) -> EstimatorConfig:
    """The same estimator without the wavelet transform."""
    return config.replace(domain="voxel")


class Transform:
    """Wavelet transform (with padding) or identity, for one image grid."""

    def __init__(self, grid_shape, spec: WaveletSpec | None = None, mask=None):
        self.grid_shape = tuple(int(s) for s in grid_shape)
        self.spec = spec
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        self.layout: Layout | None = None if spec is None else stack_layout(self.grid_shape, spec)

    @classmethod
    def for_config(cls, grid_shape, config: EstimatorConfig, mask=None) -> "Transform":
        return cls(grid_shape, config.wavelet if config.domain == "wavelet" else None, mask)

    @property
    def is_identity(self) -> bool:
        return self.spec is None

    @property
    def size(self) -> int:
        return int(np.prod(self.grid_shape)) if self.layout is None else self.layout.size

    @property
    def key(self) -> tuple:
        return (self.grid_shape, self.spec)

    def matrix(self, images) -> np.ndarray:
        stack = images if isinstance(images, ImageStack) else ImageStack(images, self.mask)
        if stack.grid_shape != self.grid_shape:
            raise ValueError(
                f"images have grid {stack.grid_shape}, transform expects {self.grid_shape}"
            )
        if self.mask is not None and stack.mask is None:
            stack = ImageStack(stack.data, self.mask)
        if self.is_identity:
            return stack.matrix()
        X, _ = dwt_stack(stack, self.spec)
        return X

    def image(self, beta_tilde: np.ndarray) -> np.ndarray:
        beta_tilde = np.asarray(beta_tilde, dtype=np.float64)
        if self.is_identity:
            img = beta_tilde.reshape(self.grid_shape).copy()
        else:
            img = idwt_rows(beta_tilde, self.layout)[0]
        if self.mask is not None:
            img = np.where(self.mask, img, 0.0)
        return img

    def to_dict(self) -> dict:
        d = {"grid_shape": list(self.grid_shape), "kind": "identity" if self.is_identity else "wavelet"}
        if self.layout is not None:
            d["layout"] = self.layout.to_dict()
        if self.mask is not None:
            d["mask"] = np.flatnonzero(self.mask.ravel()).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Transform":
        grid = tuple(d["grid_shape"])
        mask = None
        if "mask" in d:
            flat = np.zeros(int(np.prod(grid)), dtype=bool)
            flat[np.asarray(d["mask"], dtype=int)] = True
            mask = flat.reshape(grid)
        if d["kind"] == "identity":
            return cls(grid, None, mask)
        layout = Layout.from_dict(d["layout"])
        t = cls(grid, layout.spec, mask)
        if t.layout.to_dict() != layout.to_dict():
            raise ValueError("stored layout does not match the grid shape")
        return t


@dataclass
class Dataset:
    """Responses, scalar covariates (leading column of ones) and images."""

    y: np.ndarray
    T: np.ndarray | None
    images: ImageStack
    family: Family = field(default_factory=Family)
    covariate_names: tuple[str, ...] = ()
    _designs: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.family = Family.parse(self.family)
        if not isinstance(self.images, ImageStack):
            self.images = ImageStack(self.images)
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        n = self.y.shape[0]
        if self.T is None:
            self.T = np.ones((n, 1))
        self.T = np.asarray(self.T, dtype=np.float64)
        if self.T.ndim == 1:
            self.T = self.T[:, None]
        if n < 2:
            raise ValueError("need at least 2 observations")
        if self.T.shape[0] != n or self.images.n != n:
            raise ValueError(
                f"row counts differ: y has {n}, T has {self.T.shape[0]}, images have {self.images.n}"
            )
        if not np.all(self.T[:, 0] == 1.0):
            raise ValueError("the first column of T must be the constant 1")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.T))):
            raise ValueError("missing values in y or T")
        if self.family.is_binomial and np.any((self.y != 0) & (self.y != 1)):
            raise ValueError("binomial responses must be 0/1")
        if not self.covariate_names:
            self.covariate_names = ("intercept",) + tuple(
                f"t{j}" for j in range(1, self.T.shape[1])
            )

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def design(self, config: EstimatorConfig) -> "Design":
        """Transformed design for ``config``'s domain (cached)."""
        tr = Transform.for_config(self.images.grid_shape, config, self.images.mask)
        key = tr.key
        if key not in self._designs:
            self._designs[key] = Design(self.y, self.T, tr.matrix(self.images), tr, self.family)
        return self._designs[key]

    def with_images(self, images: ImageStack | np.ndarray) -> "Dataset":
        if not isinstance(images, ImageStack):
            images = ImageStack(images, self.images.mask)
        return Dataset(self.y, self.T, images, self.family, self.covariate_names)

    def with_response(self, y: np.ndarray) -> "Dataset":
        new = Dataset(y, self.T, self.images, self.family, self.covariate_names)
        new._designs = {k: replace(v, y=new.y) for k, v in self._designs.items()}
        return new

    def with_covariates(self, T: np.ndarray | None, names=()) -> "Dataset":
        new = Dataset(self.y, T, self.images, self.family, tuple(names))
        new._designs = {k: replace(v, T=new.T) for k, v in self._designs.items()}
        return new


@dataclass
class Design:
    """Array-level problem: ``y``, ``T`` and the transformed image matrix ``X``."""

    y: np.ndarray
    T: np.ndarray
    X: np.ndarray
    transform: Transform
    family: Family

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def rows(self, idx) -> "Design":
        return Design(self.y[idx], self.T[idx], self.X[idx], self.transform, self.family)


# ---------------------------------------------------------------------------
# fitted model


@dataclass
class ScalarOnImageFit:
    delta: np.ndarray
    beta_tilde: np.ndarray
    beta_image: np.ndarray
    selected: np.ndarray
    column_centers: np.ndarray
    config: EstimatorConfig
    family: Family
    transform: Transform
    components: np.ndarray | None = None
    glm: GlmFit | None = field(default=None, repr=False)
    converged: bool = True
    info: dict = field(default_factory=dict)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.beta_tilde)

    @property
    def offset(self) -> float:
        s = self.support
        return float(self.column_centers[s] @ self.beta_tilde[s])

    def linear_predictor_design(self, T: np.ndarray, X: np.ndarray) -> np.ndarray:
        T = np.asarray(T, dtype=np.float64)
        if T.ndim == 1:
            T = T[:, None]
        if T.shape[1] != self.delta.shape[0]:
            raise ValueError(f"T has {T.shape[1]} columns, fit expects {self.delta.shape[0]}")
        if X.shape[1] != self.beta_tilde.shape[0]:
            raise ValueError(
                f"design has {X.shape[1]} columns, fit expects {self.beta_tilde.shape[0]}"
            )
        s = self.support
        return T @ self.delta + X[:, s] @ self.beta_tilde[s] - self.offset

    def linear_predictor(self, T, images) -> np.ndarray:
        return self.linear_predictor_design(T, self.transform.matrix(images))

    def image_score(self, images) -> np.ndarray:
        """``x_i' beta`` per image, centered with the training means."""
        X = self.transform.matrix(images)
        s = self.support
        return X[:, s] @ self.beta_tilde[s] - self.offset

    def predict(self, T, images) -> np.ndarray:
        return self.family.inverse_link(self.linear_predictor(T, images))

    def centers_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.column_centers).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# building blocks


def center_columns(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Subtract column means; returns ``(centered, means)``."""
    X = np.asarray(X, dtype=np.float64)
    means = X.mean(axis=0)
    return X - means, means


def _top_indices(score: np.ndarray, c: int) -> np.ndarray:
    N = score.shape[0]
    if not 1 <= c <= N:
        raise ValueError(f"c must be between 1 and {N}")
    order = np.argsort(-score, kind="stable")
    return np.sort(order[:c])


def select_by_variance(Xc: np.ndarray, c: int) -> np.ndarray:
    """Indices (0-based, ascending) of the ``c`` highest-variance columns."""
    n = Xc.shape[0]
    var = np.einsum("ij,ij->j", Xc, Xc) / max(n - 1, 1)
    return _top_indices(var, c)


def select_by_covariance(Xc: np.ndarray, y: np.ndarray, c: int) -> np.ndarray:
    """Indices of the ``c`` columns with largest ``|cov(x_j, y)|``."""
    n = Xc.shape[0]
    yc = np.asarray(y, dtype=np.float64) - np.mean(y)
    cov = np.abs(Xc.T @ yc) / max(n - 1, 1)
    return _top_indices(cov, c)


def _rank(s: np.ndarray, shape) -> int:
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > s[0] * max(shape) * np.finfo(float).eps))


def pls_components(Xs: np.ndarray, y: np.ndarray, m: int) -> np.ndarray:
    """Unit-norm PLS weight vectors with mutually orthogonal scores.

    Each direction maximizes the covariance of ``Xs r`` with ``y``
    among unit vectors whose scores are orthogonal to all previous
    scores. The maximizer is the cross-covariance vector ``Xs'y``
    deflated against the previous score loadings ``Xs'Xs r_k``, then
    normalized, so its covariance with ``y`` is nonnegative.
    """
    Xs = np.asarray(Xs, dtype=np.float64)
    n, c = Xs.shape
    rank = _rank(np.linalg.svd(Xs, compute_uv=False), Xs.shape)
    if m > rank:
        raise RankError(m, rank)
    yc = np.asarray(y, dtype=np.float64) - np.mean(y)
    a = Xs.T @ yc
    scale = np.linalg.norm(a)
    if scale <= 1e-12 * (np.linalg.norm(Xs) * np.linalg.norm(yc) + 1e-300):
        raise EstimationError("y has zero covariance with every column; no PLS direction exists")
    R = np.empty((c, m))
    Q = np.empty((c, 0))
    for j in range(m):
        v = a.copy()
        for _ in range(2):
            v -= Q @ (Q.T @ v)
        nv = np.linalg.norm(v)
        if nv <= 1e-10 * scale:
            raise EstimationError(
                f"PLS direction {j + 1} is degenerate: y carries no covariance "
                "beyond the previous components"
            )
        r = v / nv
        R[:, j] = r
        p = Xs.T @ (Xs @ r)
        for _ in range(2):
            p -= Q @ (Q.T @ p)
        Q = np.column_stack([Q, p / np.linalg.norm(p)])
    return R


# ---------------------------------------------------------------------------
# array-level estimators


@dataclass
class _Estimate:
    delta: np.ndarray
    beta: np.ndarray
    centers: np.ndarray
    selected: np.ndarray
    components: np.ndarray | None = None
    glm: GlmFit | None = None
    converged: bool = True
    info: dict = field(default_factory=dict)


def _component_fit(y, T, Xc, centers, sel, W, family) -> _Estimate:
    Z = Xc[:, sel] @ W
    q = T.shape[1]
    g = fit_glm(np.column_stack([T, Z]), y, family)
    beta = np.zeros(Xc.shape[1])
    beta[sel] = W @ g.coefficients[q:]
    return _Estimate(g.coefficients[:q].copy(), beta, centers, sel, W, g, g.converged,
                     {"rank_deficient": g.rank_deficient, "separated": g.separated})


def estimate_pcr(y, T, X, c: int, m: int, family) -> _Estimate:
    Xc, centers = center_columns(X)
    sel = select_by_variance(Xc, c)
    if m > min(c, Xc.shape[0] - 1):
        raise RankError(m, min(c, Xc.shape[0] - 1), "components (m <= min(c, n-1))")
    _, s, Vt = np.linalg.svd(Xc[:, sel], full_matrices=False)
    rank = _rank(s, (Xc.shape[0], len(sel)))
    if m > rank:
        raise RankError(m, rank)
    return _component_fit(y, T, Xc, centers, sel, Vt[:m].T, Family.parse(family))


def estimate_pls(y, T, X, c: int, m: int, family) -> _Estimate:
    Xc, centers = center_columns(X)
    sel = select_by_covariance(Xc, y, c)
    if m > min(c, Xc.shape[0] - 1):
        raise RankError(m, min(c, Xc.shape[0] - 1), "components (m <= min(c, n-1))")
    R = pls_components(Xc[:, sel], y, m)
    return _component_fit(y, T, Xc, centers, sel, R, Family.parse(family))


def lambda_max(y, T, Xc, family, alpha: float) -> float:
    """Smallest lambda at which the net estimate of beta is exactly zero."""
    family = Family.parse(family)
    null = fit_glm(T, y, family)
    n = Xc.shape[0]
    grad = Xc.T @ (y - null.fitted_means) / n
    return float(np.max(np.abs(grad))) / max(alpha, 1e-3)


def lambda_sequence(lmax: float, nlambda: int = 100, ratio: float | None = None,
                    n: int | None = None, N: int | None = None) -> np.ndarray:
    """Log-spaced decreasing grid from ``lmax`` down to ``ratio * lmax``."""
    if ratio is None:
        ratio = 1e-2 if (n is not None and N is not None and n < N) else 1e-4
    if nlambda == 1:
        return np.array([lmax])
    if lmax <= 0:
        return np.zeros(nlambda)
    return np.exp(np.linspace(np.log(lmax), np.log(lmax * ratio), nlambda))


def _gram_inverse(T: np.ndarray, w: np.ndarray) -> np.ndarray:
    if T.shape[1] == 1:
        return np.array([[1.0 / float(w @ (T[:, 0] * T[:, 0]))]])
    return np.linalg.pinv(T.T @ (T * w[:, None]))


def _logit_deviance(y: np.ndarray, eta: np.ndarray) -> float:
    """Binomial deviance of 0/1 responses, written in terms of the logit."""
    return 2.0 * float(np.sum(np.logaddexp(0.0, eta) - y * eta))


STALL_SWEEPS = 25
MAX_DIRECT = 10


def _direct_step(XT, T, w, beta, delta, r, act, lam1, lam2) -> bool:
    """Exact minimizer on the active set with the current signs held fixed.

    Solves the normal equations of the weighted least-squares problem
    restricted to ``act`` (penalty linear in ``beta`` once its signs are
    known). If some coefficient would change sign, the step stops where
    the first one reaches zero and that coefficient is set to zero; the
    objective still decreases because it is a convex quadratic on the
    current orthant. Returns False when no step was taken.
    """
    n = r.shape[0]
    q = T.shape[1]
    XA = XT[act].T
    z = r + T @ delta + XA @ beta[act]
    M = np.column_stack([T, XA])
    G = M.T @ (M * w[:, None]) / n
    G[q:, q:] += 2.0 * lam2 * np.eye(act.size)
    rhs = M.T @ (w * z) / n
    s = np.sign(beta[act])
    rhs[q:] -= lam1 * s
    try:
        sol = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        return False
    if not np.all(np.isfinite(sol)):
        return False
    cur = np.concatenate([delta, beta[act]])
    cross = np.flatnonzero(np.sign(sol[q:]) != s)
    hit = None
    t = 1.0
    if cross.size:
        b0, b1 = cur[q + cross], sol[q + cross]
        frac = b0 / (b0 - b1)
        k = int(np.argmin(frac))
        t, hit = float(frac[k]), int(cross[k])
        if t <= 0.0:
            return False
    new = cur + t * (sol - cur)
    if hit is not None:
        new[q + hit] = 0.0
    delta[:] = new[:q]
    beta[act] = new[q:]
    r[:] = z - M @ new
    return True


def _penalized_wls(XT, T, TwT_inv, w, beta, delta, r, xv, idx, lam1, lam2, tol, max_sweeps):
    """Coordinate descent with direct active-set solves when progress stalls."""
    used = 0
    changed = False
    direct = 0
    while True:
        stall = STALL_SWEEPS if direct < MAX_DIRECT else max_sweeps
        k, ok, ch, stalled = _cd.cd_solve(XT, T, TwT_inv, w, beta, delta, r, xv, idx,
                                          lam1, lam2, tol, max_sweeps - used, stall)
        used += k
        changed |= ch
        if not stalled:
            return ok, changed
        direct += 1
        act = np.flatnonzero(beta)
        _direct_step(XT, T, w, beta, delta, r, act, lam1, lam2)


def _polish(XT, T, w, beta, delta, r, lam1, lam2) -> None:
    """Replace a converged coordinate-descent solution by the exact one.

    One direct solve on the active set with the signs held fixed. The
    result is kept only when no coefficient changes sign and every
    inactive coordinate still satisfies its optimality condition;
    otherwise the coordinate-descent solution is left in place.
    """
    n, q = r.shape[0], T.shape[1]
    act = np.flatnonzero(beta)
    if act.size == 0 or act.size + q > n:
        return
    saved = beta[act].copy(), delta.copy(), r.copy()
    took = _direct_step(XT, T, w, beta, delta, r, act, lam1, lam2)
    keep = took and np.all(np.sign(beta[act]) == np.sign(saved[0]))
    if keep:
        grad = np.abs(XT @ (w * r) / n)
        grad[act] = 0.0
        keep = bool(np.all(grad <= lam1 * (1 + 1e-9) + 1e-15))
    if not keep:
        beta[act], delta[:], r[:] = saved


@dataclass
class NetPath:
    lambdas: np.ndarray
    alpha: float
    deltas: np.ndarray
    betas: np.ndarray
    converged: np.ndarray
    saturated: np.ndarray


def net_path(y, T, Xc, family, alpha: float, lambdas, tol: float | None = None,
             max_sweeps: int = NET_MAX_SWEEPS, max_outer: int = NET_MAX_OUTER) -> NetPath:
    """Elastic-net solutions along ``lambdas`` (warm started, in the given order).

    ``Xc`` must already have centered columns. Coordinate descent runs
    on a strong-rule working set, then the full KKT conditions are
    checked and violators added until none remain. Binary responses use
    an outer IRLS loop around the same penalized solve; once the fit
    explains all but ``SATURATION`` of the null deviance, the remaining
    (smaller) lambdas reuse the last solution and are flagged saturated.
    """
    family = Family.parse(family)
    y = np.asarray(y, dtype=np.float64)
    T = np.ascontiguousarray(T, dtype=np.float64)
    Xc = np.asarray(Xc, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    n, N = Xc.shape
    q = T.shape[1]
    XT = np.ascontiguousarray(Xc.T)
    binom = family.is_binomial

    null = fit_glm(T, y, family)
    delta = null.coefficients.copy()
    beta = np.zeros(N)
    eta = T @ delta
    null_dev = null.deviance
    if binom:
        ctol = NET_TOL_BINOMIAL if tol is None else tol
    else:
        tol = NET_TOL if tol is None else tol
        sy = float(np.std(y))
        ctol = tol * (sy if sy > 0 else 1.0)
        w = np.ones(n)
        TwT_inv = _gram_inverse(T, w)
        xv = _cd.weighted_sq_norms(XT, w)
        r = y - eta

    L = lambdas.shape[0]
    deltas = np.empty((L, q))
    betas = np.empty((L, N))
    conv = np.ones(L, dtype=bool)
    sat = np.zeros(L, dtype=bool)
    active = np.zeros(N, dtype=bool)
    prev = None
    saturated = False
    for k, lam in enumerate(lambdas):
        if saturated:
            deltas[k], betas[k], sat[k] = delta, beta, True
            continue
        lam1 = lam * alpha
        lam2 = lam * (1.0 - alpha)
        ok_all = True
        dev_old = None
        for outer in range(max_outer if binom else 1):
            if binom:
                mu = expit(eta)
                w = np.maximum(mu * (1 - mu), MIN_WEIGHT)
                r = (y - mu) / w
                TwT_inv = _gram_inverse(T, w)
                xv = _cd.weighted_sq_norms(XT, w)
            grad = XT @ (w * r) / n
            thr = lam1 if prev is None else alpha * (2 * lam - prev)
            strong = active | (np.abs(grad) >= thr)
            moved = False
            while True:
                idx = np.flatnonzero(strong).astype(np.int64)
                ok, changed = _penalized_wls(XT, T, TwT_inv, w, beta, delta, r, xv, idx,
                                             lam1, lam2, ctol, max_sweeps)
                ok_all &= ok
                moved |= changed
                grad = XT @ (w * r) / n
                viol = ~strong & (np.abs(grad) > lam1)
                if not viol.any():
                    break
                strong |= viol
                moved = True
            if not binom:
                _polish(XT, T, w, beta, delta, r, lam1, lam2)
            active = beta != 0
            eta = T @ delta + XT[active].T @ beta[active] if active.any() else T @ delta
            if binom:
                dev = _logit_deviance(y, eta)
                if not moved and outer > 0:
                    break
                if dev_old is not None and abs(dev - dev_old) / (abs(dev) + 0.1) < 1e-8:
                    break
                dev_old = dev
        else:
            if binom:
                ok_all = False
        deltas[k], betas[k], conv[k] = delta, beta, ok_all
        if binom and null_dev > 0 and dev <= SATURATION * null_dev:
            saturated = True
        prev = lam
    return NetPath(lambdas, alpha, deltas, betas, conv, sat)


def estimate_net(y, T, X, alpha: float, lam: float, family, tol: float | None = None) -> _Estimate:
    Xc, centers = center_columns(X)
    lmax = lambda_max(y, T, Xc, family, alpha)
    if lam < lmax and lmax > 0:
        # short warm-start path down to the requested penalty
        lams = np.append(lambda_sequence(lmax, 10, max(lam / lmax, 1e-4))[:-1], lam)
    else:
        lams = np.array([lam])
    path = net_path(y, T, Xc, family, alpha, lams, tol=tol)
    beta = path.betas[-1]
    sel = np.flatnonzero(beta)
    return _Estimate(path.deltas[-1].copy(), beta.copy(), centers, sel, None, None,
                     bool(path.converged[-1]),
                     {"lambda_max": lmax, "saturated": bool(path.saturated[-1])})


def estimate(design: Design, config: EstimatorConfig) -> _Estimate:
    y, T, X, fam = design.y, design.T, design.X, design.family
    if config.method == "pcr":
        return estimate_pcr(y, T, X, config.c, config.m, fam)
    if config.method == "pls":
        return estimate_pls(y, T, X, config.c, config.m, fam)
    if config.lambda_ is None:
        raise ValueError("net fit needs an explicit lambda (use tune for 'auto')")
    return estimate_net(y, T, X, config.alpha, config.lambda_, fam)


def finish_fit(est: _Estimate, design: Design, config: EstimatorConfig) -> ScalarOnImageFit:
    return ScalarOnImageFit(
        delta=est.delta,
        beta_tilde=est.beta,
        beta_image=design.transform.image(est.beta),
        selected=est.selected,
        column_centers=est.centers,
        config=config,
        family=design.family,
        transform=design.transform,
        components=est.components,
        glm=est.glm,
        converged=est.converged,
        info=est.info,
    )


def _fit(data: Dataset, config: EstimatorConfig, method: str) -> ScalarOnImageFit:
    if config.method != method:
        raise ValueError(f"config is for method {config.method!r}, not {method!r}")
    design = data.design(config)
    return finish_fit(estimate(design, config), design, config)


def fit_pcr(data: Dataset, config: EstimatorConfig) -> ScalarOnImageFit:
    """Sparse PCR: variance screening to ``c`` columns, then ``m`` PCs."""
    return _fit(data, config, "pcr")


def fit_pls(data: Dataset, config: EstimatorConfig) -> ScalarOnImageFit:
    """Sparse PLS: covariance screening to ``c`` columns, then ``m`` PLS components.

    Components come from the linear criterion whatever the family; only
    the final regression on them is a GLM.
    """
    return _fit(data, config, "pls")


def fit_net(data: Dataset, config: EstimatorConfig) -> ScalarOnImageFit:
    """Naive elastic net (no rescaling) at a fixed ``(alpha, lambda)``."""
    return _fit(data, config, "net")


def fit(data: Dataset, config: EstimatorConfig) -> ScalarOnImageFit:
    return _fit(data, config, config.method)


# ---------------------------------------------------------------------------
# diagnostics for the documented objective


def net_objective(y, T, Xc, delta, beta, alpha, lam, family) -> float:
    family = Family.parse(family)
    n = Xc.shape[0]
    mu = family.inverse_link(T @ delta + Xc @ beta)
    loss = deviance(y, mu, family) / (2 * n)
    return loss + lam * (alpha * np.abs(beta).sum() + (1 - alpha) * np.dot(beta, beta))


def kkt_residuals(y, T, Xc, delta, beta, alpha, lam, family) -> np.ndarray:
    """Per-coordinate violation of the optimality conditions (0 when optimal).

    For nonzero ``beta_j`` this is the absolute subgradient equation
    residual; for zero ``beta_j`` the excess of the gradient over the
    l1 threshold.
    """
    family = Family.parse(family)
    n = Xc.shape[0]
    mu = family.inverse_link(T @ delta + Xc @ beta)
    g = Xc.T @ (y - mu) / n
    nz = beta != 0
    res = np.empty_like(beta)
    res[nz] = np.abs(g[nz] - 2 * lam * (1 - alpha) * beta[nz] - lam * alpha * np.sign(beta[nz]))
    res[~nz] = np.maximum(np.abs(g[~nz]) - lam * alpha, 0.0)
    return res
