"""Gaussian-identity and binomial-logit GLMs fitted by IRLS."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit

GAUSSIAN = "gaussian-identity"
BINOMIAL = "binomial-logit"

PROB_CLIP = 1e-12
IRLS_TOL = 1e-8
IRLS_MAXIT = 100


@dataclass(frozen=True)
class Family:
    """Canonical-link exponential family. Only two kinds are supported."""

    kind: str = GAUSSIAN

    def __post_init__(self):
        if self.kind not in (GAUSSIAN, BINOMIAL):
            raise ValueError(f"unsupported family {self.kind!r}")

    @classmethod
    def parse(cls, name: "str | Family") -> "Family":
        if isinstance(name, Family):
            return name
        aliases = {"gaussian": GAUSSIAN, "binomial": BINOMIAL, "logistic": BINOMIAL}
        return cls(aliases.get(name, name))

    @property
    def is_binomial(self) -> bool:
        return self.kind == BINOMIAL

    def inverse_link(self, eta: np.ndarray) -> np.ndarray:
        return expit(eta) if self.is_binomial else np.asarray(eta, dtype=np.float64)

    def unit_deviance(self, y: np.ndarray, mu: np.ndarray) -> np.ndarray:
        """Per-observation deviance contributions."""
        y = np.asarray(y, dtype=np.float64)
        mu = np.asarray(mu, dtype=np.float64)
        if not self.is_binomial:
            return (y - mu) ** 2
        if np.any(~np.isfinite(mu)) or np.any(mu < 0) or np.any(mu > 1):
            raise ValueError("binomial means must lie in [0, 1]")
        mu = np.clip(mu, PROB_CLIP, 1 - PROB_CLIP)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
            t0 = np.where(y < 1, (1 - y) * np.log(np.where(y < 1, 1 - y, 1.0) / (1 - mu)), 0.0)
        return 2.0 * (t1 + t0)


def deviance(y, mu, family: Family | str) -> float:
    """Total deviance; residual sum of squares in the Gaussian case."""
    return float(np.sum(Family.parse(family).unit_deviance(y, mu)))


@dataclass
class GlmFit:
    coefficients: np.ndarray
    fitted_means: np.ndarray
    deviance: float
    converged: bool
    iterations: int
    family: Family
    rank_deficient: bool = False
    separated: bool = False
    cov_unscaled: np.ndarray | None = field(default=None, repr=False)
    scale: float = 1.0
    df_resid: int = 0
    deviance_trace: list = field(default_factory=list, repr=False)

    @property
    def linear_predictor(self) -> np.ndarray:
        if self.family.is_binomial:
            mu = np.clip(self.fitted_means, PROB_CLIP, 1 - PROB_CLIP)
            return np.log(mu / (1 - mu))
        return self.fitted_means

    def standard_errors(self) -> np.ndarray:
        if self.cov_unscaled is None:
            raise ValueError("covariance is unavailable for a rank-deficient fit")
        return np.sqrt(np.diag(self.cov_unscaled) * self.scale)

    def wald_table(self, level: float = 0.95) -> dict:
        """Estimates with Wald intervals and p-values.

        Gaussian fits use the t distribution on the residual degrees of
        freedom; binomial fits use the normal.
        """
        se = self.standard_errors()
        est = self.coefficients
        if self.family.is_binomial or self.df_resid <= 0:
            dist = stats.norm
        else:
            dist = stats.t(self.df_resid)
        q = dist.ppf(0.5 + level / 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = est / se
        return {
            "estimate": est,
            "std_error": se,
            "lower": est - q * se,
            "upper": est + q * se,
            "statistic": z,
            "p_value": 2 * dist.sf(np.abs(z)),
        }


def _lstsq(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    coef, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    return coef, int(rank)


def fit_glm(design: np.ndarray, y: np.ndarray, family: Family | str = GAUSSIAN,
            tol: float = IRLS_TOL, maxit: int = IRLS_MAXIT) -> GlmFit:
    """Maximum-likelihood GLM fit.

    Gaussian models are solved directly by least squares. Binomial
    models use IRLS with step halving, stopping when the relative
    change in deviance drops below ``tol``. Rank-deficient designs get
    the minimum-norm solution and ``rank_deficient=True``; perfectly
    separated binomial data come back with ``converged=False`` and
    ``separated=True`` rather than raising.
    """
    family = Family.parse(family)
    X = np.asarray(design, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64)
    n, q = X.shape
    if y.shape != (n,):
        raise ValueError(f"response has shape {y.shape}, design has {n} rows")
    if family.is_binomial and np.any((y != 0) & (y != 1)):
        raise ValueError("binomial responses must be 0/1")

    if not family.is_binomial:
        coef, rank = _lstsq(X, y)
        mu = X @ coef
        dev = deviance(y, mu, family)
        cov = _unscaled_cov(X, np.ones(n), rank, q)
        df = n - rank
        scale = dev / df if df > 0 else np.nan
        return GlmFit(coef, mu, dev, True, 1, family, rank < q, False, cov, scale, df)

    ybar = (y + 0.5) / 2.0
    eta = np.log(ybar / (1 - ybar))
    mu = expit(eta)
    coef = np.zeros(q)
    dev_old = deviance(y, mu, family)
    converged = False
    rank = q
    it = 0
    trace = []
    for it in range(1, maxit + 1):
        w = np.maximum(mu * (1 - mu), 1e-10)
        z = eta + (y - mu) / w
        sw = np.sqrt(w)
        new, rank = _lstsq(X * sw[:, None], z * sw)
        eta_new = X @ new
        mu_new = expit(eta_new)
        dev = deviance(y, mu_new, family)
        if it > 1:
            halvings = 0
            while dev > dev_old + 1e-10 * (abs(dev_old) + 1.0) and halvings < 30:
                new = 0.5 * (new + coef)
                eta_new = X @ new
                mu_new = expit(eta_new)
                dev = deviance(y, mu_new, family)
                halvings += 1
        coef, eta, mu = new, eta_new, mu_new
        trace.append(dev)
        if abs(dev - dev_old) / (abs(dev) + 0.1) < tol:
            converged = True
            break
        dev_old = dev
    separated = bool(np.any(mu <= 1e-10) or np.any(mu >= 1 - 1e-10))
    if separated:
        converged = False
    w = np.maximum(mu * (1 - mu), 1e-10)
    cov = _unscaled_cov(X, w, rank, q)
    return GlmFit(coef, mu, deviance(y, mu, family), converged, it, family,
                  rank < q, separated, cov, 1.0, n - rank, trace)


def _unscaled_cov(X: np.ndarray, w: np.ndarray, rank: int, q: int) -> np.ndarray | None:
    if rank < q:
        return None
    info = X.T @ (X * w[:, None])
    try:
        return np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return None


def predict(fit, T_new, X_new=None, family: Family | str | None = None) -> np.ndarray:
    """Predicted means ``g^{-1}(T delta + X beta)`` for new data.

    ``fit`` is a :class:`GlmFit` (``T_new`` is then the full design and
    ``X_new`` is ignored) or a scalar-on-image fit, in which case
    ``X_new`` holds the new images.
    """
    if isinstance(fit, GlmFit):
        fam = Family.parse(family) if family is not None else fit.family
        T_new = np.asarray(T_new, dtype=np.float64)
        if T_new.ndim == 1:
            T_new = T_new[:, None]
        if T_new.shape[1] != fit.coefficients.shape[0]:
            raise ValueError(
                f"design has {T_new.shape[1]} columns, fit has {fit.coefficients.shape[0]}"
            )
        return fam.inverse_link(T_new @ fit.coefficients)
    return fit.predict(T_new, X_new)
