"""Permutation tests of the image effect and confounding diagnostics.

The test statistic is the minimized CV score of a tuning grid. Small
values mean good prediction, so the p-value counts null statistics at
or below the observed one::

    p = (1 + #{b : null[b] <= observed}) / (B + 1)

Permutation conventions
-----------------------
For a permutation ``perm`` (0-based array), ``Pi X`` is ``X[perm]``.
The pseudo-predictor design is ``P_T X + Pi (I - P_T) X``, and the
response scheme pairs ``x_j`` with ``y[argsort(perm)]``, so with an
intercept-only ``T`` both schemes build the same (response, image)
pairs from one permutation.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed
from scipy import stats

from .dwt import ImageStack
from .estimators import Dataset, ScalarOnImageFit
from .glm import GlmFit, fit_glm
from .modelsel import CVConfig, CVResult, GridSpec, _resolve_folds, tune
from .rng import single_threaded, stream

SCHEMES = ("response-permutation", "pseudo-predictor")
_SCHEME_ALIASES = {"response": "response-permutation", "pseudo": "pseudo-predictor"}


# ---------------------------------------------------------------------------
# pseudo-predictors


def _check_rank(T: np.ndarray, names=None) -> None:
    _, R, piv = scipy.linalg.qr(T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = (d[0] if d.size else 0.0) * max(T.shape) * np.finfo(float).eps
    rank = int(np.sum(d > tol))
    if rank < T.shape[1]:
        bad = sorted(int(j) for j in piv[rank:])
        labels = [names[j] if names is not None else f"column {j}" for j in bad]
        raise ValueError(
            f"T has rank {rank} < {T.shape[1]} columns; linearly dependent: {', '.join(labels)}"
        )


def _as_permutation(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError(f"not a permutation of {n} indices")
    return perm.astype(np.int64)


def pseudo_predictor_design(T, X, perm, names=None) -> np.ndarray:
    """``P_T X + Pi (I - P_T) X`` for a full-rank ``T``.

    Projections use a thin QR of ``T``. The result is assembled as
    ``X + (Pi R - R)`` with ``R = (I - P_T) X``, which returns ``X``
    unchanged, bit for bit, under the identity permutation.
    """
    T = np.asarray(T, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if T.shape[0] != n:
        raise ValueError(f"T has {T.shape[0]} rows, X has {n}")
    _check_rank(T, names)
    perm = _as_permutation(perm, n)
    Q, _ = np.linalg.qr(T)
    flat = X.reshape(n, -1)
    resid = flat - Q @ (Q.T @ flat)
    return (flat + (resid[perm] - resid)).reshape(X.shape)


# ---------------------------------------------------------------------------
# permutation test


@dataclass(frozen=True)
class PermutationScheme:
    kind: str = "pseudo-predictor"
    B: int = 999
    seed: int = 0
    allow_covariates: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", _SCHEME_ALIASES.get(self.kind, self.kind))
        if self.kind not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if int(self.B) < 1:
            raise ValueError("need at least one permutation (B >= 1)")

    def permutation(self, b: int, n: int) -> np.ndarray:
        return stream(self.seed, "permutation", b).permutation(n)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "B": int(self.B), "seed": int(self.seed),
                "allow_covariates": bool(self.allow_covariates)}

    @classmethod
    def from_dict(cls, d: dict) -> "PermutationScheme":
        return cls(d["kind"], int(d["B"]), int(d["seed"]), bool(d.get("allow_covariates", False)))


def add_one_p_value(observed: float, null_stats) -> float:
    null_stats = np.asarray(null_stats, dtype=np.float64)
    return float((1 + np.sum(null_stats <= observed)) / (null_stats.size + 1))


@dataclass
class PermTestResult:
    observed: float
    null_stats: np.ndarray
    p_value: float
    scheme: PermutationScheme
    observed_best: dict
    selections: list[dict] = field(default_factory=list)
    grid: GridSpec | None = None
    cvconfig: CVConfig | None = None

    def to_dict(self) -> dict:
        return {
            "schema": "waveir.permtest/1",
            "observed": _num(self.observed),
            "p_value": self.p_value,
            "scheme": self.scheme.to_dict(),
            "grid": None if self.grid is None else self.grid.to_dict(),
            "cv": None if self.cvconfig is None else self.cvconfig.to_dict(),
            "observed_best": self.observed_best,
            "null_stats": [_num(v) for v in self.null_stats],
            "selections": self.selections,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["permutation", "statistic", "alpha", "lambda", "c", "m"])
        w.writerow(["observed", repr(float(self.observed)), *_cfg_cells(self.observed_best)])
        for b, (s, sel) in enumerate(zip(self.null_stats, self.selections)):
            w.writerow([b, repr(float(s)), *_cfg_cells(sel)])
        return buf.getvalue()

    def summary(self) -> str:
        B = self.null_stats.size
        below = int(np.sum(self.null_stats <= self.observed))
        return (
            f"Permutation test ({self.scheme.kind}, B={B}, seed={self.scheme.seed})\n"
            f"  observed CV statistic: {self.observed:.6g}\n"
            f"  null statistics <= observed: {below} of {B}\n"
            f"  null range: [{np.min(self.null_stats):.6g}, {np.max(self.null_stats):.6g}]\n"
            f"  p-value: {self.p_value:.4g}\n"
        )


def _cfg_cells(d: dict) -> list:
    return [d.get("alpha"), d.get("lambda"), d.get("c"), d.get("m")]


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _selection(res: CVResult) -> dict:
    d = res.best.to_dict()
    d.pop("wavelet", None)
    d["score"] = _num(res.best_score)
    return d


def _image_rows(data: Dataset) -> np.ndarray:
    return data.images.masked().reshape(data.n, -1)


def permuted_dataset(data: Dataset, scheme: PermutationScheme, b: int) -> Dataset:
    """The ``b``-th permuted copy of ``data`` under ``scheme``."""
    perm = scheme.permutation(b, data.n)
    if scheme.kind == "response-permutation":
        return data.with_response(data.y[np.argsort(perm)])
    X = pseudo_predictor_design(data.T, _image_rows(data), perm, data.covariate_names)
    return data.with_images(ImageStack(X.reshape(data.images.shape), data.images.mask))


def _null_stat(data, grid, cvconfig, folds, scheme, b):
    with single_threaded():
        res = tune(permuted_dataset(data, scheme, b), grid, cvconfig, folds)
    return res.best_score, _selection(res)


def perm_test(data: Dataset, grid: GridSpec, cvconfig: CVConfig,
              scheme: PermutationScheme, folds=None, n_jobs: int = 1) -> PermTestResult:
    """Permutation test of ``beta = 0`` with the minimized CV score as statistic.

    Every permuted data set is tuned from scratch over the same grid
    and the same folds (net lambda grids are recomputed from the
    permuted data). Results depend only on the inputs and the seeds.
    """
    if scheme.kind == "response-permutation" and data.T.shape[1] > 1 and not scheme.allow_covariates:
        raise ValueError(
            "response permutation ignores scalar covariates; use the pseudo-predictor "
            "scheme or set allow_covariates=True"
        )
    if scheme.kind == "pseudo-predictor":
        _check_rank(data.T, data.covariate_names)
    folds = _resolve_folds(data.n, cvconfig, folds)
    with single_threaded():
        obs = tune(data, grid, cvconfig, folds)
    B = int(scheme.B)
    if n_jobs == 1:
        out = [_null_stat(data, grid, cvconfig, folds, scheme, b) for b in range(B)]
    else:
        out = Parallel(n_jobs=n_jobs)(
            delayed(_null_stat)(data, grid, cvconfig, folds, scheme, b) for b in range(B)
        )
    null = np.array([s for s, _ in out])
    return PermTestResult(
        observed=obs.best_score,
        null_stats=null,
        p_value=add_one_p_value(obs.best_score, null),
        scheme=scheme,
        observed_best=_selection(obs),
        selections=[sel for _, sel in out],
        grid=grid,
        cvconfig=cvconfig,
    )


# ---------------------------------------------------------------------------
# confounding diagnostics


@dataclass
class Correlation:
    name: str
    estimate: float | None
    lower: float | None
    upper: float | None
    p_value: float | None
    n: int
    note: str = ""

    @property
    def defined(self) -> bool:
        return self.estimate is not None


def correlation_test(a, b, name: str = "", level: float = 0.95) -> Correlation:
    """Pearson correlation with a Fisher-z interval and a t-test p-value.

    Reported as undefined when either input is constant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.size
    if n < 3:
        return Correlation(name, None, None, None, None, n, "fewer than 3 observations")
    ac, bc = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(ac @ ac), np.sqrt(bc @ bc)
    if na == 0 or nb == 0 or na <= 1e-12 * np.abs(a).max() or nb <= 1e-12 * np.abs(b).max():
        which = "covariate" if na == 0 or na <= 1e-12 * np.abs(a).max() else "image score"
        return Correlation(name, None, None, None, None, n, f"undefined: constant {which}")
    r = float(np.clip((ac @ bc) / (na * nb), -1.0, 1.0))
    if abs(r) == 1.0:
        return Correlation(name, r, r, r, 0.0, n)
    tstat = r * np.sqrt((n - 2) / (1 - r * r))
    p = float(2 * stats.t.sf(abs(tstat), n - 2))
    if n > 3:
        q = stats.norm.ppf(0.5 + level / 2)
        z, se = np.arctanh(r), 1 / np.sqrt(n - 3)
        lo, hi = float(np.tanh(z - q * se)), float(np.tanh(z + q * se))
    else:
        lo, hi = -1.0, 1.0
    return Correlation(name, r, lo, hi, p, n)


@dataclass
class ConfounderReport:
    """Scalar-model Wald table and image-score correlations per covariate."""

    names: tuple[str, ...]
    scalar_model: GlmFit
    wald: dict
    image_score_correlations: list[Correlation]
    local_overlap: dict | None = None
    level: float = 0.95

    def flagged(self, threshold: float = 0.3, alpha: float = 0.05) -> list[str]:
        """Covariates whose correlation with the image score is large and significant."""
        return [c.name for c in self.image_score_correlations
                if c.defined and abs(c.estimate) > threshold and c.p_value < alpha]

    def to_dict(self) -> dict:
        rows = []
        for j, name in enumerate(self.names):
            row = {"name": name}
            for key in ("estimate", "std_error", "lower", "upper", "p_value"):
                row[key] = _num(self.wald[key][j])
            rows.append(row)
        return {
            "schema": "waveir.confounders/1",
            "level": self.level,
            "family": self.scalar_model.family.kind,
            "scalar_model": rows,
            "correlations": [c.__dict__.copy() for c in self.image_score_correlations],
            "local_overlap": self.local_overlap,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["covariate", "estimate", "lower", "upper", "p_value",
                    "correlation", "corr_lower", "corr_upper", "corr_p_value"])
        corr = {c.name: c for c in self.image_score_correlations}
        for row in self.to_dict()["scalar_model"]:
            c = corr.get(row["name"])
            w.writerow([row["name"], row["estimate"], row["lower"], row["upper"], row["p_value"],
                        *(("", "", "", "") if c is None else
                          (c.estimate, c.lower, c.upper, c.p_value))])
        return buf.getvalue()

    def table(self) -> str:
        """Fixed-width text table: scalar model (left), score correlations (right)."""
        pct = int(round(100 * self.level))
        head = (f"{'':<14}{'Estimate (' + str(pct) + '% CI)':<32}{'p-value':>10}   "
                f"{'Correlation (' + str(pct) + '% CI)':<28}{'p-value':>10}")
        lines = [head, "-" * len(head)]
        corr = {c.name: c for c in self.image_score_correlations}
        for j, name in enumerate(self.names):
            est = (f"{self.wald['estimate'][j]:.3g} "
                   f"({self.wald['lower'][j]:.3g}, {self.wald['upper'][j]:.3g})")
            left = f"{name:<14}{est:<32}{_fmt_p(self.wald['p_value'][j]):>10}   "
            c = corr.get(name)
            if c is None:
                right = ""
            elif not c.defined:
                right = f"{'undefined':<28}{'':>10}"
            else:
                right = f"{f'{c.estimate:.2f} ({c.lower:.2f}, {c.upper:.2f})':<28}{_fmt_p(c.p_value):>10}"
            lines.append((left + right).rstrip())
        return "\n".join(lines) + "\n"


def _fmt_p(p) -> str:
    p = float(p)
    return f"{p:.2g}" if p < 0.001 else f"{p:.3f}"


def local_overlap(T: np.ndarray, images: ImageStack, beta_image: np.ndarray, names,
                  threshold: float = 0.3, support_tol: float = 1e-8) -> dict:
    """Exploratory voxelwise summary for each non-intercept covariate.

    Among voxels where ``|beta(s)|`` exceeds ``support_tol`` times its
    maximum, reports the fraction where ``|corr(t, x(s))| > threshold``.
    Voxels with constant intensity are left out.
    """
    X = images.matrix()
    b = np.asarray(beta_image, dtype=np.float64).ravel()
    if images.mask is not None:
        b = b[images.mask.ravel()] if b.size != X.shape[1] else b
    top = np.abs(b).max() if b.size else 0.0
    support = np.flatnonzero(np.abs(b) > support_tol * top) if top > 0 else np.array([], int)
    Xs = X[:, support]
    Xs = Xs - Xs.mean(axis=0)
    sx = np.sqrt(np.einsum("ij,ij->j", Xs, Xs))
    ok = sx > 0
    out = {"threshold": threshold, "support_size": int(support.size), "covariates": {}}
    for j in range(1, T.shape[1]):
        t = T[:, j] - T[:, j].mean()
        st = np.sqrt(t @ t)
        if st == 0 or not ok.any():
            out["covariates"][names[j]] = None
            continue
        r = (t @ Xs[:, ok]) / (st * sx[ok])
        out["covariates"][names[j]] = {
            "fraction": float(np.mean(np.abs(r) > threshold)),
            "voxels": int(ok.sum()),
        }
    return out


def confounder_diagnostics(data: Dataset, images_only_fit: ScalarOnImageFit,
                           level: float = 0.95, local: bool = True,
                           local_threshold: float = 0.3) -> ConfounderReport:
    """Global confounding checks for every non-intercept covariate.

    ``images_only_fit`` must have been trained without the scalar
    covariates (intercept only). The image score ``x_i' beta`` is
    correlated with each non-intercept column of ``data.T``; binary
    covariates enter as 0/1 numbers.
    """
    if images_only_fit.delta.shape[0] != 1:
        raise ValueError("the image fit must use an intercept-only T")
    names = tuple(data.covariate_names)
    glm = fit_glm(data.T, data.y, data.family)
    wald = glm.wald_table(level)
    score = images_only_fit.image_score(data.images)
    corrs = [correlation_test(data.T[:, j], score, names[j], level)
             for j in range(1, data.T.shape[1])]
    overlap = (local_overlap(data.T, data.images, images_only_fit.beta_image, names,
                             local_threshold) if local else None)
    return ConfounderReport(names, glm, wald, corrs, overlap, level)
