"""Repeated K-fold cross-validation and tuning-grid search.

Two aggregates are available. ``mean`` averages the fold loss sums over
all ``R*K`` held-out folds::

    (1/(R K)) sum_r sum_k sum_{i in I_rk} L(y_i; fit without I_rk)

and ``median`` takes, in each repetition, the median of the ``K`` fold
sums and averages those over repetitions, which keeps a single
separated fold from dominating a logistic CV curve.

Everything data-dependent (column centers, screening, SVD, PLS weights,
penalty path) is recomputed from the training rows of each fold.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .dwt import WaveletSpec
from .estimators import (
    Dataset,
    Design,
    EstimationError,
    EstimatorConfig,
    center_columns,
    estimate,
    lambda_max,
    lambda_sequence,
    net_path,
    pls_components,
    select_by_covariance,
    select_by_variance,
    _rank,
)
from .glm import Family, fit_glm
from .rng import single_threaded, stream

LOSSES = ("squared-error", "deviance")
AGGREGATES = ("mean", "median")


@dataclass(frozen=True)
class CVConfig:
    K: int = 5
    R: int = 5
    seed: int = 0
    loss: str | None = None
    aggregate: str = "mean"

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.R < 1:
            raise ValueError("R must be at least 1")
        if self.loss is not None and self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.aggregate not in AGGREGATES:
            raise ValueError(f"aggregate must be one of {AGGREGATES}")

    def resolved_loss(self, family: Family) -> str:
        if self.loss is not None:
            return self.loss
        return "deviance" if family.is_binomial else "squared-error"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CVConfig":
        return cls(**d)


def make_folds(n: int, K: int, R: int, seed: int) -> list[list[np.ndarray]]:
    """``R`` independent random partitions of ``range(n)`` into ``K`` folds.

    Fold sizes differ by at most one; indices inside a fold are sorted.
    """
    if K > n:
        raise ValueError(f"cannot split {n} observations into {K} folds")
    if K < 2:
        raise ValueError("K must be at least 2")
    out = []
    for r in range(R):
        perm = stream(seed, "folds", r).permutation(n)
        out.append([np.sort(f) for f in np.array_split(perm, K)])
    return out


def _unit_loss(y, eta, family: Family, loss: str) -> np.ndarray:
    mu = family.inverse_link(eta)
    if loss == "squared-error":
        return (y - mu) ** 2
    return family.unit_deviance(y, mu)


def aggregate(fold_sums: np.ndarray, how: str) -> float:
    """Combine an ``(R, K)`` table of fold loss sums into one CV score."""
    fold_sums = np.asarray(fold_sums, dtype=np.float64)
    if not np.all(np.isfinite(fold_sums)):
        return float("inf")
    if how == "mean":
        return float(fold_sums.mean())
    if how == "median":
        return float(np.median(fold_sums, axis=1).mean())
    raise ValueError(f"unknown aggregate {how!r}")


# ---------------------------------------------------------------------------
# grids


@dataclass
class GridSpec:
    """Tuning grid at fixed transform.

    PCR/PLS grids are the product ``c x m`` (pairs with ``m > c`` are
    dropped). Net grids are ``alpha x lambda``; when ``lambdas`` is None
    each alpha gets ``nlambda`` log-spaced values from the largest
    null-model penalty down to ``lambda_ratio`` times it.
    """

    method: str
    domain: str = "wavelet"
    wavelet: WaveletSpec = field(default_factory=WaveletSpec)
    c: tuple[int, ...] = ()
    m: tuple[int, ...] = ()
    alpha: tuple[float, ...] = (0.1, 0.4, 0.7, 1.0)
    lambdas: tuple[float, ...] | None = None
    nlambda: int = 100
    lambda_ratio: float | None = None

    def base(self, **kw) -> EstimatorConfig:
        return EstimatorConfig(method=self.method, domain=self.domain, wavelet=self.wavelet, **kw)

    def component_grid(self) -> list[EstimatorConfig]:
        grid = [self.base(c=int(c), m=int(m))
                for c in sorted(set(self.c)) for m in sorted(set(self.m)) if m <= c]
        if not grid:
            raise ValueError("tuning grid is empty")
        return grid

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wavelet"] = self.wavelet.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        d["wavelet"] = WaveletSpec.from_dict(d["wavelet"])
        for k in ("c", "m", "alpha"):
            d[k] = tuple(d.get(k, ()))
        if d.get("lambdas") is not None:
            d["lambdas"] = tuple(d["lambdas"])
        return cls(**d)


def net_lambda_grid(design: Design, alpha: float, folds, nlambda: int,
                    ratio: float | None) -> np.ndarray:
    """Lambda grid whose first value zeroes beta on the full data and in every fold."""
    def lmax_of(rows):
        Xc, _ = center_columns(design.X[rows])
        return lambda_max(design.y[rows], design.T[rows], Xc, design.family, alpha)

    everything = np.arange(design.n)
    top = lmax_of(everything)
    for rep in folds:
        for held in rep:
            top = max(top, lmax_of(np.setdiff1d(everything, held)))
    return lambda_sequence(top, nlambda, ratio, design.n, design.X.shape[1])


def expand_grid(design: Design, grid: GridSpec, folds) -> list[EstimatorConfig]:
    if grid.method != "net":
        return grid.component_grid()
    out = []
    for a in grid.alpha:
        lams = (np.asarray(grid.lambdas, dtype=np.float64) if grid.lambdas is not None
                else net_lambda_grid(design, a, folds, grid.nlambda, grid.lambda_ratio))
        lams = np.sort(lams)[::-1]
        out.extend(grid.base(alpha=float(a), lambda_=float(l)) for l in lams)
    if not out:
        raise ValueError("tuning grid is empty")
    return out


# ---------------------------------------------------------------------------
# per-fold evaluation


def _fold_losses_components(train: Design, test: Design, configs, loss) -> np.ndarray:
    """Held-out loss sums for PCR/PLS configs, sharing work across m."""
    out = np.full(len(configs), np.inf)
    Xc, centers = center_columns(train.X)
    Xtest = test.X - centers
    by_c: dict[int, list[int]] = {}
    for i, cfg in enumerate(configs):
        by_c.setdefault(cfg.c, []).append(i)
    n = train.n
    q = train.T.shape[1]
    for c, members in by_c.items():
        method = configs[members[0]].method
        try:
            if method == "pcr":
                sel = select_by_variance(Xc, c)
                _, s, Vt = np.linalg.svd(Xc[:, sel], full_matrices=False)
                rank = _rank(s, (n, len(sel)))
                W = Vt[:min(rank, n - 1)].T
            else:
                sel = select_by_covariance(Xc, train.y, c)
                mmax = max(configs[i].m for i in members)
                W = None
                for mtry in range(min(mmax, n - 1), 0, -1):
                    try:
                        W = pls_components(Xc[:, sel], train.y, mtry)
                        break
                    except EstimationError:
                        continue
                if W is None:
                    continue
        except (EstimationError, np.linalg.LinAlgError):
            continue
        Ztr = Xc[:, sel] @ W
        Zte = Xtest[:, sel] @ W
        for i in members:
            m = configs[i].m
            if m > W.shape[1]:
                continue
            try:
                g = fit_glm(np.column_stack([train.T, Ztr[:, :m]]), train.y, train.family)
            except np.linalg.LinAlgError:
                continue
            coef = g.coefficients
            eta = test.T @ coef[:q] + Zte[:, :m] @ coef[q:]
            out[i] = _unit_loss(test.y, eta, test.family, loss).sum()
    return out


def _fold_losses_net(train: Design, test: Design, configs, loss) -> np.ndarray:
    out = np.full(len(configs), np.inf)
    Xc, centers = center_columns(train.X)
    Xtest = test.X - centers
    groups: dict[float, list[int]] = {}
    for i, cfg in enumerate(configs):
        groups.setdefault(cfg.alpha, []).append(i)
    for a, members in groups.items():
        lams = np.array([configs[i].lambda_ for i in members])
        order = np.argsort(-lams, kind="stable")
        try:
            path = net_path(train.y, train.T, Xc, train.family, a, lams[order])
        except (EstimationError, np.linalg.LinAlgError):
            continue
        etas = test.T @ path.deltas.T + Xtest @ path.betas.T
        for k, j in enumerate(order):
            out[members[j]] = _unit_loss(test.y, etas[:, k], test.family, loss).sum()
    return out


def _fold_losses_single(train: Design, test: Design, configs, loss) -> np.ndarray:
    out = np.full(len(configs), np.inf)
    for i, cfg in enumerate(configs):
        try:
            est = estimate(train, cfg)
        except (EstimationError, np.linalg.LinAlgError):
            continue
        eta = test.T @ est.delta + (test.X - est.centers) @ est.beta
        out[i] = _unit_loss(test.y, eta, test.family, loss).sum()
    return out


def fold_losses(design: Design, configs: list[EstimatorConfig], held: np.ndarray,
                loss: str) -> np.ndarray:
    """Loss sums on the held-out rows ``held`` for every config, trained on the rest."""
    train_rows = np.setdiff1d(np.arange(design.n), held)
    train, test = design.rows(train_rows), design.rows(held)
    methods = {c.method for c in configs}
    if len(methods) != 1:
        return _fold_losses_single(train, test, configs, loss)
    method = methods.pop()
    if method == "net":
        if any(c.lambda_ is None for c in configs):
            raise ValueError("net configs need explicit lambdas")
        return _fold_losses_net(train, test, configs, loss)
    return _fold_losses_components(train, test, configs, loss)


def _run_folds(design, configs, folds, loss, n_jobs):
    tasks = [held for rep in folds for held in rep]

    def one(held):
        with single_threaded():
            return fold_losses(design, configs, held, loss)

    if n_jobs == 1:
        with single_threaded():
            cols = [one(h) for h in tasks]
    else:
        cols = Parallel(n_jobs=n_jobs)(delayed(one)(h) for h in tasks)
    return np.column_stack(cols)  # (G, R*K), repetition-major


# ---------------------------------------------------------------------------
# results


@dataclass
class CVResult:
    grid: list[EstimatorConfig]
    scores: np.ndarray
    per_fold: np.ndarray
    best_index: int
    one_se_index: int | None
    cvconfig: CVConfig
    loss: str

    @property
    def best(self) -> EstimatorConfig:
        return self.grid[self.best_index]

    @property
    def best_score(self) -> float:
        return float(self.scores[self.best_index])

    @property
    def one_se(self) -> EstimatorConfig | None:
        return None if self.one_se_index is None else self.grid[self.one_se_index]

    def standard_errors(self) -> np.ndarray:
        pf = self.per_fold
        with np.errstate(invalid="ignore"):
            return np.std(pf, axis=1, ddof=1) / np.sqrt(pf.shape[1])

    def to_dict(self) -> dict:
        se = self.standard_errors()
        return {
            "schema": "waveir.cvresult/1",
            "cv": self.cvconfig.to_dict(),
            "loss": self.loss,
            "best_index": self.best_index,
            "one_se_index": self.one_se_index,
            "grid": [
                {"config": cfg.to_dict(), "score": _num(s), "se": _num(e),
                 "per_fold": [_num(v) for v in row]}
                for cfg, s, e, row in zip(self.grid, self.scores, se, self.per_fold)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "method", "domain", "c", "m", "alpha", "lambda",
                    "repetition", "fold", "loss_sum"])
        K = self.cvconfig.K
        for gi, (cfg, row) in enumerate(zip(self.grid, self.per_fold)):
            for j, v in enumerate(row):
                w.writerow([gi, cfg.method, cfg.domain, cfg.c, cfg.m, cfg.alpha,
                            repr(cfg.lambda_) if cfg.lambda_ is not None else None,
                            j // K, j % K, repr(float(v))])
        return buf.getvalue()


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


def _sparsity_key(cfg: EstimatorConfig):
    if cfg.method == "net":
        return (-cfg.lambda_, -cfg.alpha)
    return (cfg.c, cfg.m)


def _pick(grid, scores, per_fold):
    order = sorted(range(len(grid)), key=lambda i: (scores[i], _sparsity_key(grid[i])))
    best = order[0]
    one_se = None
    if grid[best].method == "net" and np.isfinite(scores[best]):
        se = np.std(per_fold[best], ddof=1) / np.sqrt(per_fold.shape[1])
        same = [i for i in range(len(grid)) if grid[i].alpha == grid[best].alpha
                and scores[i] <= scores[best] + se]
        one_se = max(same, key=lambda i: (grid[i].lambda_, -i))
    return best, one_se


def _resolve_folds(n, cvconfig, folds):
    if folds is None:
        return make_folds(n, cvconfig.K, cvconfig.R, cvconfig.seed)
    return [[np.asarray(f, dtype=np.int64) for f in rep] for rep in folds]


def cv_table(design: Design, configs: list[EstimatorConfig], cvconfig: CVConfig,
             folds=None, n_jobs: int = 1) -> CVResult:
    folds = _resolve_folds(design.n, cvconfig, folds)
    loss = cvconfig.resolved_loss(design.family)
    per_fold = _run_folds(design, configs, folds, loss, n_jobs)
    R = len(folds)
    scores = np.array([aggregate(row.reshape(R, -1), cvconfig.aggregate) for row in per_fold])
    best, one_se = _pick(configs, scores, per_fold)
    return CVResult(list(configs), scores, per_fold, best, one_se, cvconfig, loss)


def cv_score(data: Dataset | Design, config: EstimatorConfig, cvconfig: CVConfig,
             folds=None, n_jobs: int = 1) -> float:
    """Cross-validated loss of one configuration (``inf`` if any fold fails)."""
    design = data.design(config) if isinstance(data, Dataset) else data
    return float(cv_table(design, [config], cvconfig, folds, n_jobs).scores[0])


def tune(data: Dataset | Design, grid: GridSpec, cvconfig: CVConfig, folds=None,
         n_jobs: int = 1) -> CVResult:
    """Score every grid point by CV and pick the minimizer.

    Ties go to the sparser model: larger lambda (then larger alpha) for
    the net, smaller ``(c, m)`` for PCR/PLS.
    """
    if isinstance(data, Dataset):
        design = data.design(grid.base(**_dummy(grid.method)))
    else:
        design = data
    folds = _resolve_folds(design.n, cvconfig, folds)
    configs = expand_grid(design, grid, folds)
    return cv_table(design, configs, cvconfig, folds, n_jobs)


def _dummy(method: str) -> dict:
    return {"alpha": 1.0} if method == "net" else {"c": 1, "m": 1}
