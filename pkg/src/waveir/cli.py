"""Command-line interface: ``waveir <simulate|fit|cv|permtest|diagnose> ...``.

Every artifact carries a ``run`` record with the package version, the
subcommand, every resolved setting and the bundle digest, so a run can
be repeated from the artifact alone. The ``--jobs`` and ``--out``
values are left out of the record because they cannot change results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dwt import WaveletSpec
from .estimators import Dataset, EstimatorConfig, fit as fit_model
from .inference import PermutationScheme, confounder_diagnostics, perm_test
from .io import FormatError, bundle_digest, persist_fit, read_bundle, write_array, write_bundle
from .modelsel import CVConfig, GridSpec, tune
from .simulate import DESIGN_KINDS, simulate_dataset

DEFAULT_J0 = 4


class UsageError(Exception):
    pass


def _lambda_arg(text: str):
    if text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("lambda must be nonnegative")
    return v


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bundle", required=True, help="dataset bundle directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--method", choices=("pcr", "pls", "net"), default="net")
    p.add_argument("--domain", choices=("wavelet", "voxel"), default="wavelet")
    p.add_argument("--j0", type=int, default=None,
                   help=f"decomposition level (default {DEFAULT_J0}, or J-2 on grids too small for it)")
    p.add_argument("--c", type=int, nargs="+", help="screened coefficient count(s), pcr/pls")
    p.add_argument("--m", type=int, nargs="+", help="component count(s), pcr/pls")
    p.add_argument("--alpha", type=float, nargs="+", help="elastic-net mixing value(s)")
    p.add_argument("--lambda", dest="lambda_", type=_lambda_arg, nargs="+",
                   help="penalty value(s) or 'auto' for a data-driven grid")
    p.add_argument("--nlambda", type=int, default=100, help="size of an automatic lambda grid")
    p.add_argument("--folds", type=int, default=5, help="K")
    p.add_argument("--reps", type=int, default=5, help="R")
    p.add_argument("--cv-aggregate", choices=("mean", "median"), default="mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (results do not depend on it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="waveir", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"waveir {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic dataset bundle")
    s.add_argument("--design", choices=tuple(DESIGN_KINDS), default="beta1")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--family", choices=("gaussian", "binomial"), default="gaussian")
    s.add_argument("--r2", type=float, default=0.5)
    s.add_argument("--base-rate", type=float, default=0.5)
    s.add_argument("--covariate-r2", type=float, default=None)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    for name, text in (("fit", "fit one estimator (tuned by CV when values are left open)"),
                       ("cv", "cross-validate a tuning grid"),
                       ("permtest", "permutation test of the image effect"),
                       ("diagnose", "confounding diagnostics for the scalar covariates")):
        p = sub.add_parser(name, help=text)
        _model_flags(p)
        if name == "permtest":
            p.add_argument("--scheme", choices=("response", "pseudo"), default="pseudo")
            p.add_argument("--B", type=int, default=999)
    return parser


# ---------------------------------------------------------------------------
# argument resolution


def _resolve_j0(args, grid_shape) -> int:
    if args.j0 is not None:
        return args.j0
    from .dwt import next_pow2
    J = min(int(np.log2(next_pow2(g))) for g in grid_shape)
    return DEFAULT_J0 if DEFAULT_J0 < J else max(J - 2, 0)


def _check_combination(args) -> None:
    if args.method in ("pcr", "pls"):
        if args.alpha is not None or args.lambda_ is not None:
            raise UsageError(f"--alpha/--lambda do not apply to --method {args.method}")
        if not args.c or not args.m:
            raise UsageError(f"--method {args.method} needs --c and --m")
    else:
        if args.c is not None or args.m is not None:
            raise UsageError("--c/--m do not apply to --method net")
        if args.lambda_ and "auto" in args.lambda_ and len(args.lambda_) > 1:
            raise UsageError("--lambda auto cannot be combined with explicit values")
    if args.folds < 2 or args.reps < 1:
        raise UsageError("--folds must be at least 2 and --reps at least 1")
    if args.nlambda < 1:
        raise UsageError("--nlambda must be positive")
    if args.jobs == 0:
        raise UsageError("--jobs must be nonzero")


def _grid(args, spec: WaveletSpec) -> GridSpec:
    if args.method == "net":
        lams = None
        if args.lambda_ and args.lambda_ != ["auto"]:
            lams = tuple(float(v) for v in args.lambda_)
        kw = {"lambdas": lams, "nlambda": args.nlambda}
        if args.alpha:
            kw["alpha"] = tuple(args.alpha)
        return GridSpec("net", args.domain, spec, **kw)
    return GridSpec(args.method, args.domain, spec, c=tuple(args.c), m=tuple(args.m))


def _single_config(args, spec: WaveletSpec) -> EstimatorConfig | None:
    """The one configuration named by the flags, or None if CV must choose."""
    if args.method == "net":
        if (args.alpha and len(args.alpha) == 1 and args.lambda_ and len(args.lambda_) == 1
                and args.lambda_[0] != "auto"):
            return EstimatorConfig("net", args.domain, spec, alpha=args.alpha[0],
                                   lambda_=float(args.lambda_[0]))
        return None
    if len(args.c) == 1 and len(args.m) == 1:
        return EstimatorConfig(args.method, args.domain, spec, c=args.c[0], m=args.m[0])
    return None


def _run_record(args, spec: WaveletSpec, grid: GridSpec, cv: CVConfig, extra=None) -> dict:
    rec = {
        "waveir_version": __version__,
        "command": args.command,
        "bundle_sha256": bundle_digest(args.bundle),
        "seed": args.seed,
        "wavelet": spec.to_dict(),
        "grid": grid.to_dict(),
        "cv": cv.to_dict(),
    }
    if extra:
        rec.update(extra)
    return rec


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> None:
    if args.n < 2 or args.grid < 2:
        raise UsageError("--n and --grid must be at least 2")
    sim = simulate_dataset(args.design, args.n, args.grid, args.family, args.r2,
                           args.base_rate, args.seed, args.covariate_r2, args.sigma)
    truth = dict(sim.truth)
    truth["flags"] = {k: getattr(args, k) for k in
                      ("design", "n", "grid", "family", "r2", "base_rate", "covariate_r2",
                       "sigma", "seed")}
    truth["waveir_version"] = __version__
    truth["beta_file"] = "beta_true.arr"
    out = Path(args.out)
    write_bundle(out, sim.dataset, truth, extra_arrays={"beta_true.arr": sim.beta})


def _setup(args):
    _check_combination(args)
    data = read_bundle(args.bundle)
    spec = WaveletSpec(j0=_resolve_j0(args, data.images.grid_shape))
    cv = CVConfig(K=args.folds, R=args.reps, seed=args.seed, aggregate=args.cv_aggregate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return data, spec, cv, out


def _fit_best(data: Dataset, args, spec, cv):
    grid = _grid(args, spec)
    config = _single_config(args, spec)
    cvres = None
    if config is None:
        cvres = tune(data, grid, cv, n_jobs=args.jobs)
        config = cvres.best
    return fit_model(data, config), grid, cvres


def cmd_fit(args) -> None:
    data, spec, cv, out = _setup(args)
    fitted, grid, cvres = _fit_best(data, args, spec, cv)
    run = _run_record(args, spec, grid, cv, {
        "selected_by_cv": cvres is not None,
        "cv_score": None if cvres is None else cvres.best_score,
    })
    persist_fit(fitted, out / "fit.json", run)
    write_array(out / "beta.arr", fitted.beta_image)


def cmd_cv(args) -> None:
    data, spec, cv, out = _setup(args)
    grid = _grid(args, spec)
    res = tune(data, grid, cv, n_jobs=args.jobs)
    _dump(out / "cv.json", {"run": _run_record(args, spec, grid, cv), "result": res.to_dict()})
    (out / "cv.csv").write_text(res.to_csv())


def cmd_permtest(args) -> None:
    data, spec, cv, out = _setup(args)
    if args.B < 1:
        raise UsageError("--B must be at least 1")
    grid = _grid(args, spec)
    scheme = PermutationScheme(args.scheme, args.B, args.seed)
    res = perm_test(data, grid, cv, scheme, n_jobs=args.jobs)
    run = _run_record(args, spec, grid, cv, {"scheme": scheme.to_dict()})
    _dump(out / "permtest.json", {"run": run, "result": res.to_dict()})
    (out / "permtest.txt").write_text(res.summary())


def cmd_diagnose(args) -> None:
    data, spec, cv, out = _setup(args)
    if data.T.shape[1] < 2:
        raise UsageError("the bundle has no scalar covariates to diagnose")
    images_only = data.with_covariates(None)
    fitted, grid, cvres = _fit_best(images_only, args, spec, cv)
    report = confounder_diagnostics(data, fitted)
    run = _run_record(args, spec, grid, cv, {"image_fit": fitted.config.to_dict()})
    _dump(out / "diagnose.json", {"run": run, "result": report.to_dict()})
    (out / "diagnose.txt").write_text(report.table())


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "cv": cmd_cv,
            "permtest": cmd_permtest, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (FormatError, ValueError) as exc:
        print(f"waveir: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
