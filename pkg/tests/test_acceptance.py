"""Acceptance criteria 1 to 10.

Each test records one PASS/FAIL line through the ``verdict`` fixture;
the lines are repeated in the pytest terminal summary. Monte Carlo
runs write their per-replicate numbers to ``acceptance_results/``.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from waveir.dwt import ImageStack, WaveletSpec, dwt, dwt_stack, idwt, idwt_rows
from waveir.estimators import (
    Dataset,
    EstimatorConfig,
    center_columns,
    estimate_pcr,
    estimate_pls,
    fit,
    kkt_residuals,
    lambda_max,
    lambda_sequence,
    net_path,
    pls_components,
)
from waveir.glm import fit_glm
from waveir.inference import PermutationScheme, confounder_diagnostics, perm_test, pseudo_predictor_design
from waveir.modelsel import CVConfig, GridSpec, tune
from waveir.simulate import confounded_dataset, default_j0, simulate_dataset

from oracles import dense_pseudo_predictor, matrix_dwt


# ---------------------------------------------------------------------------
# 1. DWT correctness


def _random_shape(rng, i):
    d = 1 + i % 3
    if d == 1:
        top = 4096
    elif d == 2:
        top = 64
    else:
        top = 64 if i % 50 == 2 else 16
    sides = []
    for _ in range(d):
        if rng.random() < 0.5:
            sides.append(int(2 ** rng.integers(1, int(np.log2(top)) + 1)))
        else:
            sides.append(int(rng.integers(2, top + 1)))
    return tuple(sides)


def test_criterion_1_dwt_correctness(verdict):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst_pr = worst_parseval = 0.0
    for i in range(500):
        shape = _random_shape(rng, i)
        x = rng.standard_normal(shape) * rng.uniform(0.1, 100)
        J = min(int(np.ceil(np.log2(s))) for s in shape)
        spec = WaveletSpec(j0=int(rng.integers(0, J))) if rng.random() < 0.7 \
            else WaveletSpec.haar(j0=int(rng.integers(0, J)))
        w, layout = dwt_stack(x[None], spec)
        back = idwt_rows(w, layout)[0]
        nx = np.linalg.norm(x)
        worst_pr = max(worst_pr, np.linalg.norm(back - x) / nx)
        worst_parseval = max(worst_parseval, abs(np.sum(w * w) - nx * nx) / (nx * nx))

    # brute-force matrices for 16x16, sym10 and Haar, every admissible j0
    worst_oracle = 0.0
    for spec in [WaveletSpec(j0=j) for j in range(4)] + [WaveletSpec.haar(j0=j) for j in range(4)]:
        N = 256
        W = np.empty((N, N))
        for k in range(N):
            e = np.zeros(N)
            e[k] = 1.0
            W[:, k] = dwt(e.reshape(16, 16), spec).values
        x = rng.standard_normal((16, 16))
        got = dwt(x, spec).values
        worst_oracle = max(worst_oracle, np.max(np.abs(W @ x.ravel() - got)))
        ref = matrix_dwt(x, *spec.filters, spec.j0)
        worst_oracle = max(worst_oracle, np.max(np.abs(ref - got)))
        worst_oracle = max(worst_oracle, np.max(np.abs(W.T @ W - np.eye(N))))
        worst_oracle = max(worst_oracle, np.max(np.abs(idwt(dwt(x, spec)) - x)))
    elapsed = time.perf_counter() - start
    ok = worst_pr <= 1e-9 and worst_parseval <= 1e-9 and worst_oracle <= 1e-10 and elapsed < 60
    verdict(1, ok, f"reconstruction {worst_pr:.1e}, Parseval {worst_parseval:.1e}, "
                   f"matrix oracle {worst_oracle:.1e}, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 2. elastic-net optimality


def test_criterion_2_net_optimality(verdict):
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst_kkt = worst_delta_grad = worst_ols = 0.0
    unconverged = 0
    n, N = 60, 200
    for p in range(50):
        T = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
        X = rng.standard_normal((n, N)) @ np.diag(rng.uniform(0.5, 2.0, N))
        Xc, _ = center_columns(X)
        beta = np.zeros(N)
        beta[rng.choice(N, 5, replace=False)] = rng.normal(0, 1, 5)
        y = T @ rng.normal(0, 1, 3) + Xc @ beta + rng.standard_normal(n)
        alpha = (1.0, 0.5, 0.1)[p % 3]
        lmax = lambda_max(y, T, Xc, "gaussian", alpha)
        path = net_path(y, T, Xc, "gaussian", alpha, lambda_sequence(lmax, 30, 1e-3))
        unconverged += int(np.sum(~path.converged))
        for lam, d, b in zip(path.lambdas, path.deltas, path.betas):
            worst_kkt = max(worst_kkt, kkt_residuals(y, T, Xc, d, b, alpha, lam, "gaussian").max())
            grad_t = T.T @ (y - T @ d - Xc @ b) / n
            worst_delta_grad = max(worst_delta_grad, np.abs(grad_t).max())

        # lambda = 0 with a full-rank design against the unpenalized fit
        Xs = Xc[:, :30]
        zero = net_path(y, T, Xs, "gaussian", alpha, [lambda_max(y, T, Xs, "gaussian", alpha), 0.0])
        ols = fit_glm(np.column_stack([T, Xs]), y, "gaussian").coefficients
        got = np.concatenate([zero.deltas[-1], zero.betas[-1]])
        worst_ols = max(worst_ols, np.abs(got - ols).max())
    elapsed = time.perf_counter() - start
    ok = (worst_kkt <= 1e-6 and worst_delta_grad <= 1e-6 and worst_ols <= 1e-6
          and unconverged == 0 and elapsed < 120)
    verdict(2, ok, f"KKT {worst_kkt:.1e}, covariate gradient {worst_delta_grad:.1e}, "
                   f"lambda=0 vs GLM {worst_ols:.1e}, {unconverged} unconverged, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 3. PCR/PLS consistency


def test_criterion_3_pcr_pls_consistency(verdict):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst_fit = worst_orth = 0.0
    for p in range(50):
        n, N = int(rng.integers(40, 100)), int(rng.integers(5, 30))
        T = np.column_stack([np.ones(n), rng.standard_normal(n)])
        X = rng.standard_normal((n, N)) @ rng.standard_normal((N, N))
        y = T @ rng.normal(0, 1, 2) + X @ rng.normal(0, 1, N) + rng.standard_normal(n)
        Xc, _ = center_columns(X)
        rank = np.linalg.matrix_rank(Xc)
        ols = fit_glm(np.column_stack([T, Xc]), y, "gaussian").coefficients
        for est in (estimate_pcr(y, T, X, N, rank, "gaussian"),
                    estimate_pls(y, T, X, N, rank, "gaussian")):
            got = np.concatenate([est.delta, est.beta])
            worst_fit = max(worst_fit, np.abs(got - ols).max() / max(1.0, np.abs(ols).max()))
        R = pls_components(Xc, y, rank)
        S = R.T @ Xc.T @ Xc @ R
        worst_orth = max(worst_orth, np.abs(S - np.diag(np.diag(S))).max())
    elapsed = time.perf_counter() - start
    ok = worst_fit <= 1e-6 and worst_orth <= 1e-8 and elapsed < 120
    verdict(3, ok, f"vs least squares {worst_fit:.1e}, PLS score cross-products "
                   f"{worst_orth:.1e}, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 4. transform equivariance


def test_criterion_4_transform_equivariance(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    configs = [
        dict(method="net", alpha=0.5, lambda_=0.05),
        dict(method="net", alpha=1.0, lambda_=0.02),
        dict(method="pcr", c=40, m=5),
        dict(method="pls", c=40, m=3),
    ]
    for p in range(20):
        grid = ((16, 16), (12, 16), (64,), (8, 8, 8), (10, 10))[p % 5]
        n = 50
        images = rng.standard_normal((n,) + grid)
        family = "binomial" if p % 4 == 3 else "gaussian"
        score = images.reshape(n, -1)[:, :10].sum(axis=1)
        if family == "binomial":
            y = (rng.random(n) < 1 / (1 + np.exp(-score / 3))).astype(float)
        else:
            y = score + rng.standard_normal(n)
        T = np.column_stack([np.ones(n), rng.standard_normal(n)])
        data = Dataset(y, T, ImageStack(images), family)
        spec = WaveletSpec(j0=1)
        Xt, layout = dwt_stack(images, spec)
        pre = Dataset(y, T, ImageStack(Xt), family)
        kw = configs[p % 4]
        wf = fit(data, EstimatorConfig(domain="wavelet", wavelet=spec, **kw))
        vf = fit(pre, EstimatorConfig(domain="voxel", wavelet=spec, **kw))
        scale = max(1.0, np.abs(vf.beta_tilde).max())
        worst = max(worst, np.abs(wf.beta_tilde - vf.beta_tilde).max() / scale)
        worst = max(worst, np.abs(wf.delta - vf.delta).max() / max(1.0, np.abs(vf.delta).max()))
        # y = T delta + X beta with beta the inverse transform of beta_tilde
        image_side = images.reshape(n, -1) @ wf.beta_image.ravel()
        coef_side = Xt @ wf.beta_tilde
        worst = max(worst, np.abs(image_side - coef_side).max() / max(1.0, np.abs(coef_side).max()))
        worst = max(worst, np.abs(wf.linear_predictor(T, data.images)
                                  - vf.linear_predictor(T, pre.images)).max())
    ok = worst <= 1e-9
    verdict(4, ok, f"largest wavelet vs pre-transformed discrepancy {worst:.1e} on 20 problems")
    assert ok


# ---------------------------------------------------------------------------
# 5. simulation-study mirror


def test_criterion_5_simulation_mirror(verdict, artifacts):
    start = time.perf_counter()
    rows = []
    for rep in range(20):
        sim = simulate_dataset("beta1", 200, 32, "gaussian", 0.5, seed=rep)
        row = {"replicate": rep}
        for domain in ("wavelet", "voxel"):
            grid = GridSpec("net", domain, WaveletSpec(j0=default_j0((32, 32))),
                            alpha=(0.1, 0.4, 0.7, 1.0), nlambda=100)
            res = tune(sim.dataset, grid, CVConfig(K=5, R=1, seed=rep))
            f = fit(sim.dataset, res.best)
            mse = float(np.sum((f.beta_image - sim.beta) ** 2) / np.sum(sim.beta ** 2))
            tag = "wnet" if domain == "wavelet" else "vnet"
            row.update({f"{tag}_scaled_mse": mse, f"{tag}_alpha": res.best.alpha,
                        f"{tag}_lambda": res.best.lambda_, f"{tag}_support": int(f.support.size)})
        rows.append(row)
    with open(artifacts / "criterion5_scaled_mse.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    wmean = float(np.mean([r["wnet_scaled_mse"] for r in rows]))
    vmean = float(np.mean([r["vnet_scaled_mse"] for r in rows]))
    elapsed = time.perf_counter() - start
    ok = wmean <= vmean
    verdict(5, ok, f"mean scaled MSE WNet {wmean:.3f} vs VNet {vmean:.3f} over 20 replicates, "
                   f"{elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 6. permutation-test calibration

POWER_GRID = dict(alpha=(0.5, 1.0), nlambda=20)


def _power_grid() -> GridSpec:
    return GridSpec("net", "wavelet", WaveletSpec(j0=default_j0((16, 16))), **POWER_GRID)


def _rejections(r2, base_rate, reps, B, artifacts, name, seed_offset=0):
    rows = []
    for rep in range(reps):
        sim = simulate_dataset("block", 100, 16, "binomial", r2, base_rate, seed=seed_offset + rep)
        res = perm_test(sim.dataset, _power_grid(), CVConfig(K=5, R=1, seed=rep),
                        PermutationScheme("pseudo-predictor", B, seed=rep))
        rows.append({"replicate": rep, "r2": r2, "base_rate": base_rate, "B": B,
                     "observed": res.observed, "p_value": res.p_value})
    path = artifacts / f"{name}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return np.array([r["p_value"] for r in rows])


def _calibration(verdict, artifacts, reps, band, name):
    start = time.perf_counter()
    p = _rejections(0.0, 0.5, reps, 99, artifacts, name)
    rate = float(np.mean(p <= 0.05))
    elapsed = time.perf_counter() - start
    ok = band[0] <= rate <= band[1]
    verdict(6, ok, f"{name}: rejection rate {rate:.3f} over {reps} null data sets, band "
                   f"[{band[0]}, {band[1]}], {elapsed / 60:.1f} min")
    return ok


def test_criterion_6_calibration_smoke(verdict, artifacts):
    assert _calibration(verdict, artifacts, 50, (0.01, 0.14), "criterion6_smoke")


@pytest.mark.slow
def test_criterion_6_calibration_full(verdict, artifacts):
    assert _calibration(verdict, artifacts, 200, (0.022, 0.085), "criterion6_full")


# ---------------------------------------------------------------------------
# 7. power monotonicity


def _se(p, reps):
    return np.sqrt(p * (1 - p) / reps)


def test_criterion_7_power_monotone(verdict, artifacts):
    start = time.perf_counter()
    reps, B = 50, 19
    power = {}
    for base_rate, r2 in ((0.5, 0.1), (0.5, 0.2), (0.5, 0.3), (0.25, 0.2)):
        p = _rejections(r2, base_rate, reps, B, artifacts, f"criterion7_rate{base_rate}_r2{r2}")
        power[(base_rate, r2)] = float(np.mean(p <= 0.05))
    curve = [power[(0.5, r)] for r in (0.1, 0.2, 0.3)]
    checks = []
    for lo, hi in zip(curve, curve[1:]):
        checks.append(hi >= lo - max(_se(lo, reps), _se(hi, reps)))
    a, b = power[(0.5, 0.2)], power[(0.25, 0.2)]
    checks.append(a >= b - max(_se(a, reps), _se(b, reps)))
    elapsed = time.perf_counter() - start
    ok = all(checks)
    verdict(7, ok, f"power at R2 0.1/0.2/0.3 (rate 0.5): {curve[0]:.2f}/{curve[1]:.2f}/"
                   f"{curve[2]:.2f}; rate 0.25 at R2 0.2: {b:.2f}; B={B}, {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 8. pseudo-predictor identity


def test_criterion_8_pseudo_predictor(verdict):
    rng = np.random.default_rng(8)
    identity_exact = True
    worst = 0.0
    for p in range(100):
        n = int(rng.integers(5, 80))
        q = int(rng.integers(1, min(5, n - 1) + 1))
        N = int(rng.integers(1, 60))
        T = np.column_stack([np.ones(n), rng.standard_normal((n, q - 1))])
        X = rng.standard_normal((n, N)) * rng.uniform(0.1, 10)
        identity_exact &= np.array_equal(pseudo_predictor_design(T, X, np.arange(n)), X)
        perm = rng.permutation(n)
        got = pseudo_predictor_design(T, X, perm)
        ref = dense_pseudo_predictor(T, X, perm)
        worst = max(worst, np.abs(got - ref).max() / max(1.0, np.abs(X).max()))
    ok = identity_exact and worst <= 1e-10
    verdict(8, ok, f"identity bit-exact: {identity_exact}; dense oracle {worst:.1e} on 100 cases")
    assert ok


# ---------------------------------------------------------------------------
# 9. confounding detection


def _flags(seed, confounded):
    sim = confounded_dataset(seed=seed, confounded=confounded)
    images_only = sim.dataset.with_covariates(None)
    res = tune(images_only, _power_grid(), CVConfig(K=5, R=1, seed=seed))
    report = confounder_diagnostics(sim.dataset, fit(images_only, res.best))
    return report.flagged(threshold=0.3, alpha=0.05)


def test_criterion_9_confounding_detection(verdict):
    hits = sum("t" in _flags(s, True) for s in range(50))
    quiet = sum(not _flags(1000 + s, False) for s in range(50))
    ok = hits >= 45 and quiet >= 45
    verdict(9, ok, f"confounder flagged in {hits}/50 confounded seeds; nothing flagged in "
                   f"{quiet}/50 null seeds")
    assert ok


# ---------------------------------------------------------------------------
# 10. end-to-end determinism


def _cli() -> list[str]:
    exe = shutil.which("waveir")
    return [exe] if exe else [sys.executable, "-m", "waveir.cli"]


def _pipeline(root: Path, jobs: int) -> dict[str, bytes]:
    run = lambda *a: subprocess.run(_cli() + [str(v) for v in a], check=True,
                                    capture_output=True, text=True)
    bundle, cv, pt = root / "bundle", root / "cv", root / "perm"
    run("simulate", "--design", "block", "--n", 60, "--grid", 16, "--family", "binomial",
        "--r2", 0.3, "--seed", 7, "--out", bundle)
    model = ["--bundle", bundle, "--alpha", 0.5, 1.0, "--nlambda", 10, "--folds", 5,
             "--reps", 2, "--seed", 7, "--jobs", jobs]
    run("cv", *model, "--out", cv)
    run("permtest", *model, "--scheme", "pseudo", "--B", 9, "--out", pt)
    files = {}
    for d in (bundle, cv, pt):
        for f in sorted(d.iterdir()):
            files[f"{d.name}/{f.name}"] = f.read_bytes()
    return files


def test_criterion_10_end_to_end_determinism(verdict, tmp_path):
    first = _pipeline(tmp_path / "a", 1)
    second = _pipeline(tmp_path / "b", 1)
    parallel = _pipeline(tmp_path / "c", 2)
    json.loads(first["perm/permtest.json"])
    same = first == second == parallel
    differing = sorted(k for k in first if not (first[k] == second.get(k) == parallel.get(k)))
    verdict(10, same, f"{len(first)} artifacts compared over 2 serial runs and --jobs 2; "
                      f"differing: {differing or 'none'}")
    assert same
