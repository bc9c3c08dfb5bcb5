"""Acceptance suite: each criterion is checked at its stated tolerance.

Verdicts are collected by the ``criterion`` fixture and printed as one line
per criterion in the terminal summary. Criteria that cannot hold are still
asserted as stated, so they show up as failures.
"""

import math

import numpy as np
import pytest

from coxrs.cox import breslow, nelson_aalen, plik_gradient_hessian, partial_log_likelihood
from coxrs.debias import frailty_cumhaz_fixed_point
from coxrs.experiment import ExperimentConfig, checkpoint_times, run_experiment, s_histogram
from coxrs.special_math import lambert_w
from coxrs.survival import (
    CensoringSpec,
    HazardSpec,
    StepFunction,
    SurvivalDataset,
    expected_event_fraction,
    generate_dataset,
)

LL = HazardSpec.log_logistic()
UNIF4 = CensoringSpec.uniform(4.0)
REPLICATES = 100
RS_M = 100_000
ZETA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)

pytestmark = pytest.mark.acceptance


def _run(scenario, zeta, hazard="log_logistic", seed=0):
    cfg = ExperimentConfig(scenario=scenario, zeta=zeta, n=400, hazard=hazard, t_max=4.0, S=1.0,
                           replicates=REPLICATES, seed=seed, m=RS_M, damping=1.0,
                           max_sweeps=500)
    return run_experiment(cfg)


@pytest.fixture(scope="module")
def overlap_runs():
    return {h: _run("figure2_overlaps", ZETA_GRID, h, seed=101)
            for h in ("log_logistic", "weibull_like")}


@pytest.fixture(scope="module")
def cumhaz_run():
    return _run("figure1_cumhaz", (0.25, 0.5), seed=202)


@pytest.fixture(scope="module")
def debias_run():
    return _run("figure3_debias_cumhaz", (0.3, 0.4), seed=303)


# 1 ---------------------------------------------------------------------------------------

@pytest.mark.parametrize("hazard", ["log_logistic", "weibull_like"])
def test_criterion_1_rs_matches_simulation(overlap_runs, criterion, hazard):
    rep = overlap_runs[hazard]
    bad = []
    for z in ZETA_GRID:
        th = rep.theory[z]
        assert th["status"] == "ok", th
        for name, key in (("kappa_hat", "kappa"), ("v_hat", "v")):
            x = rep.column(z, name)
            se = x.std(ddof=1) / math.sqrt(x.size)
            dev = abs(x.mean() - th[key])
            if not dev <= 3 * se:
                bad.append(f"zeta={z} {name}: |{x.mean():.4f} - {th[key]:.4f}| = {dev / se:.2f} SE")
    ok = criterion(1, not bad, f"{hazard}: " + ("all within 3 SE" if not bad else ", ".join(bad)))
    assert ok, bad


# 2 ---------------------------------------------------------------------------------------

def test_criterion_2_event_fraction(criterion):
    quad = expected_event_fraction(1.0, LL, UNIF4)
    data = generate_dataset(100_000, 1, 1.0, LL, UNIF4, np.random.default_rng(2))
    sim = data.event_fraction
    se = math.sqrt(sim * (1 - sim) / data.n)
    ok = abs(quad - 0.60) <= 0.01 and abs(sim - 0.60) <= 0.01
    criterion(2, ok, f"quadrature {quad:.4f}, simulation {sim:.4f} (SE {se:.4f}); "
                     f"target 0.60 +- 0.01")
    assert ok


# 3 ---------------------------------------------------------------------------------------

@pytest.mark.parametrize("zeta", [0.25, 0.5])
def test_criterion_3_cumhaz_band(cumhaz_run, criterion, zeta):
    rep = cumhaz_run
    th = rep.theory[zeta]
    assert th["status"] == "ok", th
    stairs = [s for (z, _), s in rep.staircases.items() if z == zeta]
    pooled = np.concatenate([s["t"] for s in stairs])
    t = checkpoint_times(pooled, count=20)
    L = np.array([StepFunction(s["t"], s["breslow"])(t) for s in stairs])
    lo, hi = np.percentile(L, [5, 95], axis=0)
    rs = th["lambda_rs"](t)
    inside = (rs >= lo) & (rs <= hi)
    ok = criterion(3, inside.all(), f"zeta={zeta}: {inside.sum()}/20 checkpoints in band")
    assert ok, list(zip(t[~inside], rs[~inside], lo[~inside], hi[~inside]))


# 4 ---------------------------------------------------------------------------------------

@pytest.mark.parametrize("zeta", [0.3, 0.4])
def test_criterion_4_signal_strength(debias_run, criterion, zeta):
    S = debias_run.column(zeta, "S_star")
    centers, counts = s_histogram(S, width=0.1)
    modes = centers[counts == counts.max()]
    mode_ok = bool(np.any(np.isclose(modes, 1.0)))
    mean_ok = abs(S.mean() - 1) <= 0.1
    edge = int(np.sum(debias_run.column(zeta, "at_lower_edge")))
    ok = criterion(4, mode_ok and mean_ok,
                   f"zeta={zeta}: mode bin(s) {modes.tolist()}, mean S* {S.mean():.4f} "
                   f"(n={S.size}, {edge} at lower edge)")
    assert ok


# 5 ---------------------------------------------------------------------------------------

@pytest.mark.parametrize("zeta", [0.3, 0.4])
def test_criterion_5_associations(debias_run, criterion, zeta):
    rep = debias_run
    b1 = rep.column(zeta, "beta_tilde_1")
    b2 = rep.column(zeta, "beta_tilde_2")
    pred = rep.column(zeta, "predicted_sd").mean()
    band = 1.96 * pred / math.sqrt(b1.size)
    checks = {
        "mean b1": abs(b1.mean() - 1.0) <= band,
        "mean b2": abs(b2.mean()) <= band,
        "sd b1": abs(b1.std(ddof=1) / pred - 1) <= 0.25,
        "sd b2": abs(b2.std(ddof=1) / pred - 1) <= 0.25,
    }
    pooled_zero = math.sqrt(np.mean(rep.column(zeta, "zero_tilde_sd") ** 2))
    failed = [k for k, v in checks.items() if not v]
    ok = criterion(5, not failed,
                   f"zeta={zeta}: mean b1 {b1.mean():.4f}, mean b2 {b2.mean():.4f} "
                   f"(band +-{band:.4f}); sd b1 {b1.std(ddof=1):.4f}, sd b2 {b2.std(ddof=1):.4f}, "
                   f"pooled zero-component sd {pooled_zero:.4f} vs predicted {pred:.4f}"
                   + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


# 6 ---------------------------------------------------------------------------------------

@pytest.mark.parametrize("zeta", [0.3, 0.4])
def test_criterion_6_debiased_cumhaz(debias_run, criterion, zeta):
    rep = debias_run
    stairs = [s for (z, _), s in rep.staircases.items() if z == zeta and "tilde" in s]
    pooled = np.concatenate([s["t"] for s in stairs])
    t = checkpoint_times(pooled, count=20)
    L0 = LL.cumhaz(t)
    tilde = np.array([StepFunction(s["tilde_t"], s["tilde"])(t) for s in stairs])
    raw = np.array([StepFunction(s["t"], s["breslow"])(t) for s in stairs])
    err_tilde = np.mean(np.abs(tilde.mean(axis=0) / L0 - 1))
    err_raw = np.mean(np.abs(raw.mean(axis=0) / L0 - 1))
    # per-replicate reading, for the record
    per_rep = np.mean(np.abs(tilde / L0 - 1))
    ok = criterion(6, err_tilde <= 0.05 and err_tilde < err_raw,
                   f"zeta={zeta}: fixed point {100 * err_tilde:.2f}% vs Breslow "
                   f"{100 * err_raw:.2f}% (per-replicate mean |error| {100 * per_rep:.1f}%)")
    assert ok


# 7 ---------------------------------------------------------------------------------------

def test_criterion_7_second_moment_identity(overlap_runs, cumhaz_run, criterion):
    stated_bad, corrected_bad, ineq_bad, total = [], [], [], 0
    for rep in (*overlap_runs.values(), cumhaz_run):
        for z, th in rep.theory.items():
            if th["status"] != "ok":
                continue
            total += 1
            v, w, xi2 = th["v"], th["w"], th["mean_xi_squared"]
            tol = 3 / math.sqrt(rep.config.m)
            stated = (z - 1) * v * v + w * w
            if not abs(stated - xi2) <= tol * abs(xi2):
                stated_bad.append(f"{rep.config.hazard}/{z}: {stated:.3f} vs {xi2:.3f}")
            if not abs(th["second_moment"] - xi2) <= tol * abs(xi2):
                dev = th["second_moment"] / xi2 - 1
                corrected_bad.append(f"{rep.config.hazard}/{z} ({dev:+.4f})")
            if not w * w >= (1 - z) * v * v:
                ineq_bad.append(f"{rep.config.hazard}/{z}")
    ok = criterion(7, not stated_bad and not ineq_bad,
                   f"{total} solutions; stated identity off on {len(stated_bad)} "
                   f"(e.g. {stated_bad[0] if stated_bad else '-'}); "
                   f"w^2 + (1 - zeta) v^2 off on {len(corrected_bad)} "
                   f"{corrected_bad} at relative tolerance {tol:.4f}; "
                   f"inequality violated on {len(ineq_bad)}")
    assert ok


# 8 ---------------------------------------------------------------------------------------

def test_criterion_8_oracles(population_reseeds, criterion):
    rng = np.random.default_rng(8)
    notes = []

    x = np.exp(np.linspace(-30, 30, 2001))
    w = lambert_w(x)
    lw = float(np.max(np.abs(w * np.exp(w) - x) / x))
    notes.append(("Lambert W round trip", lw <= 1e-12, f"{lw:.1e}"))

    n, p = 25, 4
    data = SurvivalDataset(rng.exponential(size=n) + 0.01, rng.integers(0, 2, n) | (np.arange(n) == 0),
                           rng.normal(size=(n, p)))
    beta = 0.5 * rng.normal(size=p)
    g, H = plik_gradient_hessian(beta, data)
    h = 1e-5
    eye = np.eye(p)
    g_fd = np.array([(partial_log_likelihood(beta + h * e, data)
                      - partial_log_likelihood(beta - h * e, data)) / (2 * h) for e in eye])
    H_fd = np.array([(plik_gradient_hessian(beta + h * e, data)[0]
                      - plik_gradient_hessian(beta - h * e, data)[0]) / (2 * h) for e in eye])
    rel = max(np.max(np.abs(g - g_fd)) / np.max(np.abs(g)),
              np.max(np.abs(H - H_fd)) / np.max(np.abs(H)))
    notes.append(("derivatives vs finite differences", rel <= 1e-5, f"{rel:.1e}"))

    data = generate_dataset(300, 3, 1.0, LL, UNIF4, rng)
    na = nelson_aalen(data.times, data.events)
    b0 = breslow(data, np.zeros(3))
    exact_b = (np.array_equal(na.jump_times, b0.jump_times)
               and np.array_equal(na.cumulative_values, b0.cumulative_values))
    notes.append(("Breslow at beta=0 is Nelson-Aalen", exact_b, "exact" if exact_b else "differs"))
    fp = frailty_cumhaz_fixed_point(data, 0.0)
    exact_f = (np.array_equal(na.jump_times, fp.jump_times)
               and np.array_equal(na.cumulative_values, fp.cumulative_values))
    notes.append(("fixed point at S=0 is Nelson-Aalen", exact_f, "exact" if exact_f else "differs"))

    d = np.array([alt.w_star - ibp.w_star for ibp, alt in population_reseeds])
    se = d.std(ddof=1) / math.sqrt(d.size)
    notes.append(("w-update forms", abs(d.mean()) <= 3 * se,
                  f"mean difference {d.mean():+.4f} (SE {se:.4f}, 5 populations)"))

    ok = criterion(8, all(v for _, v, _ in notes),
                   ", ".join(f"{k}: {'ok' if v else 'FAILED'} ({s})" for k, v, s in notes))
    assert ok
