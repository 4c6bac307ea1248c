"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the replicated
simulation (criterion 7) takes most of the time.
"""

import itertools
import math
import os
import time

import numpy as np
from scipy import stats
from scipy.linalg import block_diag

from unitsae import bayes_models as bm
from unitsae import classical, poststrat, sampling
from unitsae import simharness as H
from unitsae.inference import Block, ModelDensity, ParamSpace, ess, grad_check, hmc_sample, mcse_mean
from unitsae.inference import autodiff as ad
from unitsae.population import grid_adjacency


def criterion(n):
    def mark(fn):
        fn.criterion = n
        return fn
    return mark


# 1 ---------------------------------------------------------------------------
def enumerate_midzuno(sizes, n):
    p = sizes / sizes.sum()
    N = sizes.size
    pi = np.zeros(N)
    for first in range(N):
        rest = [j for j in range(N) if j != first]
        subsets = list(itertools.combinations(rest, n - 1))
        for sub in subsets:
            pi[[first, *sub]] += p[first] / len(subsets)
    return pi


@criterion(1)
def test_c01_midzuno_inclusion_matches_enumeration(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        N = int(rng.integers(2, 9))
        n = int(rng.integers(1, min(4, N) + 1))
        sizes = rng.uniform(0.05, 10.0, N)
        err = np.max(np.abs(sampling.midzuno_inclusion_probs(sizes, n) - enumerate_midzuno(sizes, n)))
        worst = max(worst, err)
    secs = time.perf_counter() - t0
    ok = worst <= 1e-12 and secs < 10
    verdict(1, "Midzuno inclusion probabilities vs enumeration", ok, f"max err {worst:.1e}, {secs:.2f}s")
    assert ok


# 2 ---------------------------------------------------------------------------
def gradient_fixtures():
    rng = np.random.default_rng(11)
    m, n = 6, 120
    area = np.repeat(np.arange(m), n // m)
    X = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.integers(0, 2, n)])
    y = rng.integers(0, 2, n).astype(float)
    w = rng.choice([1.5, 2.0, 3.0, 4.5, 6.0, 8.0, 11.0, 15.0, 20.0, 27.0], n)
    w_scaled = w * n / w.sum()
    W = grid_adjacency(m)
    n_eff = rng.uniform(5, 20, m)
    ystar = n_eff * rng.uniform(0.1, 0.9, m)
    n_cells = [np.array([4, 2, 1]), np.array([3, 5]), np.array([6, 1, 2, 2])]
    w_cells = [np.array([1.0, 3.0, 9.0]), np.array([2.0, 4.0]), np.array([1.0, 2.0, 5.0, 8.0])]
    Xa = np.column_stack([np.ones(m), rng.normal(size=m)])
    return {
        "model1": bm.model1_logdensity(bm.Model1Spec(X, y, area, m, w_scaled)),
        "glmm": bm.glmm_logdensity(X, y, area, m),
        "model2": bm.model2_logdensity(bm.Model2Spec(y, area, w, W)),
        "model3a": bm.model3_logdensity(bm.Model3Spec(X, y, area, m, w)),
        "model3b": bm.model3_logdensity(bm.Model3Spec(X, y, area, m, w, mode="b")),
        "eff-iid": bm.effective_counts_logdensity(ystar, n_eff, Xa, "iid"),
        "eff-icar": bm.effective_counts_logdensity(ystar, n_eff, Xa, "icar", W),
        "eff-car": bm.effective_counts_logdensity(ystar, n_eff, Xa, "car", W),
        "cell-sizes": poststrat.cell_size_logdensity(n_cells, w_cells),
    }


@criterion(2)
def test_c02_gradients_match_finite_differences(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = {}
    for name, model in gradient_fixtures().items():
        worst[name] = max(grad_check(model, rng.normal(size=model.dimension)) for _ in range(20))
    secs = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-6 and secs < 60
    verdict(2, f"gradient checks for {len(worst)} density builders", ok,
            f"worst {worst[top]:.1e} ({top}), {secs:.1f}s")
    assert ok


# 3 ---------------------------------------------------------------------------
def normal_model(data, prior_sd):
    data = np.asarray(data, dtype=float)
    space = ParamSpace([Block("theta", ())])

    def log_prob(p):
        lik = -0.5 * ad.sum_(ad.square(data - p["theta"]))
        return lik - 0.5 * ad.square(p["theta"] / prior_sd)

    return ModelDensity(space, log_prob, "normal mean, known unit variance")


def sd_mcse(chains):
    centred = (chains - chains.mean()) ** 2
    return mcse_mean(centred) / (2 * chains.std())


@criterion(3)
def test_c03_sampler_recovers_conjugate_normal(verdict):
    t0 = time.perf_counter()
    data = np.random.default_rng(3).normal(1.5, 1.0, 25)
    prior_sd = 2.0
    prec = data.size + 1 / prior_sd**2
    post_mean, post_sd = data.sum() / prec, 1 / math.sqrt(prec)
    post = hmc_sample(normal_model(data, prior_sd), chains=4, warmup=500, iters=2500, seed=8)
    x = post.chain_array()[:, :, 0]
    m_err = abs(x.mean() - post_mean) / mcse_mean(x)
    s_err = abs(x.std() - post_sd) / sd_mcse(x)
    # standard normal target, thinned to roughly independent draws for KS
    std = hmc_sample(normal_model([], 1.0), chains=4, warmup=500, iters=2500, seed=9)
    z = std.chain_array()[:, :, 0]
    thin = max(1, math.ceil(z.size / ess(z)))
    ks = stats.kstest(z[:, ::thin].ravel(), "norm")
    secs = time.perf_counter() - t0
    ok = m_err < 3 and s_err < 3 and ks.pvalue > 0.01 and secs < 60
    verdict(3, "HMC on conjugate normal target", ok,
            f"mean {m_err:.2f} MCSE, sd {s_err:.2f} MCSE, KS p={ks.pvalue:.3f}, {secs:.1f}s")
    assert ok


# 4 ---------------------------------------------------------------------------
def interval(draws):
    return np.quantile(draws, [0.025, 0.975], axis=0)


@criterion(4)
def test_c04_unit_weight_pseudo_likelihood_matches_glmm(verdict):
    t0 = time.perf_counter()
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        m, n = 10, 300
        area = rng.integers(0, m, n)
        X = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.integers(0, 2, n)])
        eta = X @ [-0.5, 0.8, -0.4] + rng.normal(0, 0.4, m)[area]
        y = (rng.uniform(size=n) < 1 / (1 + np.exp(-eta))).astype(float)
        pl = hmc_sample(bm.model1_logdensity(bm.Model1Spec(X, y, area, m, np.ones(n))), 2, 300, 300, seed=seed)
        gl = hmc_sample(bm.glmm_logdensity(X, y, area, m), 2, 300, 300, seed=seed + 50)
        a, b = interval(pl.block("beta")), interval(gl.block("beta"))
        hits += bool(np.all((a[0] <= b[1]) & (b[0] <= a[1])))
    secs = time.perf_counter() - t0
    ok = hits >= 19 and secs < 600
    verdict(4, "unit-weight pseudo-likelihood vs unweighted GLMM", ok, f"{hits}/20 seeds overlap, {secs:.0f}s")
    assert ok


# 5 ---------------------------------------------------------------------------
@criterion(5)
def test_c05_sample_and_complement_distributions(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(55)
    N = 100_000
    group = rng.integers(0, 3, N)
    p = np.array([0.2, 0.5, 0.7])
    pi1, pi0 = 0.08, 0.03  # inclusion probability by outcome
    y = rng.uniform(size=N) < p[group]
    sampled = rng.uniform(size=N) < np.where(y, pi1, pi0)
    worst = 0.0
    for g in range(3):
        for sel, closed in ((sampled, bm.sample_bernoulli_probability(p[g], pi1, pi0)),
                            (~sampled, bm.nonsampled_bernoulli_probability(p[g], pi1, pi0))):
            yy = y[sel & (group == g)]
            se = math.sqrt(closed * (1 - closed) / yy.size)
            worst = max(worst, abs(yy.mean() - closed) / se)
    secs = time.perf_counter() - t0
    ok = worst < 3 and secs < 60
    verdict(5, "sampled and nonsampled outcome distributions", ok, f"max dev {worst:.2f} MC SE, {secs:.2f}s")
    assert ok


# 6 ---------------------------------------------------------------------------
@criterion(6)
def test_c06_pseudo_eblup_benchmarks_to_greg(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        m = int(rng.integers(4, 12))
        n_i = rng.integers(3, 15, m)
        area = np.repeat(np.arange(m), n_i)
        n = area.size
        X = np.column_stack([np.ones(n), rng.normal(size=n), rng.integers(0, 2, n)])
        y = X @ [1.0, 0.5, -1.0] + rng.normal(0, 0.7, m)[area] + rng.normal(size=n)
        N = n_i * rng.integers(20, 200, m)
        w = rng.uniform(1, 10, n)
        w *= (N / np.bincount(area, w))[area]  # calibrated to the area sizes
        Xbar = np.column_stack([np.ones(m), rng.normal(size=m), rng.uniform(size=m)])
        fit = classical.fit_pseudo_eblup(y, X, w, area, Xbar)
        agg = np.sum(N * fit.theta_iw)
        greg = np.sum(N * fit.ybar_iw) + np.sum(N * ((Xbar - fit.xbar_iw) @ fit.beta_w))
        worst = max(worst, abs(agg - greg) / max(1.0, abs(greg)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-8 and secs < 30
    verdict(6, "pseudo-EBLUP aggregate equals the GREG total", ok, f"max rel diff {worst:.1e}, {secs:.2f}s")
    assert ok


# 7 ---------------------------------------------------------------------------
@criterion(7)
def test_c07_repeated_sampling_ordering(verdict, tmp_path):
    cfg = H.SimConfig(replicates=int(os.environ.get("UNITSAE_ACCEPT_REPLICATES", 50)))
    assert cfg.generator.m == 20 and sum(cfg.generator.sizes) == 20_000 and cfg.generator.c1 == 1.0
    assert cfg.n_sample == 1000
    t0 = time.perf_counter()
    rep = H.run(cfg)
    secs = time.perf_counter() - t0
    out = os.environ.get("UNITSAE_ACCEPT_OUT")
    H.report_write(rep, out or tmp_path)
    mse = {r["estimator"]: r["mse"] for r in rep.summary()}
    cov = {r["estimator"]: r["coverage"] for r in rep.summary()}
    for row in rep.summary():
        print(f"  {row['estimator']:<12} mse {row['mse']:.5f} coverage {row['coverage']:.3f} "
              f"mean time {rep.mean_seconds(row['estimator']):.1f}s")
    checks = {
        "a": all(mse[k] <= 0.8 * mse["HT"] for k in H.MODEL_BASED),
        "b": mse["Model3"] <= mse["Model1"],
        "c": cov["UW"] < cov["HT"] and 0.85 <= cov["Model3"] <= 0.99,
        "d": rep.mean_seconds("Model1") < rep.mean_seconds("Model2"),
        "time": secs < 2 * 3600,
    }
    ok = all(checks.values()) and cfg.replicates == 50
    ratios = ", ".join(f"{k} {mse[k] / mse['HT']:.2f}" for k in H.MODEL_BASED)
    verdict(7, f"estimator ordering over {cfg.replicates} replicates", ok,
            f"MSE/HT: {ratios}; cov UW {cov['UW']:.2f} HT {cov['HT']:.2f} M3 {cov['Model3']:.2f}; "
            f"failed parts {[k for k, v in checks.items() if not v] or 'none'}; {secs / 60:.0f} min")
    assert ok


# 8 ---------------------------------------------------------------------------
@criterion(8)
def test_c08_state_aggregate_identity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    N_i = rng.integers(50, 2000, 20)
    totals = rng.binomial(N_i, rng.uniform(0.1, 0.9, 20), size=(1000, 20))
    area_draws = totals / N_i
    state = poststrat.state_draws(area_draws, N_i)
    worst = float(np.max(np.abs(state - totals.sum(axis=1) / N_i.sum())))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-15 and secs < 5
    verdict(8, "state draw equals population-weighted area draws", ok, f"max diff {worst:.1e}, {secs:.3f}s")
    assert ok


# 9 ---------------------------------------------------------------------------
@criterion(9)
def test_c09_blup_matches_dense_gls(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(900 + seed)
        m = int(rng.integers(3, 8))
        n_i = rng.integers(2, 9, m)
        area = np.repeat(np.arange(m), n_i)
        n = area.size
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = X @ [2.0, 1.0] + rng.normal(0, 0.8, m)[area] + rng.normal(size=n)
        s2v, s2e = rng.uniform(0.2, 2.0, 2)
        fit = classical.fit_ner(y, X, area, sigma2_v=s2v, sigma2_e=s2e)
        N = n_i + rng.integers(5, 50, m)
        Xbar = np.column_stack([np.ones(m), rng.normal(size=m)])
        V = block_diag(*[s2e * np.eye(k) + s2v * np.ones((k, k)) for k in n_i])
        Vi = np.linalg.inv(V)
        beta = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ y)
        v = s2v * np.eye(m)[area].T @ Vi @ (y - X @ beta)
        expect = np.empty(m)
        for i in range(m):
            sel = area == i
            xr = (N[i] * Xbar[i] - X[sel].sum(0)) / (N[i] - n_i[i])
            expect[i] = (y[sel].sum() + (N[i] - n_i[i]) * (xr @ beta + v[i])) / N[i]
        worst = max(worst, np.max(np.abs(classical.blup_area_means(fit, Xbar, N) - expect)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-10 and secs < 5
    verdict(9, "BLUP area means vs dense GLS", ok, f"max diff {worst:.1e}, {secs:.2f}s")
    assert ok


# 10 --------------------------------------------------------------------------
@criterion(10)
def test_c10_two_cell_size_posterior_vs_quadrature(verdict):
    t0 = time.perf_counter()
    n, w, N = np.array([8, 2]), np.array([1.0, 4.0]), 100
    phi = np.linspace(0, 1, 200_001)[1:-1]
    logd = (n[0] * np.log(phi) + n[1] * np.log1p(-phi)
            - n.sum() * np.log(phi / w[0] + (1 - phi) / w[1]))
    dens = np.exp(logd - logd.max())
    expect = N * np.trapezoid(phi * dens, phi) / np.trapezoid(dens, phi)
    sizes = poststrat.multinomial_cell_sizes([n], [w], [N], 4000, chains=4, warmup=500, seed=10)
    got = sizes[0][:, 0].mean()
    rel = abs(got / expect - 1)
    secs = time.perf_counter() - t0
    ok = rel < 0.02 and secs < 30
    verdict(10, "two-cell size posterior mean vs grid quadrature", ok,
            f"{got:.2f} vs {expect:.2f} ({100 * rel:.2f}%), {secs:.1f}s")
    assert ok
