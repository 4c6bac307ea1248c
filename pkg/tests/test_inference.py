import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp as sp_logsumexp
from scipy.stats import multivariate_normal

from unitsae.inference import (
    Block,
    DensityError,
    ModelDensity,
    ParamSpace,
    PosteriorDraws,
    SamplerError,
    Transform,
    diagnostics,
    ess,
    grad_check,
    hmc_sample,
    split_rhat,
)
from unitsae.inference import autodiff as ad
from unitsae.inference.density import normal_lpdf
from unitsae.inference.transforms import interval_log_jacobian


def fd_grad(f, x, h=1e-5):
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


UNARY = {
    "exp": (ad.exp, np.exp),
    "log": (ad.log, np.log),
    "log1p": (ad.log1p, np.log1p),
    "sqrt": (ad.sqrt, np.sqrt),
    "square": (ad.square, np.square),
    "sigmoid": (ad.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "log_sigmoid": (ad.log_sigmoid, lambda x: -np.logaddexp(0, -x)),
    "softplus": (ad.softplus, lambda x: np.logaddexp(0, x)),
    "tanh": (ad.tanh, np.tanh),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=20, deadline=None)
@given(xs=st.lists(st.floats(0.1, 3.0), min_size=1, max_size=5))
def test_unary_ops(name, xs):
    op, ref = UNARY[name]
    x = np.array(xs)
    assert np.allclose(ad._val(op(ad.Var(x))), ref(x))
    val, g = ad.value_and_grad(lambda v: ad.sum_(op(v) * np.arange(1.0, x.size + 1)), x)
    assert np.allclose(g, fd_grad(lambda z: np.sum(ref(z) * np.arange(1.0, x.size + 1)), x), rtol=1e-5, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_composite_expression(vals):
    x = np.array(vals)

    def f(v):
        a = ad.reshape(v, (2, 3))
        b = ad.matmul(ad.transpose(a), np.ones((2, 2)))
        c = ad.concat([ad.take(v, np.array([0, 0, 5])), v[1:3] * 2.0])
        return ad.sum_(b * b) / 7.0 + ad.logsumexp(c) - ad.sum_(v**2) / (1.0 + ad.square(v[2]))

    def fnum(v):
        a = v.reshape(2, 3)
        b = a.T @ np.ones((2, 2))
        c = np.concatenate([v[[0, 0, 5]], v[1:3] * 2.0])
        return np.sum(b * b) / 7.0 + sp_logsumexp(c) - np.sum(v**2) / (1.0 + v[2] ** 2)

    val, g = ad.value_and_grad(f, x)
    assert math.isclose(val, fnum(x), rel_tol=1e-12, abs_tol=1e-12)
    assert np.allclose(g, fd_grad(fnum, x), rtol=1e-6, atol=1e-6)


def test_broadcasting_gradient():
    x = np.array([0.5, -1.0])

    def f(v):
        M = np.ones((3, 2)) * np.array([[1.0], [2.0], [3.0]])
        return ad.sum_(M * v + v[0])

    _, g = ad.value_and_grad(f, x)
    assert np.allclose(g, fd_grad(lambda z: np.sum(np.array([[1.0], [2.0], [3.0]]) * z + z[0]), x))


def test_cholesky_gradient():
    rng = np.random.default_rng(0)
    B = rng.normal(size=(4, 4))
    S0 = B @ B.T + 4 * np.eye(4)
    R = rng.normal(size=(4, 4))

    def f_num(t):
        S = S0 + t[0] * np.eye(4) + t[1] * np.outer(np.arange(4.0), np.arange(4.0))
        return np.sum(np.linalg.cholesky(S) * R)

    def f(t):
        S = S0 + t[0] * np.eye(4) + t[1] * np.outer(np.arange(4.0), np.arange(4.0))
        return ad.sum_(ad.cholesky(S) * R)

    t = np.array([0.3, 0.1])
    val, g = ad.value_and_grad(f, t)
    assert math.isclose(val, f_num(t), rel_tol=1e-12)
    assert np.allclose(g, fd_grad(f_num, t), rtol=1e-6)


def test_gradient_accumulates_through_reuse():
    _, g = ad.value_and_grad(lambda v: ad.sum_(v * v * v), np.array([2.0]))
    assert np.allclose(g, [12.0])


# transforms ---------------------------------------------------------------
def space():
    return ParamSpace([
        Block("a", (2,)),
        Block("s", (), Transform.LOG),
        Block("r", (), Transform.INTERVAL, -1.0, 1.0),
        Block("p", (3,), Transform.SIMPLEX),
        Block("m", (2, 2)),
    ])


def test_space_layout():
    sp = space()
    assert sp.dim == 2 + 1 + 1 + 2 + 4
    assert sp.constrained_dim == 11
    assert sp.names()[:4] == ["a[0]", "a[1]", "s", "r"]
    assert "m[1,0]" in sp.names()
    with pytest.raises(ValueError):
        ParamSpace([Block("x"), Block("x")])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=10, max_size=10))
def test_constrain_round_trip(vals):
    sp = space()
    z = np.array(vals)
    c = sp.constrain(z)
    assert c["s"] > 0 and -1 < c["r"] < 1
    assert math.isclose(c["p"].sum(), 1.0) and np.all(c["p"] > 0)
    assert np.allclose(sp.unconstrain(c), z, atol=1e-8)
    assert np.allclose(sp.unflatten(sp.flatten(c))["m"], c["m"])


def test_log_jacobians_match_numeric_determinant():
    sp = ParamSpace([Block("s", (), Transform.LOG), Block("r", (), Transform.INTERVAL, 0.0, 5.0)])
    z = np.array([0.4, -0.7])
    _, lj = sp.constrain_var(ad.Var(z))
    expect = 0.4 + interval_log_jacobian(-0.7, 0.0, 5.0)
    assert math.isclose(float(ad._val(lj)), expect, rel_tol=1e-12)
    # interval Jacobian by differentiation of the map
    h = 1e-6
    dr = (sp.constrain(z + [0, h])["r"] - sp.constrain(z - [0, h])["r"]) / (2 * h)
    assert math.isclose(interval_log_jacobian(-0.7, 0.0, 5.0), math.log(dr), rel_tol=1e-7)


def test_simplex_density_is_uniform_under_flat_dirichlet():
    # a flat Dirichlet on the simplex pulled back with the log-Jacobian should
    # integrate the same as the uniform measure: check normalisation on K=2
    sp = ParamSpace([Block("p", (2,), Transform.SIMPLEX)])
    model = ModelDensity(sp, lambda p: 0.0 * ad.sum_(p["p"]))
    zs = np.linspace(-30, 30, 20001)
    dens = np.exp([model.log_density(np.array([z])) for z in zs])
    assert math.isclose(np.trapezoid(dens, zs), 1.0, rel_tol=1e-6)


# densities ------------------------------------------------------------------
def gaussian_model(mu, cov):
    L = np.linalg.cholesky(np.linalg.inv(cov))
    sp = ParamSpace([Block("x", (len(mu),))])
    return ModelDensity(sp, lambda p: -0.5 * ad.sum_(ad.square(ad.matmul(L.T, p["x"] - mu))))


def test_grad_check_and_density_error():
    model = gaussian_model(np.array([1.0, -2.0]), np.array([[1.0, 0.3], [0.3, 2.0]]))
    assert grad_check(model, np.array([0.1, 0.2])) < 1e-8
    sp = ParamSpace([Block("x")])
    bad = ModelDensity(sp, lambda p: ad.log(p["x"]))
    with pytest.raises(DensityError, match="x"):
        grad_check(bad, np.array([-1.0]))


def test_normal_lpdf_matches_scipy():
    x = np.array([0.3, -1.2, 2.0])
    got = float(ad._val(normal_lpdf(x, 0.5, 1.7)))
    assert math.isclose(got, multivariate_normal(np.full(3, 0.5), 1.7**2 * np.eye(3)).logpdf(x), rel_tol=1e-12)


# sampler ----------------------------------------------------------------------
def test_hmc_recovers_correlated_gaussian():
    mu = np.array([1.0, -2.0, 0.5])
    cov = np.array([[1.0, 0.6, 0.0], [0.6, 2.0, 0.3], [0.0, 0.3, 0.5]])
    draws = hmc_sample(gaussian_model(mu, cov), chains=4, warmup=500, iters=1000, seed=1)
    x = draws.draws
    for k in range(3):
        arr = draws.chain_array()[:, :, k]
        se = np.sqrt(cov[k, k] / ess(arr, rank_normalize=False))
        assert abs(x[:, k].mean() - mu[k]) < 4 * se
        assert split_rhat(arr) < 1.05
    assert np.allclose(np.cov(x.T), cov, atol=0.15)
    assert draws.divergences == 0
    assert all(0.6 < a < 0.97 for a in draws.accept_rates)


def test_hmc_reproducible():
    model = gaussian_model(np.zeros(2), np.eye(2))
    a = hmc_sample(model, chains=2, warmup=100, iters=50, seed=7)
    b = hmc_sample(model, chains=2, warmup=100, iters=50, seed=7)
    c = hmc_sample(model, chains=2, warmup=100, iters=50, seed=8)
    assert np.array_equal(a.draws, b.draws)
    assert not np.array_equal(a.draws, c.draws)


def test_hmc_constrained_scale():
    # Gamma(3, 2) on a log-transformed block
    sp = ParamSpace([Block("s", (), Transform.LOG)])
    model = ModelDensity(sp, lambda p: 2.0 * ad.log(p["s"]) - 2.0 * p["s"])
    d = hmc_sample(model, chains=2, warmup=400, iters=2000, seed=3)
    s = d.column("s")
    assert abs(s.mean() - 1.5) < 4 * math.sqrt(0.75 / ess(d.chain_array()[:, :, 0], rank_normalize=False))


def test_hmc_bad_density_raises():
    sp = ParamSpace([Block("x")])
    model = ModelDensity(sp, lambda p: ad.log(p["x"] - 1e9))
    with pytest.raises(SamplerError):
        hmc_sample(model, chains=1, warmup=10, iters=10, seed=0)
    with pytest.raises(ValueError):
        hmc_sample(gaussian_model(np.zeros(1), np.eye(1)), iters=0)


def test_draws_csv_round_trip(tmp_path):
    model = gaussian_model(np.zeros(2), np.eye(2))
    d = hmc_sample(model, chains=2, warmup=50, iters=20, seed=0)
    d.to_csv(tmp_path / "d.csv")
    back = PosteriorDraws.from_csv(tmp_path / "d.csv")
    assert back.names == d.names and np.array_equal(back.draws, d.draws)
    assert np.array_equal(back.chain_ids, d.chain_ids)
    assert back.block("x").shape == (40, 2)


# diagnostics ------------------------------------------------------------------
def test_rhat_and_ess_on_iid_draws():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 1000))
    assert abs(split_rhat(x) - 1.0) < 0.01
    assert 3000 < ess(x) < 5000


def test_rhat_flags_shifted_chains():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 500))
    x[0] += 2.0
    assert split_rhat(x) > 1.1


def test_ess_of_ar1_matches_theory():
    rng = np.random.default_rng(2)
    phi, n = 0.8, 20000
    x = np.zeros(n)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + rng.normal()
    expect = n * (1 - phi) / (1 + phi)
    assert abs(ess(x[None, :], rank_normalize=False) / expect - 1) < 0.15


def test_constant_draws():
    assert split_rhat(np.ones((2, 10))) == 1.0
    model = gaussian_model(np.zeros(1), np.eye(1))
    d = hmc_sample(model, chains=1, warmup=200, iters=20, seed=0)
    assert math.isnan(diagnostics(d)["x[0]"]["rhat"])
