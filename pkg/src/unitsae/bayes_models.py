"""Log-density builders for the unit-level Bernoulli models.

Each builder returns an immutable :class:`~unitsae.inference.ModelDensity`.
Area random effects with a plain normal prior are written non-centred
(``u = sigma_u * z``), which removes the funnel that a few hundred units per
area would otherwise create for the sampler.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import null_space
from scipy.sparse.csgraph import connected_components

from .inference import Block, ModelDensity, ParamSpace, Transform
from .inference import autodiff as ad
from .inference.density import LOG_2PI, bernoulli_logit_terms, half_cauchy_lpdf, normal_lpdf

log = logging.getLogger(__name__)

GP_JITTER = 1e-8


class UnsupportedFamilyError(ValueError):
    pass


@dataclass(frozen=True)
class Priors:
    sigma2_beta: float = 10.0
    kappa_u: float = 5.0
    kappa_gamma: float = 5.0
    kappa_rho: float = 5.0
    kappa_tau: float = 5.0
    kappa_v: float = 5.0
    kappa_eps: float = 5.0

    @classmethod
    def from_dict(cls, d: dict) -> "Priors":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown prior settings: {sorted(unknown)}")
        out = cls(**{k: float(v) for k, v in d.items()})
        if any(v <= 0 for v in asdict(out).values()):
            raise ValueError("prior scales must be positive")
        return out

    @classmethod
    def from_json(cls, path) -> "Priors":
        return cls.from_dict(json.loads(Path(path).read_text()))


# graph helpers ---------------------------------------------------------------
def read_adjacency(path, n_areas: int) -> np.ndarray:
    """Symmetric 0/1 adjacency from an edge-list CSV with columns ``area_a, area_b``."""
    W = np.zeros((n_areas, n_areas))
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty adjacency file")
        for lineno, row in enumerate(reader, start=2):
            try:
                a, b = int(row[0]), int(row[1])
            except (IndexError, ValueError):
                raise ValueError(f"{path}:{lineno}: expected two integer area ids") from None
            if not (0 <= a < n_areas and 0 <= b < n_areas):
                raise ValueError(f"{path}:{lineno}: area id out of range 0..{n_areas - 1}")
            if a != b:
                W[a, b] = W[b, a] = 1.0
    return W


def write_adjacency(W, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["area_a", "area_b"])
        for a, b in zip(*np.nonzero(np.triu(W))):
            w.writerow([int(a), int(b)])


def _check_adjacency(W):
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.array_equal(W, W.T) or np.any(np.diag(W) != 0) or not np.all(np.isin(W, (0.0, 1.0))):
        raise ValueError("adjacency must be symmetric 0/1 with a zero diagonal")
    return W


def car_structure(W):
    """Neighbour counts ``d`` (islands set to 1) and the eigenvalues of
    ``D^-1/2 W D^-1/2`` so that ``log|D - a W| = sum log d + sum log(1 - a lam)``."""
    W = _check_adjacency(W)
    d = W.sum(axis=1)
    d = np.where(d > 0, d, 1.0)
    s = 1.0 / np.sqrt(d)
    lam = np.linalg.eigvalsh(s[:, None] * W * s[None, :])
    return d, lam


def car_eigenbasis(W):
    """``(d, lam, M)`` with ``M = D^-1/2 V`` for the eigenvectors ``V`` of
    ``D^-1/2 W D^-1/2``, so ``(D - alpha W)^-1 = M diag(1 / (1 - alpha lam)) M'``."""
    W = _check_adjacency(W)
    d = W.sum(axis=1)
    d = np.where(d > 0, d, 1.0)
    s = 1.0 / np.sqrt(d)
    lam, V = np.linalg.eigh(s[:, None] * W * s[None, :])
    return d, lam, s[:, None] * V


def car_noncentred(z, tau, alpha, M, lam):
    """``u = sqrt(tau) M diag((1 - alpha lam)^-1/2) z``; with ``z ~ N(0, I)``
    this gives ``u ~ N(0, tau (D - alpha W)^-1)``."""
    return ad.sqrt(tau) * (M @ (z / ad.sqrt(1.0 - alpha * lam)))


def car_lpdf(u, tau, alpha, W, d, lam):
    """Log-density of ``u ~ N(0, tau (D - alpha W)^-1)``."""
    m = d.size
    quad = ad.sum_(d * ad.square(u)) - alpha * (u @ (W @ u))
    logdet = float(np.sum(np.log(d))) + ad.sum_(ad.log1p(-alpha * lam))
    return -0.5 * m * LOG_2PI - 0.5 * m * ad.log(tau) + 0.5 * logdet - 0.5 * quad / tau


def icar_basis(W) -> np.ndarray:
    """Orthonormal basis of vectors summing to zero on every connected
    component (islands are pinned at zero)."""
    W = _check_adjacency(W)
    n_comp, labels = connected_components(W, directed=False)
    C = np.stack([(labels == c).astype(float) for c in range(n_comp)])
    return null_space(C)


def icar_quadratic(u, W) -> float:
    """``sum over neighbour pairs (u_i - u_j)^2``."""
    u = np.asarray(u, dtype=float)
    i, j = np.nonzero(np.triu(W))
    return float(np.sum((u[i] - u[j]) ** 2))


def icar_conditional_mean(u, W, i) -> float:
    nb = np.flatnonzero(np.asarray(W)[i])
    return float(np.mean(np.asarray(u)[nb]))


def se_kernel(x, gamma, rho, jitter=GP_JITTER) -> np.ndarray:
    """Squared-exponential Gram matrix ``gamma^2 (exp(-d^2 / 2 rho^2) + jitter I)``."""
    x = np.asarray(x, dtype=float)
    d2 = (x[:, None] - x[None, :]) ** 2
    return gamma**2 * (np.exp(-0.5 * d2 / rho**2) + jitter * np.eye(x.size))


def _warn_if_not_dummy(X):
    X = np.asarray(X)
    if not np.all(np.isin(X, (0.0, 1.0))):
        warnings.warn("design matrix has non-dummy columns; the N(0, 10) prior is calibrated for dummies",
                      UserWarning, stacklevel=3)


def _z_normal(z):
    return -0.5 * ad.sum_(ad.square(z)) - 0.5 * np.size(ad._val(z)) * LOG_2PI


# Model 1: Bernoulli pseudo-likelihood ----------------------------------------
@dataclass(frozen=True, eq=False)
class Model1Spec:
    X: np.ndarray
    y: np.ndarray
    area_ids: np.ndarray
    n_areas: int
    w_scaled: np.ndarray
    priors: Priors = field(default_factory=Priors)

    def __post_init__(self):
        n = len(self.y)
        if not math.isclose(float(np.sum(self.w_scaled)), n, rel_tol=0, abs_tol=1e-9 * max(1, n)):
            raise ValueError(f"scaled weights sum to {np.sum(self.w_scaled)}, expected the sample size {n}")


def model1_logdensity(spec: Model1Spec) -> ModelDensity:
    """``sum w_j [y log p + (1 - y) log(1 - p)]`` with ``logit p = x'beta + u_area``."""
    X = np.asarray(spec.X, dtype=float)
    _warn_if_not_dummy(X)
    y = np.asarray(spec.y, dtype=float)
    w = np.asarray(spec.w_scaled, dtype=float)
    area = np.asarray(spec.area_ids, dtype=int)
    pr = spec.priors
    space = ParamSpace([
        Block("beta", (X.shape[1],)),
        Block("z_u", (spec.n_areas,)),
        Block("sigma_u", (), Transform.LOG),
    ])
    sd_beta = math.sqrt(pr.sigma2_beta)

    def log_prob(p):
        u = p["sigma_u"] * p["z_u"]
        eta = X @ p["beta"] + ad.take(u, area)
        lik = ad.sum_(w * bernoulli_logit_terms(y, eta))
        return (lik + normal_lpdf(p["beta"], 0.0, sd_beta) + _z_normal(p["z_u"])
                + half_cauchy_lpdf(p["sigma_u"], pr.kappa_u))

    def derived(p):
        return {"u": p["sigma_u"] * p["z_u"]}

    return ModelDensity(space, log_prob, "model1: weighted Bernoulli pseudo-likelihood", derived)


def glmm_logdensity(X, y, area_ids, n_areas, priors: Priors = Priors()) -> ModelDensity:
    """Unweighted logistic GLMM written with centred area effects; used as an
    independent reference for the pseudo-likelihood with unit weights."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    area = np.asarray(area_ids, dtype=int)
    space = ParamSpace([
        Block("beta", (X.shape[1],)),
        Block("u", (n_areas,)),
        Block("sigma_u", (), Transform.LOG),
    ])

    def log_prob(p):
        eta = X @ p["beta"] + ad.take(p["u"], area)
        return (ad.sum_(bernoulli_logit_terms(y, eta)) + normal_lpdf(p["beta"], 0.0, math.sqrt(priors.sigma2_beta))
                + normal_lpdf(p["u"], 0.0, p["sigma_u"]) + half_cauchy_lpdf(p["sigma_u"], priors.kappa_u))

    return ModelDensity(space, log_prob, "logistic GLMM, centred")


# Model 2: GP on weights + CAR + iid area effects ------------------------------
@dataclass(frozen=True, eq=False)
class Model2Spec:
    y: np.ndarray
    area_ids: np.ndarray
    weights: np.ndarray  # unscaled
    W: np.ndarray
    priors: Priors = field(default_factory=Priors)

    @property
    def n_areas(self) -> int:
        return self.W.shape[0]

    def unique_weights(self):
        return np.unique(np.asarray(self.weights, dtype=float), return_inverse=True)


def model2_logdensity(spec: Model2Spec) -> ModelDensity:
    """``logit p = beta0 + f(w) + u_area + v_area`` with a squared-exponential
    GP ``f`` over the distinct sampled weights, proper CAR ``u`` and iid ``v``.

    ``f = gamma L_rho z`` with ``L_rho`` the Cholesky factor of the unit-scale
    kernel, so that ``Cov(f) = gamma^2 (exp(-d^2/2rho^2) + 1e-8 I)``.  The CAR
    effect is non-centred as well, through :func:`car_noncentred`.

    The intercept is sampled as ``level = beta0 + fbar + ebar``, where ``fbar``
    and ``ebar`` are the sample averages of ``f`` and ``u + v``.  The shear has
    unit Jacobian and leaves the model unchanged, but removes the trade-off
    between ``beta0`` and the level of ``f`` that otherwise forces tiny
    leapfrog steps.  ``beta0`` is reported as a derived quantity.
    """
    y = np.asarray(spec.y, dtype=float)
    area = np.asarray(spec.area_ids, dtype=int)
    wu, widx = spec.unique_weights()
    if wu.size < 1:
        raise ValueError("need at least one sampled weight")
    W = _check_adjacency(spec.W)
    _, lam, M = car_eigenbasis(W)
    m = W.shape[0]
    pr = spec.priors
    d2 = (wu[:, None] - wu[None, :]) ** 2
    eye = np.eye(wu.size)
    w_freq = np.bincount(widx, minlength=wu.size) / y.size
    a_freq = np.bincount(area, minlength=m) / y.size
    space = ParamSpace([
        Block("level", ()),
        Block("z_f", (wu.size,)),
        Block("gamma", (), Transform.LOG),
        Block("rho", (), Transform.LOG),
        Block("z_u", (m,)),
        Block("tau", (), Transform.LOG),
        Block("alpha", (), Transform.INTERVAL, -1.0, 1.0),
        Block("z_v", (m,)),
        Block("sigma_v", (), Transform.LOG),
    ])

    def gp_values(p):
        C = ad.exp(d2 * (-0.5 / ad.square(p["rho"]))) + GP_JITTER * eye
        try:
            L = ad.cholesky(C)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("GP kernel not positive definite after jitter; increase GP_JITTER") from None
        return p["gamma"] * (L @ p["z_f"])

    def log_prob(p):
        f = gp_values(p)
        v = p["sigma_v"] * p["z_v"]
        e = car_noncentred(p["z_u"], p["tau"], p["alpha"], M, lam) + v
        fbar = ad.sum_(w_freq * f)
        ebar = ad.sum_(a_freq * e)
        eta = p["level"] + ad.take(f - fbar, widx) + ad.take(e - ebar, area)
        lik = ad.sum_(bernoulli_logit_terms(y, eta))
        beta0 = p["level"] - fbar - ebar
        prior = (normal_lpdf(beta0, 0.0, math.sqrt(pr.sigma2_beta)) + _z_normal(p["z_f"]) + _z_normal(p["z_v"])
                 + _z_normal(p["z_u"])
                 + half_cauchy_lpdf(p["gamma"], pr.kappa_gamma) + half_cauchy_lpdf(p["rho"], pr.kappa_rho)
                 + half_cauchy_lpdf(p["tau"], pr.kappa_tau) + half_cauchy_lpdf(p["sigma_v"], pr.kappa_v)
                 - math.log(2.0))  # Unif(-1, 1) on alpha
        return lik + prior

    def derived(p):
        C = np.exp(-0.5 * d2 / p["rho"] ** 2) + GP_JITTER * eye
        f = p["gamma"] * np.linalg.cholesky(C) @ p["z_f"]
        u = np.sqrt(p["tau"]) * (M @ (p["z_u"] / np.sqrt(1.0 - p["alpha"] * lam)))
        v = p["sigma_v"] * p["z_v"]
        beta0 = p["level"] - w_freq @ f - a_freq @ (u + v)
        return {"beta0": beta0, "f": f, "u": u, "v": v, "weight_values": wu}

    return ModelDensity(space, log_prob, "model2: GP(weights) + CAR + iid", derived)


# Model 3: response model plus a model for the sampled weights ---------------
@dataclass(frozen=True, eq=False)
class Model3Spec:
    X: np.ndarray
    y: np.ndarray
    area_ids: np.ndarray
    n_areas: int
    weights: np.ndarray
    X_weight: np.ndarray | None = None
    mode: str = "a"
    family: str = "bernoulli"
    priors: Priors = field(default_factory=Priors)

    def __post_init__(self):
        if np.any(~(np.asarray(self.weights) > 0)):
            raise ValueError("weights must be positive")
        if self.mode not in ("a", "b"):
            raise ValueError("mode must be 'a' or 'b'")


def model3_logdensity(spec: Model3Spec) -> ModelDensity:
    """Mode ``a``: Bernoulli response for the sampled units plus
    ``log w ~ N(x'alpha + a y, s_eps^2)``.

    Mode ``b``: the joint sample density of ``(y, pi)`` implied by a population
    Bernoulli response and ``log pi ~ N(kappa y + x'alpha, s^2)``,
    ``phi(log pi) / [exp(x'alpha + s^2/2) (1 - p + p e^kappa)] * f_p(y)``
    (a density in ``pi``).  The coefficient block is named ``a`` in both modes.
    """
    if spec.family != "bernoulli":
        raise UnsupportedFamilyError(f"family {spec.family!r} is not supported; only 'bernoulli'")
    X = np.asarray(spec.X, dtype=float)
    Xw = X if spec.X_weight is None else np.asarray(spec.X_weight, dtype=float)
    y = np.asarray(spec.y, dtype=float)
    area = np.asarray(spec.area_ids, dtype=int)
    logw = np.log(np.asarray(spec.weights, dtype=float))
    pr = spec.priors
    sd = math.sqrt(pr.sigma2_beta)
    space = ParamSpace([
        Block("beta", (X.shape[1],)),
        Block("z_u", (spec.n_areas,)),
        Block("sigma_u", (), Transform.LOG),
        Block("alpha", (Xw.shape[1],)),
        Block("a", ()),
        Block("sigma_eps", (), Transform.LOG),
    ])

    def priors(p):
        return (normal_lpdf(p["beta"], 0.0, sd) + normal_lpdf(p["alpha"], 0.0, sd) + normal_lpdf(p["a"], 0.0, sd)
                + _z_normal(p["z_u"]) + half_cauchy_lpdf(p["sigma_u"], pr.kappa_u)
                + half_cauchy_lpdf(p["sigma_eps"], pr.kappa_eps))

    if spec.mode == "a":
        def log_prob(p):
            eta = X @ p["beta"] + ad.take(p["sigma_u"] * p["z_u"], area)
            resp = ad.sum_(bernoulli_logit_terms(y, eta))
            wmodel = normal_lpdf(logw, Xw @ p["alpha"] + p["a"] * y, p["sigma_eps"])
            return resp + wmodel + priors(p)
    else:
        logpi = -logw

        def log_prob(p):
            eta = X @ p["beta"] + ad.take(p["sigma_u"] * p["z_u"], area)
            t = Xw @ p["alpha"]
            s2 = ad.square(p["sigma_eps"])
            resp = ad.sum_(bernoulli_logit_terms(y, eta))
            pimodel = normal_lpdf(logpi, t + p["a"] * y, p["sigma_eps"])
            log_mgf = ad.softplus(eta + p["a"]) - ad.softplus(eta)
            norm = ad.sum_(t + 0.5 * s2 + log_mgf)
            return resp + pimodel - norm + priors(p)

    def derived(p):
        return {"u": p["sigma_u"] * p["z_u"]}

    return ModelDensity(space, log_prob, f"model3 mode {spec.mode}", derived)


def model3b_joint_density(y, pi, eta, t, kappa, sigma) -> float:
    """Joint sample density of one ``(y, pi)`` pair under mode ``b``."""
    p = 1.0 / (1.0 + math.exp(-eta))
    fy = p if y == 1 else 1.0 - p
    lp = math.log(pi)
    mu = kappa * y + t
    phi = math.exp(-0.5 * ((lp - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
    return phi / (math.exp(t + 0.5 * sigma**2) * (1 - p + p * math.exp(kappa))) * fy


def sample_to_population_bernoulli(p_s, E_w_given_y1, E_w_given_y0):
    """Success probability for nonsampled units from the sample probability
    and the sample means of the weights given ``y``:
    ``p_c = E(w - 1 | 1) p_s / [E(w - 1 | 1) p_s + E(w - 1 | 0) (1 - p_s)]``."""
    p_s = np.asarray(p_s, dtype=float)
    a1 = np.asarray(E_w_given_y1, dtype=float) - 1.0
    a0 = np.asarray(E_w_given_y0, dtype=float) - 1.0
    if np.any(a1 < -1e-12) or np.any(a0 < -1e-12):
        raise ValueError("expected weights must be at least 1")
    num = a1 * p_s
    den = num + a0 * (1.0 - p_s)
    if np.any(den <= 0):
        raise ValueError("no nonsampled mass: E(w - 1) is zero for both outcomes")
    return num / den


def sample_bernoulli_probability(p, pi1, pi0):
    """Probability that a sampled unit has ``y = 1`` when the population rate
    is ``p`` and inclusion probabilities are ``pi1`` / ``pi0`` by outcome."""
    p = np.asarray(p, dtype=float)
    return pi1 * p / (pi1 * p + pi0 * (1 - p))


def nonsampled_bernoulli_probability(p, pi1, pi0):
    p = np.asarray(p, dtype=float)
    return (1 - pi1) * p / ((1 - pi1) * p + (1 - pi0) * (1 - p))


def model3_expected_weights(alpha, a, sigma_eps, Xw):
    """``E_s(w | y, x) = exp(x'alpha + a y + s^2 / 2)`` for ``y = 1, 0``."""
    base = np.asarray(Xw) @ np.asarray(alpha) + 0.5 * sigma_eps**2
    return np.exp(base + a), np.exp(base)


# Area-level binomial model on effective counts ----------------------------
def effective_counts_logdensity(ystar, n_eff, X_area, structure="iid", W=None,
                                priors: Priors = Priors()) -> ModelDensity:
    """``y*_i | p_i`` with kernel ``y* log p + (n' - y*) log(1 - p)`` and
    ``logit p_i = x_i'beta + u_i``; ``u`` is iid normal, ICAR (sum to zero on
    each connected component) or proper CAR."""
    ystar = np.asarray(ystar, dtype=float)
    n_eff = np.asarray(n_eff, dtype=float)
    X = np.asarray(X_area, dtype=float)
    if np.any(ystar < 0) or np.any(ystar > n_eff + 1e-9):
        raise ValueError("need 0 <= y* <= n_eff")
    m = ystar.size
    blocks = [Block("beta", (X.shape[1],))]
    sd = math.sqrt(priors.sigma2_beta)
    if structure == "iid":
        blocks += [Block("z_u", (m,)), Block("sigma_u", (), Transform.LOG)]

        def effects(p):
            return p["sigma_u"] * p["z_u"], _z_normal(p["z_u"]) + half_cauchy_lpdf(p["sigma_u"], priors.kappa_u)
    elif structure == "icar":
        if W is None:
            raise ValueError("ICAR structure needs an adjacency matrix")
        B = icar_basis(W)
        Wc = _check_adjacency(W)
        Q = B.T @ (np.diag(Wc.sum(axis=1)) - Wc) @ B
        k = B.shape[1]
        blocks += [Block("z_u", (k,)), Block("sigma_u", (), Transform.LOG)]

        def effects(p):
            z = p["z_u"]
            lp = -0.5 * (z @ (Q @ z)) / ad.square(p["sigma_u"]) - k * ad.log(p["sigma_u"])
            return B @ z, lp + half_cauchy_lpdf(p["sigma_u"], priors.kappa_u)
    elif structure == "car":
        if W is None:
            raise ValueError("CAR structure needs an adjacency matrix")
        Wc = _check_adjacency(W)
        d, lam = car_structure(Wc)
        blocks += [Block("u", (m,)), Block("tau", (), Transform.LOG),
                   Block("alpha", (), Transform.INTERVAL, -1.0, 1.0)]

        def effects(p):
            lp = car_lpdf(p["u"], p["tau"], p["alpha"], Wc, d, lam) + half_cauchy_lpdf(p["tau"], priors.kappa_tau)
            return p["u"], lp - math.log(2.0)
    else:
        raise ValueError(f"unknown structure {structure!r}; choose iid, icar or car")
    space = ParamSpace(blocks)

    def log_prob(p):
        u, lp_u = effects(p)
        eta = X @ p["beta"] + u
        lik = ad.sum_(ystar * ad.log_sigmoid(eta) + (n_eff - ystar) * ad.log_sigmoid(-eta))
        return lik + lp_u + normal_lpdf(p["beta"], 0.0, sd)

    def derived(p):
        if structure == "iid":
            u = p["sigma_u"] * p["z_u"]
        elif structure == "icar":
            u = B @ p["z_u"]
        else:
            u = p["u"]
        eta = X @ p["beta"] + u
        return {"u_area": u, "p_area": 1.0 / (1.0 + np.exp(-eta))}

    return ModelDensity(space, log_prob, f"effective-counts binomial ({structure})", derived)
