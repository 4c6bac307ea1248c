"""Frequentist small-area predictors under the nested error regression model

    y_ij = x_ij' beta + v_i + e_ij,   v_i ~ N(0, s2v),  e_ij ~ N(0, s2e),

together with survey-weighted and informative-sampling variants.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np


class RankError(ValueError):
    pass


def _area_stats(y, X, area_ids, n_areas, w=None):
    area_ids = np.asarray(area_ids, dtype=int)
    m = int(area_ids.max()) + 1 if n_areas is None else n_areas
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    n = np.bincount(area_ids, minlength=m).astype(float)
    sw = np.bincount(area_ids, w, m)
    safe = np.where(sw > 0, sw, 1.0)
    ybar = np.bincount(area_ids, w * y, m) / safe
    xbar = np.stack([np.bincount(area_ids, w * X[:, k], m) for k in range(X.shape[1])], axis=1) / safe[:, None]
    return area_ids, m, n, ybar, xbar


def check_rank(X, names=None) -> None:
    """Raise :class:`RankError` naming the columns that are linear
    combinations of earlier ones."""
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    if np.linalg.matrix_rank(X) == p:
        return
    bad = []
    keep = []
    for k in range(p):
        trial = keep + [k]
        if np.linalg.matrix_rank(X[:, trial]) < len(trial):
            bad.append(k if names is None else names[k])
        else:
            keep.append(k)
    raise RankError(f"design matrix is rank deficient; collinear columns: {bad}")


@dataclass
class NerFit:
    beta: np.ndarray
    sigma2_v: float
    sigma2_e: float
    gamma_i: np.ndarray
    vtilde_i: np.ndarray
    n_i: np.ndarray
    ybar_i: np.ndarray
    xbar_i: np.ndarray

    def to_json(self) -> str:
        return json.dumps({k: np.asarray(v).tolist() for k, v in asdict(self).items()})


def henderson_components(y, X, area_ids, n_areas=None):
    """Fitting-of-constants moment estimators ``(s2v, s2e)``.

    ``s2e`` comes from the within-area regression; ``s2v`` from the OLS
    residual sum of squares.  A negative ``s2v`` is truncated at zero with a
    warning.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    area_ids, m, n_i, ybar, xbar = _area_stats(y, X, area_ids, n_areas)
    n, p = X.shape
    sampled = n_i > 0
    yc = y - ybar[area_ids]
    Xc = X - xbar[area_ids]
    coef, *_ = np.linalg.lstsq(Xc, yc, rcond=None)
    rank_w = np.linalg.matrix_rank(Xc) if n > 0 else 0
    df_e = n - int(sampled.sum()) - rank_w
    if df_e <= 0:
        raise ValueError("not enough within-area degrees of freedom to estimate the unit variance")
    s2e = float(np.sum((yc - Xc @ coef) ** 2) / df_e)
    XtX_inv = np.linalg.inv(X.T @ X)
    b_ols = XtX_inv @ (X.T @ y)
    sse = float(np.sum((y - X @ b_ols) ** 2))
    nx = n_i[:, None] * xbar
    n_star = n - np.trace(XtX_inv @ (nx.T @ nx))
    s2v = (sse - (n - p) * s2e) / n_star
    if s2v < 0:
        warnings.warn(f"moment estimate of the area variance is negative ({s2v:.4g}); truncated at 0",
                      RuntimeWarning, stacklevel=2)
        s2v = 0.0
    return float(s2v), s2e


def fit_ner(y, X, area_ids, n_areas=None, sigma2_v=None, sigma2_e=None) -> NerFit:
    """GLS fit of the nested error model.

    Variance components are estimated by :func:`henderson_components` unless
    both are supplied.  With ``V_i = s2e I + s2v J``, the GLS normal
    equations only need area sums and means.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    check_rank(X)
    if sigma2_v is None or sigma2_e is None:
        s2v, s2e = henderson_components(y, X, area_ids, n_areas)
        sigma2_v = s2v if sigma2_v is None else sigma2_v
        sigma2_e = s2e if sigma2_e is None else sigma2_e
    if sigma2_e <= 0 or sigma2_v < 0:
        raise ValueError("need sigma2_e > 0 and sigma2_v >= 0")
    area_ids, m, n_i, ybar, xbar = _area_stats(y, X, area_ids, n_areas)
    gamma = np.where(n_i > 0, sigma2_v / (sigma2_v + sigma2_e / np.maximum(n_i, 1)), 0.0)
    gn = gamma * n_i
    A = X.T @ X - (xbar * gn[:, None]).T @ xbar
    b = X.T @ y - (xbar * gn[:, None]).T @ ybar
    beta = np.linalg.solve(A, b)
    vt = gamma * (ybar - xbar @ beta)
    return NerFit(beta, float(sigma2_v), float(sigma2_e), gamma, vt, n_i, ybar, xbar)


def blup_area_means(fit: NerFit, Xbar_pop, N_i) -> np.ndarray:
    """``N_i^-1 [n_i ybar_i + (N_i Xbar_i - n_i xbar_i)' beta + (N_i - n_i) v_i]``.

    ``Xbar_pop`` holds population covariate means per area, including any
    extra columns (e.g. functions of the inclusion probabilities) that were
    part of the fitted design matrix.
    """
    if Xbar_pop is None:
        raise ValueError("population covariate means are required")
    Xbar_pop = np.asarray(Xbar_pop, dtype=float)
    N_i = np.asarray(N_i, dtype=float)
    if Xbar_pop.shape != fit.xbar_i.shape:
        raise ValueError(f"population means have shape {Xbar_pop.shape}, expected {fit.xbar_i.shape}")
    if np.any(~np.isfinite(Xbar_pop)):
        raise ValueError("population covariate means contain missing values")
    n = fit.n_i
    lin = (N_i[:, None] * Xbar_pop - n[:, None] * fit.xbar_i) @ fit.beta
    return (n * fit.ybar_i + lin + (N_i - n) * fit.vtilde_i) / N_i


def ner_mse_leading(fit: NerFit, N_i) -> np.ndarray:
    """Leading term of the prediction MSE of :func:`blup_area_means`.

    The sampled fraction is known, so only the nonsampled mean is predicted:
    ``(1 - f)^2 (g1 + s2e / (N - n))`` with ``g1 = gamma s2e / n`` (``s2v``
    for unsampled areas).
    """
    N_i = np.asarray(N_i, dtype=float)
    n = fit.n_i
    g1 = np.where(n > 0, fit.gamma_i * fit.sigma2_e / np.maximum(n, 1), fit.sigma2_v)
    rest = np.maximum(N_i - n, 1.0)
    return (1 - n / N_i) ** 2 * (g1 + fit.sigma2_e / rest)


@dataclass
class PseudoEblupFit:
    beta_w: np.ndarray
    sigma2_v: float
    sigma2_e: float
    gamma_iw: np.ndarray
    delta2_i: np.ndarray
    ybar_iw: np.ndarray
    xbar_iw: np.ndarray
    theta_iw: np.ndarray
    iterations: int = 1

    def to_json(self) -> str:
        return json.dumps({k: np.asarray(v).tolist() for k, v in asdict(self).items()})


def fit_pseudo_eblup(y, X, w, area_ids, Xbar_pop, n_areas=None, ner: NerFit | None = None,
                     tol: float = 1e-10, max_iter: int = 50) -> PseudoEblupFit:
    """Survey-weighted pseudo-EBLUP.

    ``beta_w`` solves
    ``sum_ij w_ij x_ij {y_ij - x_ij'b - gamma_iw (ybar_iw - xbar_iw'b)} = 0``
    with ``gamma_iw = s2v / (s2v + s2e delta2_i)`` and
    ``delta2_i = sum_j (w_ij / sum_j w_ij)^2``.  Because ``gamma_iw`` does not
    depend on ``b`` the fixed-point iteration converges after one linear
    solve; the loop only confirms it.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(~(w > 0)):
        raise ValueError("weights must be positive")
    if ner is None:
        ner = fit_ner(y, X, area_ids, n_areas)
    area_ids, m, n_i, ybar_w, xbar_w = _area_stats(y, X, area_ids, ner.n_i.size if n_areas is None else n_areas, w)
    sw = np.bincount(area_ids, w, m)
    delta2 = np.where(sw > 0, np.bincount(area_ids, w * w, m) / np.where(sw > 0, sw, 1.0) ** 2, np.inf)
    denom = ner.sigma2_v + ner.sigma2_e * delta2
    gamma = np.where(n_i > 0, ner.sigma2_v / np.where(denom > 0, denom, 1.0), 0.0)
    g = gamma[area_ids]
    Xw = X * w[:, None]
    beta = np.zeros(X.shape[1])
    it = 0
    for it in range(1, max_iter + 1):
        A = Xw.T @ (X - g[:, None] * xbar_w[area_ids])
        b = Xw.T @ (y - g * ybar_w[area_ids])
        try:
            new = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"pseudo-EBLUP estimating equations are singular: {exc}") from None
        done = np.max(np.abs(new - beta)) <= tol * max(1.0, np.max(np.abs(new)))
        beta = new
        if done:
            break
    Xbar_pop = np.asarray(Xbar_pop, dtype=float)
    theta = gamma * ybar_w + np.einsum("ik,k->i", Xbar_pop - gamma[:, None] * xbar_w, beta)
    return PseudoEblupFit(beta, ner.sigma2_v, ner.sigma2_e, gamma, delta2, ybar_w, xbar_w, theta, it)


def pseudo_eblup_mse_leading(fit: PseudoEblupFit) -> np.ndarray:
    """``g1 = gamma_iw s2e delta2_i``; ``s2v`` where an area has no sample."""
    return np.where(np.isfinite(fit.delta2_i), fit.gamma_iw * fit.sigma2_e * np.where(
        np.isfinite(fit.delta2_i), fit.delta2_i, 0.0), fit.sigma2_v)


def guadarrama_predict(beta, gamma_iw, x_ij, ybar_iw, xbar_iw):
    """Conditional mean of a unit given its area's weighted mean:
    ``x'beta + gamma_iw (ybar_iw - xbar_iw'beta)``."""
    beta = np.asarray(beta, dtype=float)
    return np.asarray(x_ij) @ beta + gamma_iw * (ybar_iw - np.asarray(xbar_iw) @ beta)


def weight_model_b(w, y, X) -> float:
    """Coefficient of ``y`` in the OLS regression of ``log w`` on ``y`` and ``X``."""
    Z = np.column_stack([np.asarray(y, dtype=float), np.asarray(X, dtype=float)])
    coef, *_ = np.linalg.lstsq(Z, np.log(np.asarray(w, dtype=float)), rcond=None)
    return float(coef[0])


def pfeffermann_corrected_mean(fit: NerFit, b: float, Xbar_pop, N_i) -> np.ndarray:
    """Informative-sampling corrected area mean
    ``N^-1 [(N - n) theta + n {ybar + (Xbar - xbar)'beta} + (N - n) b s2e]``
    with ``theta = Xbar'beta + v_i``."""
    Xbar_pop = np.asarray(Xbar_pop, dtype=float)
    N_i = np.asarray(N_i, dtype=float)
    n = fit.n_i
    theta = Xbar_pop @ fit.beta + fit.vtilde_i
    samp = np.where(n > 0, fit.ybar_i + (Xbar_pop - fit.xbar_i) @ fit.beta, 0.0)
    return ((N_i - n) * theta + n * samp + (N_i - n) * b * fit.sigma2_e) / N_i


def malec_adjusted_loglik(m, n, p, wbar1, wbar0) -> float:
    """``sum[m log p + (n - m) log(1 - p) - n log(p / wbar1 + (1 - p) / wbar0)]``."""
    m, n, p, wbar1, wbar0 = (np.asarray(a, dtype=float) for a in (m, n, p, wbar1, wbar0))
    if np.any(~((p > 0) & (p < 1))):
        raise ValueError("p must lie strictly inside (0, 1)")
    return float(np.sum(m * np.log(p) + (n - m) * np.log1p(-p) - n * np.log(p / wbar1 + (1 - p) / wbar0)))


def bayes_pseudo_empirical(y, w, alpha_prior=0.0, draws=1000, rng=None) -> np.ndarray:
    """Posterior draws of the mean under the Bayesian pseudo-empirical
    likelihood: weights are rescaled to sum to ``n``, ``p ~ Dirichlet(w + alpha)``
    and each draw is ``sum_j p_j y_j``."""
    rng = np.random.default_rng(rng)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    w = w * (y.size / w.sum())
    a = w + alpha_prior
    if np.any(a <= 0):
        raise ValueError("Dirichlet parameters w + alpha must be positive")
    g = rng.standard_gamma(a, size=(draws, a.size))
    p = g / g.sum(axis=1, keepdims=True)
    return p @ y

