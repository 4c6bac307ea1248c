"""Turn posterior draws into area means by poststratification.

For every kept draw the sampled units enter with their observed values and
each cell's nonsampled units are drawn from a binomial, so that area and
state means are finite-population quantities computed per draw.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from .inference import Block, ModelDensity, ParamSpace, hmc_sample
from .inference import autodiff as ad
from .population import PoststratCell

log = logging.getLogger(__name__)


class CellDataError(ValueError):
    pass


def _cell_arrays(cells):
    area = np.array([c.area_id for c in cells], dtype=int)
    N = np.array([c.population_count for c in cells], dtype=float)
    n = np.array([c.sample_count for c in cells], dtype=float)
    s = np.array([c.sample_sum for c in cells], dtype=float)
    if np.any(N < n):
        bad = [i for i in range(len(cells)) if N[i] < n[i]]
        raise CellDataError(f"cells {bad} have fewer population than sampled units")
    return area, N, n, s


def predict_area_means(p_cell, cells, n_areas, rng, regenerate=False, population_counts=None) -> np.ndarray:
    """Per-draw area means from per-draw cell probabilities ``p_cell`` (K, C).

    With ``regenerate=False`` area ``i`` gets
    ``(sum of sampled y + sum_c Binomial(N_c - n_c, p_c)) / N_i``; with
    ``regenerate=True`` every unit is redrawn, ``sum_c Binomial(N_c, p_c) / N_i``.
    ``population_counts`` (K, C) overrides the cells' population counts per
    draw when they are themselves uncertain.
    """
    area, N, n, s = _cell_arrays(cells)
    p_cell = np.clip(np.asarray(p_cell, dtype=float), 0.0, 1.0)
    K = p_cell.shape[0]
    Nk = np.broadcast_to(N, p_cell.shape) if population_counts is None else np.asarray(population_counts, dtype=float)
    if np.any(Nk < n):
        raise CellDataError("a drawn cell size is smaller than its sample count")
    if regenerate:
        pos = rng.binomial(Nk.astype(np.int64), p_cell)
        observed = np.zeros(n_areas)
    else:
        pos = rng.binomial((Nk - n).astype(np.int64), p_cell)
        observed = np.bincount(area, s, n_areas)
    onehot = np.zeros((area.size, n_areas))
    onehot[np.arange(area.size), area] = 1.0
    totals = pos @ onehot + observed
    N_area = Nk @ onehot
    with np.errstate(invalid="ignore", divide="ignore"):
        out = totals / N_area
    if K and np.any(N_area[0] == 0):
        out[:, N_area[0] == 0] = np.nan
    return out


def predict_area_means_model1(beta_draws, u_draws, cells, X_cell, n_areas, rng, regenerate=False) -> np.ndarray:
    """Area means for draws of ``(beta, u)`` with ``logit p = x_cell'beta + u_area``."""
    area = np.array([c.area_id for c in cells], dtype=int)
    eta = np.asarray(beta_draws) @ np.asarray(X_cell, dtype=float).T + np.asarray(u_draws)[:, area]
    return predict_area_means(expit(eta), cells, n_areas, rng, regenerate)


# multinomial model for unknown cell sizes ---------------------------------
def largest_remainder(total: int, shares, minimum=None) -> np.ndarray:
    """Integers proportional to ``shares`` that sum to ``total``.

    Floors are topped up one at a time in order of the largest fractional
    part.  With ``minimum`` the result is at least ``minimum`` elementwise;
    the excess is taken from the cells with the most room above their minimum.
    """
    shares = np.asarray(shares, dtype=float)
    raw = total * shares / shares.sum()
    out = np.floor(raw).astype(np.int64)
    short = int(total - out.sum())
    if short > 0:
        order = np.argsort(-(raw - out), kind="stable")
        out[order[:short]] += 1
    if minimum is not None:
        minimum = np.asarray(minimum, dtype=np.int64)
        if minimum.sum() > total:
            raise CellDataError("minimum cell sizes exceed the area total")
        deficit = np.maximum(minimum - out, 0)
        out = out + deficit
        excess = int(deficit.sum())
        while excess > 0:
            room = out - minimum
            j = int(np.argmax(room))
            take = min(excess, int(room[j]))
            out[j] -= take
            excess -= take
    return out


def cell_size_logdensity(n_cells, w_cells, concentration: float = 1.0) -> ModelDensity:
    """Joint posterior of within-area cell shares for several areas.

    ``n_cells`` / ``w_cells`` are lists (one entry per area) of sample counts
    and weight values.  Each area with two or more cells has shares ``phi``
    with a symmetric Dirichlet(``concentration``) prior (flat by default) and
    multinomial likelihood ``prod_l (phi_l / w_l / sum_k phi_k / w_k)^{n_l}``.

    All areas share one unconstrained block ``share_logits``: per area, the
    logits of every cell but the last (pinned at zero).  The shares are
    reported as derived blocks ``phi<i>``, ``i`` indexing the input lists.
    """
    if concentration <= 0:
        raise ValueError("Dirichlet concentration must be positive")
    keep = [i for i, n in enumerate(n_cells) if np.size(n) >= 2]
    if not keep:
        raise CellDataError("no area has two or more cells")
    sizes = np.array([np.size(n_cells[i]) for i in keep])
    L, F, K = sizes.sum(), (sizes - 1).sum(), sizes.size
    cell_area = np.repeat(np.arange(K), sizes)
    free = np.ones(L, dtype=bool)
    free[np.cumsum(sizes) - 1] = False
    embed = np.zeros((L, F))
    embed[np.flatnonzero(free), np.arange(F)] = 1.0
    S = np.zeros((K, L))
    S[cell_area, np.arange(L)] = 1.0
    n = np.concatenate([np.asarray(n_cells[i], dtype=float) for i in keep])
    inv_w = 1.0 / np.concatenate([np.asarray(w_cells[i], dtype=float) for i in keep])
    a = n + concentration - 1.0
    n_area = S @ n
    space = ParamSpace([Block("share_logits", (F,))])

    def log_prob(p):
        full = embed @ p["share_logits"]
        top = np.full(K, -np.inf)
        np.maximum.at(top, cell_area, ad._val(full))
        lse = ad.log(S @ ad.exp(full - top[cell_area])) + top
        logp = full - S.T @ lse
        lik = ad.sum_(a * logp) - ad.sum_(n_area * ad.log(S @ (ad.exp(logp) * inv_w)))
        return lik + ad.sum_(logp)  # log-Jacobian of the pinned softmax

    def derived(p):
        full = embed @ p["share_logits"]
        out = {}
        for k, i in enumerate(keep):
            out[f"phi{i}"] = softmax(full[cell_area == k])
        return out

    return ModelDensity(space, log_prob, "multinomial cell sizes", derived)


def multinomial_cell_sizes(n_cells, w_cells, N_area, draws, rng=None, *, chains=2, warmup=500, seed=None,
                           concentration: float = 1.0):
    """Posterior draws of cell population sizes for each area.

    Returns a list (one per area) of integer arrays shaped ``(draws, L_i)``.
    Shares are sampled jointly by HMC; sizes are ``N_i phi`` rounded by
    largest remainder, never below the cell's sample count.  The sampler
    seed is ``seed`` if given, else drawn from ``rng``.
    """
    if seed is None:
        seed = int(np.random.default_rng(rng).integers(2**31))
    iters = int(np.ceil(draws / chains))
    shares = {}
    if any(len(n) >= 2 for n in n_cells):
        model = cell_size_logdensity(n_cells, w_cells, concentration)
        post = hmc_sample(model, chains=chains, warmup=warmup, iters=iters, seed=seed)
        vals = [model.block_values(z) for z in post.unconstrained[:draws]]
        for i, n in enumerate(n_cells):
            if len(n) >= 2:
                shares[i] = np.array([v[f"phi{i}"] for v in vals])
    out = []
    for i, n in enumerate(n_cells):
        n = np.asarray(n, dtype=np.int64)
        if n.size == 0:
            out.append(np.zeros((draws, 0), dtype=np.int64))
        elif n.size == 1:
            out.append(np.full((draws, 1), int(N_area[i]), dtype=np.int64))
        else:
            out.append(np.stack([largest_remainder(int(N_area[i]), phi, n) for phi in shares[i]]))
    return out


# summaries -----------------------------------------------------------------
def aggregate(area_draws, N_i=None) -> dict:
    """Posterior mean, sd and equal-tailed 95% interval per area.

    With area sizes ``N_i`` the state mean ``sum N_i ybar_i / sum N_i`` is
    formed per draw first and summarised under the key ``"state"``.
    """
    area_draws = np.asarray(area_draws, dtype=float)
    if area_draws.shape[0] < 100:
        warnings.warn(f"only {area_draws.shape[0]} draws; intervals will be unstable", RuntimeWarning, stacklevel=2)
    out = {
        "point": np.mean(area_draws, axis=0),
        "se": np.std(area_draws, axis=0, ddof=1) if area_draws.shape[0] > 1 else np.zeros(area_draws.shape[1]),
        "lo95": np.quantile(area_draws, 0.025, axis=0),
        "hi95": np.quantile(area_draws, 0.975, axis=0),
    }
    if N_i is not None:
        state = state_draws(area_draws, N_i)
        out["state"] = {
            "point": float(state.mean()),
            "se": float(state.std(ddof=1)) if state.size > 1 else 0.0,
            "lo95": float(np.quantile(state, 0.025)),
            "hi95": float(np.quantile(state, 0.975)),
        }
    return out


def state_draws(area_draws, N_i) -> np.ndarray:
    N_i = np.asarray(N_i, dtype=float)
    return np.asarray(area_draws) @ N_i / N_i.sum()


def write_estimates(summary: dict, path) -> None:
    """CSV (``.csv``) or JSON records with area_id, estimate, se, lo95, hi95."""
    rows = [
        {"area_id": i, "estimate": float(summary["point"][i]), "se": float(summary["se"][i]),
         "lo95": float(summary["lo95"][i]), "hi95": float(summary["hi95"][i])}
        for i in range(len(summary["point"]))
    ]
    path = Path(path)
    if path.suffix == ".csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["area_id", "estimate", "se", "lo95", "hi95"])
            w.writeheader()
            w.writerows(rows)
    else:
        doc = {"areas": rows}
        if "state" in summary:
            doc["state"] = summary["state"]
        path.write_text(json.dumps(doc, indent=2, allow_nan=True))


__all__ = [
    "CellDataError", "PoststratCell", "aggregate", "cell_size_logdensity", "largest_remainder",
    "multinomial_cell_sizes", "predict_area_means", "predict_area_means_model1", "state_draws", "write_estimates",
]
