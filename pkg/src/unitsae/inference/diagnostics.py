"""Rank-normalised split-R-hat and effective sample size (Vehtari et al., 2021)."""

from __future__ import annotations

import numpy as np
from scipy.stats import norm, rankdata


def _split(chains):
    n = chains.shape[1] // 2
    return np.concatenate([chains[:, :n], chains[:, chains.shape[1] - n :]], axis=0)


def _rank_normalize(x):
    r = rankdata(x, method="average").reshape(x.shape)
    return norm.ppf((r - 0.375) / (x.size + 0.25))


def _rhat_raw(chains):
    m, n = chains.shape
    means = chains.mean(axis=1)
    w = chains.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else np.inf
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def split_rhat(chains) -> float:
    """Rank-normalised split-R-hat for one parameter, ``chains`` shaped (m, n).

    Returns the maximum of the bulk and folded (tail) versions.  Draws that
    are constant across every chain give exactly 1.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2:
        return float("nan")
    if np.ptp(chains) == 0:
        return 1.0
    s = _split(chains)
    bulk = _rhat_raw(_rank_normalize(s))
    folded = np.abs(s - np.median(s))
    tail = _rhat_raw(_rank_normalize(folded))
    return max(bulk, tail)


def _autocov(x):
    n = x.size
    x = x - x.mean()
    f = np.fft.rfft(x, n=2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    return ac / n


def ess(chains, rank_normalize: bool = True) -> float:
    """Effective sample size via Geyer's initial monotone sequence.

    With ``rank_normalize`` (bulk-ESS) multi-chain draws are split and rank
    normalised first; without it the raw draws are used, which is the right
    input for the Monte Carlo standard error of a mean.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim == 1:
        chains = chains[None, :]
    if np.ptp(chains) == 0:
        return float(chains.size)
    if rank_normalize and chains.shape[0] >= 2 and chains.shape[1] >= 4:
        chains = _rank_normalize(_split(chains))
    m, n = chains.shape
    acov = np.array([_autocov(c) for c in chains])
    w = acov[:, 0].mean() * n / (n - 1)
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum positive pairs, enforce monotone decrease
    pair_sums = []
    t = 0
    while t + 1 < n:
        s = rho[t] + rho[t + 1]
        if s < 0:
            break
        pair_sums.append(s)
        t += 2
    pair_sums = np.minimum.accumulate(np.asarray(pair_sums)) if pair_sums else np.array([1.0])
    tau = -1.0 + 2.0 * pair_sums.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def mcse_mean(chains) -> float:
    chains = np.asarray(chains, dtype=float)
    return float(np.std(chains, ddof=1) / np.sqrt(ess(chains, rank_normalize=False)))


def diagnostics(draws) -> dict:
    """Per-parameter ``{name: {"rhat", "ess"}}`` for a PosteriorDraws.

    With a single chain R-hat is unavailable and reported as NaN.
    """
    arr = draws.chain_array()
    out = {}
    for k, name in enumerate(draws.names):
        x = arr[:, :, k]
        out[name] = {
            "rhat": split_rhat(x) if arr.shape[0] >= 2 else float("nan"),
            "ess": ess(x),
        }
    return out
