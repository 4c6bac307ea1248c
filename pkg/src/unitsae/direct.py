"""Design-based area estimators: Hajek and unweighted means, a linearised
variance for the Hajek mean, and Kish effective sample sizes.

Every per-area function returns arrays indexed ``0 .. n_areas - 1``; areas
without sampled units get NaN rather than an imputed value.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

Z95 = 1.959963984540054


def _groups(area_ids, n_areas):
    area_ids = np.asarray(area_ids, dtype=int)
    if n_areas is None:
        n_areas = int(area_ids.max()) + 1 if area_ids.size else 0
    return area_ids, n_areas


def _check_weights(w):
    w = np.asarray(w, dtype=float)
    if np.any(~(w > 0)):
        raise ValueError("weights must be positive")
    return w


def _ratio(num, den):
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def hajek_mean(y, w, area_ids, n_areas=None) -> np.ndarray:
    """Per-area ``sum(w y) / sum(w)``."""
    area_ids, m = _groups(area_ids, n_areas)
    w = _check_weights(w)
    y = np.asarray(y, dtype=float)
    return _ratio(np.bincount(area_ids, w * y, m), np.bincount(area_ids, w, m))


def unweighted_mean(y, area_ids, n_areas=None) -> np.ndarray:
    area_ids, m = _groups(area_ids, n_areas)
    y = np.asarray(y, dtype=float)
    return _ratio(np.bincount(area_ids, y, m), np.bincount(area_ids, minlength=m).astype(float))


def direct_variance(y, w, area_ids, N_i, n_areas=None) -> np.ndarray:
    """Variance of the Hajek mean with a finite-population correction.

    With weights ``a_j`` rescaled to sum to ``n_i`` in the area,
    ``v_i = (1 - n_i/N_i) / (n_i (n_i - 1)) * sum(a_j^2 (y_j - p_i)^2)``,
    which is ``(1 - f) s^2 / n`` under equal weights.  Areas with fewer than
    two units are NaN.
    """
    area_ids, m = _groups(area_ids, n_areas)
    w = _check_weights(w)
    y = np.asarray(y, dtype=float)
    n = np.bincount(area_ids, minlength=m).astype(float)
    sw = np.bincount(area_ids, w, m)
    p = hajek_mean(y, w, area_ids, m)
    a = w * _ratio(n, sw)[area_ids]
    ss = np.bincount(area_ids, (a * (y - p[area_ids])) ** 2, m)
    N_i = np.broadcast_to(np.asarray(N_i, dtype=float), (m,))
    out = np.full(m, np.nan)
    ok = n >= 2
    if np.any((n > 0) & ~ok):
        warnings.warn(f"areas {np.flatnonzero((n > 0) & ~ok).tolist()} have one sampled unit; variance missing",
                      RuntimeWarning, stacklevel=2)
    fpc = np.clip(1.0 - n[ok] / N_i[ok], 0.0, 1.0)
    out[ok] = fpc * ss[ok] / (n[ok] * (n[ok] - 1))
    return out


def design_effect_and_kish(y, w, area_ids, n_areas=None):
    """Return ``(d_i, n'_i, y*_i)``: Kish design effect ``n_i / n'_i``,
    effective size ``n'_i = (sum w)^2 / sum w^2`` and effective count
    ``y*_i = n'_i * p_i`` with ``p_i`` the Hajek mean."""
    area_ids, m = _groups(area_ids, n_areas)
    w = _check_weights(w)
    n = np.bincount(area_ids, minlength=m).astype(float)
    sw = np.bincount(area_ids, w, m)
    n_eff = _ratio(sw**2, np.bincount(area_ids, w * w, m))
    d = _ratio(n, n_eff)
    y_eff = n_eff * hajek_mean(y, w, area_ids, m)
    return d, n_eff, y_eff


def normal_interval(estimate, se, lo=0.0, hi=1.0):
    """``estimate +/- 1.96 se`` truncated to ``[lo, hi]``."""
    est = np.asarray(estimate, dtype=float)
    half = Z95 * np.asarray(se, dtype=float)
    return np.clip(est - half, lo, hi), np.clip(est + half, lo, hi)


@dataclass
class DirectRecord:
    area_id: int
    estimate: float
    se: float
    n: int
    n_eff: float


def direct_records(y, w, area_ids, N_i, n_areas=None) -> list:
    area_ids, m = _groups(area_ids, n_areas)
    est = hajek_mean(y, w, area_ids, m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        se = np.sqrt(direct_variance(y, w, area_ids, N_i, m))
    _, n_eff, _ = design_effect_and_kish(y, w, area_ids, m)
    n = np.bincount(area_ids, minlength=m)
    return [DirectRecord(i, float(est[i]), float(se[i]), int(n[i]), float(n_eff[i])) for i in range(m)]


def records_to_json(records) -> str:
    def clean(v):
        return None if isinstance(v, float) and math.isnan(v) else v

    return json.dumps([{k: clean(v) for k, v in asdict(r).items()} for r in records], indent=2)
