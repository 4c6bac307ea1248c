"""Fixed-size without-replacement designs, survey weights and weight scaling.

Two Midzuno variants are provided.  :func:`draw_midzuno` is the classical
scheme (one unit drawn proportional to size, the remaining ``n - 1`` by simple
random sampling) whose inclusion probabilities are given by
:func:`midzuno_inclusion_probs`.  Because the classical scheme dilutes the
size effect to a single draw, it is close to SRS whenever ``n`` is more than a
handful of units.  :func:`draw_midzuno_pps` is the generalised version that
attains arbitrary target probabilities ``pi = n * size / sum(size)`` exactly:
it runs an elimination procedure on the complementary probabilities
``1 - pi`` and takes the eliminated units as the sample.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SIZE_FLOOR = 1e-9


class DesignError(ValueError):
    pass


class Design(str, Enum):
    SRS = "SRS"
    MIDZUNO = "Midzuno"
    MIDZUNO_PPS = "MidzunoPPS"
    STRATIFIED_SRS = "StratifiedSRS"


class WeightScaling(str, Enum):
    SUM_TO_AREA_SAMPLE_SIZE = "SumToAreaSampleSize"
    CLUSTER_SUM_PRESERVING = "ClusterSumPreserving"
    EFFECTIVE_SAMPLE_SIZE = "EffectiveSampleSize"
    UNSCALED = "Unscaled"
    SUM_TO_TOTAL_SAMPLE_SIZE = "SumToTotalSampleSize"


@dataclass(frozen=True, eq=False)
class SampleDraw:
    indices: np.ndarray
    pi: np.ndarray
    weights: np.ndarray
    design_tag: Design

    def __post_init__(self):
        if len(self.indices) != len(self.pi) or len(self.pi) != len(self.weights):
            raise DesignError("indices, pi and weights must align")
        if len(np.unique(self.indices)) != len(self.indices):
            raise DesignError("sample indices must be distinct")
        if np.any(self.pi <= 0) or np.any(self.pi > 1):
            raise DesignError("inclusion probabilities must lie in (0, 1]")

    @property
    def n(self) -> int:
        return len(self.indices)

    def __eq__(self, other):
        if not isinstance(other, SampleDraw):
            return NotImplemented
        return (
            self.design_tag == other.design_tag
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.pi, other.pi)
            and np.array_equal(self.weights, other.weights)
        )

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["unit_id", "pi", "weight"])
            for u, p, wt in zip(self.indices, self.pi, self.weights):
                w.writerow([int(u), repr(float(p)), repr(float(wt))])

    @classmethod
    def from_csv(cls, path, design_tag: Design = Design.MIDZUNO_PPS) -> "SampleDraw":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        if not rows:
            raise DesignError(f"{path}: empty sample file")
        try:
            idx = np.array([int(r["unit_id"]) for r in rows])
            pi = np.array([float(r["pi"]) for r in rows])
            wt = np.array([float(r["weight"]) for r in rows])
        except (KeyError, ValueError) as exc:
            raise DesignError(f"{path}: needs numeric unit_id, pi, weight columns ({exc})") from None
        return cls(idx, pi, wt, design_tag)


def _sizes(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=float)
    if sizes.ndim != 1 or sizes.size == 0:
        raise DesignError("sizes must be a non-empty vector")
    if np.any(~np.isfinite(sizes)) or np.any(sizes < 0):
        raise DesignError("sizes must be finite and nonnegative")
    return np.maximum(sizes, SIZE_FLOOR)


def _check_n(n, N):
    if not 1 <= n <= N:
        raise DesignError(f"sample size n = {n} must lie in [1, N = {N}]")


# classical Midzuno -------------------------------------------------------
def midzuno_inclusion_probs(sizes, n: int) -> np.ndarray:
    """Inclusion probabilities of the classical Midzuno design.

    With first-draw probabilities ``p = size / sum(size)``,
    ``pi_i = p_i (N - n) / (N - 1) + (n - 1) / (N - 1)``; these sum to ``n``
    and never exceed one.
    """
    sizes = _sizes(sizes)
    N = sizes.size
    _check_n(n, N)
    if N == 1:
        return np.ones(1)
    p = sizes / sizes.sum()
    pi = p * (N - n) / (N - 1) + (n - 1) / (N - 1)
    return np.minimum(pi, 1.0)


def draw_midzuno(sizes, n: int, rng, unit_ids=None) -> SampleDraw:
    sizes = _sizes(sizes)
    N = sizes.size
    _check_n(n, N)
    ids = np.arange(N) if unit_ids is None else np.asarray(unit_ids)
    first = rng.choice(N, p=sizes / sizes.sum())
    rest = np.delete(np.arange(N), first)
    others = rng.choice(rest, size=n - 1, replace=False) if n > 1 else np.array([], dtype=int)
    pos = np.sort(np.concatenate([[first], others]).astype(int))
    pi = midzuno_inclusion_probs(sizes, n)[pos]
    return SampleDraw(ids[pos], pi, 1.0 / pi, Design.MIDZUNO)


# exact-probability PPS via the generalised Midzuno scheme ----------------
def _capped_proportional(x, k):
    """``min(1, c x)`` with ``c`` chosen so the result sums to ``k``."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(-x, kind="stable")
    xs = x[order]
    tail = np.cumsum(xs[::-1])[::-1]  # tail[c] = sum of xs[c:]
    c = _n_capped(xs, tail, k)
    out = np.empty_like(x)
    out[order[:c]] = 1.0
    if c < x.size:
        out[order[c:]] = (k - c) * xs[c:] / tail[c]
    return out


def _n_capped(xs, tail, k):
    c_arr = np.arange(xs.size)
    ok = (k - c_arr) * xs <= tail * (1 + 1e-12)
    return int(np.argmax(ok)) if ok.any() else xs.size


def pps_inclusion_probs(sizes, n: int):
    """Target probabilities ``n * size / sum(size)`` with certainty units.

    Units whose probability would exceed one are set to one and the rest are
    re-solved until none exceeds one.  Returns ``(pi, certainty_mask)``.
    """
    sizes = _sizes(sizes)
    _check_n(n, sizes.size)
    pi = _capped_proportional(sizes, n)
    certain = pi >= 1.0
    if certain.any():
        log.info("certainty units (pi = 1): %s", np.flatnonzero(certain).tolist())
    return pi, certain


def draw_midzuno_pps(sizes, n: int, rng, unit_ids=None) -> SampleDraw:
    """Draw a fixed-size sample whose inclusion probabilities equal
    :func:`pps_inclusion_probs` exactly.

    Certainty units are taken first.  On the remaining units the complementary
    probabilities ``q = 1 - pi`` are the target of an elimination procedure:
    starting from all units, one unit at a time is removed with probability
    ``1 - q(i | k - 1) / q(i | k)``, where ``q(. | k)`` are the capped
    proportional probabilities for size ``k``.  After ``n`` removals the
    survivors have inclusion probabilities ``q`` and the removed units, which
    form the sample, have ``pi``.
    """
    sizes = _sizes(sizes)
    N = sizes.size
    ids = np.arange(N) if unit_ids is None else np.asarray(unit_ids)
    pi, certain = pps_inclusion_probs(sizes, n)
    chosen = list(np.flatnonzero(certain))
    free = np.flatnonzero(~certain)
    n_free = n - len(chosen)
    if n_free > 0:
        q = 1.0 - pi[free]
        order = np.argsort(-q, kind="stable")
        qs = q[order]
        tail = np.cumsum(qs[::-1])[::-1]
        alive = np.ones(free.size, dtype=bool)  # in sorted order
        current = np.ones(free.size)
        M = free.size
        for k in range(M, M - n_free, -1):
            # probabilities for a complement of size k - 1
            c = _n_capped(qs, tail, k - 1)
            nxt = np.ones(free.size)
            if c < free.size:
                nxt[c:] = (k - 1 - c) * qs[c:] / tail[c]
            r = np.where(alive, 1.0 - nxt / current, 0.0)
            r = np.clip(r, 0.0, None)
            total = r.sum()
            j = int(rng.choice(free.size, p=r / total))
            alive[j] = False
            current = nxt
        removed = order[~alive]
        chosen.extend(free[removed].tolist())
    pos = np.sort(np.asarray(chosen, dtype=int))
    return SampleDraw(ids[pos], pi[pos], 1.0 / pi[pos], Design.MIDZUNO_PPS)


def draw_srs(N: int, n: int, rng, unit_ids=None) -> SampleDraw:
    _check_n(n, N)
    ids = np.arange(N) if unit_ids is None else np.asarray(unit_ids)
    pos = np.sort(rng.choice(N, size=n, replace=False))
    pi = np.full(n, n / N)
    return SampleDraw(ids[pos], pi, 1.0 / pi, Design.SRS)


def draw_stratified_srs(strata, n_per_stratum, rng, unit_ids=None) -> SampleDraw:
    """SRS without replacement of ``n_per_stratum[h]`` units within each stratum."""
    strata = np.asarray(strata, dtype=int)
    ids = np.arange(strata.size) if unit_ids is None else np.asarray(unit_ids)
    counts = np.bincount(strata)
    pos, pis = [], []
    for h, nh in enumerate(n_per_stratum):
        members = np.flatnonzero(strata == h)
        if nh == 0:
            continue
        _check_n(nh, members.size)
        pick = rng.choice(members, size=nh, replace=False)
        pos.append(pick)
        pis.append(np.full(nh, nh / counts[h]))
    pos = np.concatenate(pos)
    pi = np.concatenate(pis)
    order = np.argsort(pos)
    return SampleDraw(ids[pos[order]], pi[order], 1.0 / pi[order], Design.STRATIFIED_SRS)


# weights ---------------------------------------------------------------------
def kish_effective_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / np.sum(w * w))


def scale_weights(weights, group_ids=None, method=WeightScaling.SUM_TO_AREA_SAMPLE_SIZE) -> np.ndarray:
    """Rescale survey weights within groups.

    * ``SumToAreaSampleSize``: weights in each group sum to its sample size.
    * ``ClusterSumPreserving``: one common factor for every group such that
      each group keeps its original weight total, i.e. the factor is one.
    * ``EffectiveSampleSize``: each group sums to its Kish effective size
      ``(sum w)^2 / sum w^2``.
    * ``SumToTotalSampleSize``: all weights together sum to the sample size.
    * ``Unscaled``: returned unchanged.
    """
    method = WeightScaling(method)
    w = np.asarray(weights)
    if method is WeightScaling.UNSCALED:
        return w
    w = w.astype(float)
    if w.size == 0:
        raise DesignError("cannot scale an empty weight vector")
    if np.any(w <= 0):
        raise DesignError("weights must be positive")
    if method is WeightScaling.SUM_TO_TOTAL_SAMPLE_SIZE:
        return w * (w.size / w.sum())
    if method is WeightScaling.CLUSTER_SUM_PRESERVING:
        return w.copy()
    groups = np.zeros(w.size, dtype=int) if group_ids is None else np.asarray(group_ids)
    if groups.shape != w.shape:
        raise DesignError("group_ids must align with weights")
    _, inv = np.unique(groups, return_inverse=True)
    n_g = np.bincount(inv).astype(float)
    sum_g = np.bincount(inv, weights=w)
    if method is WeightScaling.SUM_TO_AREA_SAMPLE_SIZE:
        target = n_g
    else:
        target = sum_g**2 / np.bincount(inv, weights=w * w)
    return w * (target / sum_g)[inv]


# diagnostics -----------------------------------------------------------------
@dataclass(frozen=True)
class InformativenessReport:
    weighted_mean: float
    unweighted_mean: float
    difference: float
    z: float
    informative: bool
    message: str = ""


def informativeness_check(y, weights, threshold: float = 2.0) -> InformativenessReport:
    """Compare the Hajek and unweighted means of a sample.

    The difference equals the Hajek mean of ``y - ybar``; its variance is the
    with-replacement linearisation ``n/(n-1) * sum(a_j^2 (e_j - d)^2)`` with
    ``a_j = w_j / sum(w)``.  The sample is flagged informative when
    ``|z| > threshold``.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = y.size
    if n < 2:
        mean = float(y.mean()) if n else math.nan
        return InformativenessReport(mean, mean, 0.0, math.nan, False, "insufficient sample")
    a = w / w.sum()
    ybar = y.mean()
    yw = float(a @ y)
    d = yw - ybar
    e = y - ybar
    var = n / (n - 1) * np.sum(a * a * (e - d) ** 2)
    if var == 0:
        z = 0.0 if d == 0 else math.copysign(math.inf, d)
    else:
        z = d / math.sqrt(var)
    return InformativenessReport(yw, float(ybar), float(d), float(z), bool(abs(z) > threshold))
