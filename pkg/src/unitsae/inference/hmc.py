"""Hamiltonian Monte Carlo with jittered fixed-length trajectories.

Warmup adapts the step size by dual averaging (Hoffman & Gelman, 2014) and a
diagonal or dense inverse metric from windowed draw (co)variances.  After warmup the
number of leapfrog steps is drawn uniformly from ``[0.5 L, 1.5 L]`` with
``L = ceil(path_length / step_size)``.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .density import DensityError, ModelDensity

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0


class SamplerError(RuntimeError):
    pass


@dataclass
class PosteriorDraws:
    """Kept draws from all chains, stacked chain by chain."""

    draws: np.ndarray  # (chains * iters, constrained dim)
    names: list
    chain_ids: np.ndarray
    unconstrained: np.ndarray
    divergences: int = 0
    step_sizes: list = field(default_factory=list)
    accept_rates: list = field(default_factory=list)
    n_leapfrog: int = 0
    warnings: list = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return int(len(np.unique(self.chain_ids)))

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def chain_array(self, values=None) -> np.ndarray:
        """Reshape ``(draws, dim)`` values to ``(chains, iters, dim)``."""
        values = self.draws if values is None else values
        chains = np.unique(self.chain_ids)
        return np.stack([values[self.chain_ids == c] for c in chains])

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def block(self, name: str) -> np.ndarray:
        """All columns of a vector block, ``(draws, size)``."""
        cols = [k for k, nm in enumerate(self.names) if nm.startswith(name + "[")]
        if not cols:
            raise KeyError(name)
        return self.draws[:, cols]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", *self.names])
            for c, row in zip(self.chain_ids, self.draws):
                w.writerow([int(c), *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path) -> "PosteriorDraws":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2 or rows[0][0] != "chain":
            raise ValueError(f"{path}: expected a header starting with 'chain' and at least one draw")
        names = rows[0][1:]
        try:
            data = np.array([[float(v) for v in r] for r in rows[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}: non-numeric draw value ({exc})") from None
        return cls(
            draws=data[:, 1:],
            names=names,
            chain_ids=data[:, 0].astype(int),
            unconstrained=np.empty((len(data), 0)),
        )


class _DualAveraging:
    def __init__(self, step, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(step)

    def restart(self, step):
        self.mu = math.log(10.0 * step)
        self.h_bar = 0.0
        self.log_step_bar = 0.0
        self.t = 0

    def update(self, accept):
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept)
        log_step = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        w = self.t ** (-self.kappa)
        self.log_step_bar = w * log_step + (1 - w) * self.log_step_bar
        return math.exp(log_step)

    @property
    def final(self):
        return math.exp(self.log_step_bar)


def _metric_windows(warmup):
    """First collected iteration and ends of the slow adaptation windows.

    Stan-style buffers: 75 initial, 25 doubling base, 50 terminal; scaled to
    15% / 75% / 10% of warmup when it is too short for those.
    """
    if warmup < 20:
        return 0, []
    init, term, base = 75, 50, 25
    if init + term + base > warmup:
        init, term = int(0.15 * warmup), int(0.1 * warmup)
        base = warmup - init - term
    ends, start, size = [], init, base
    while True:
        end = start + size
        if end + 2 * size > warmup - term:
            ends.append(warmup - term)
            break
        ends.append(end)
        start, size = end, 2 * size
    return init, ends


class _Metric:
    """Inverse metric ``Minv`` (the momentum covariance is its inverse),
    either a diagonal vector or a dense matrix."""

    def __init__(self, inv_metric):
        self.inv = np.asarray(inv_metric, dtype=float)
        self.dense = self.inv.ndim == 2
        if self.dense:
            self.chol = np.linalg.cholesky(self.inv)

    @classmethod
    def estimate(cls, draws, dense):
        """Regularised window estimate, shrunk towards ``1e-3 I``.

        A dense estimate needs more draws than dimensions; it is also shrunk
        towards its own diagonal by ``d / (n + d)``.  Shorter windows fall
        back to the diagonal.
        """
        n, d = draws.shape
        var = draws.var(axis=0, ddof=1)
        reg = 1e-3 * (5.0 / (n + 5.0))
        shrink = n / (n + 5.0)
        if dense and n > d:
            cov = np.atleast_2d(np.cov(draws, rowvar=False))
            lam = d / (n + d)
            cov = (1 - lam) * cov + lam * np.diag(var)
            return cls(shrink * cov + reg * np.eye(d))
        return cls(shrink * var + reg)

    def momentum(self, rng, d):
        z = rng.normal(size=d)
        if self.dense:
            return sla.solve_triangular(self.chol.T, z, lower=False)
        return z / np.sqrt(self.inv)

    def velocity(self, p):
        return self.inv @ p if self.dense else self.inv * p

    def kinetic(self, p):
        return 0.5 * float(p @ self.velocity(p))


def _leapfrog(model, q, p, grad, step, n_steps, metric):
    p = p + 0.5 * step * grad
    lp = None
    for k in range(n_steps):
        q = q + step * metric.velocity(p)
        try:
            lp, grad = model.evaluate(q)
        except np.linalg.LinAlgError:
            return q, p, -np.inf, grad
        if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
            return q, p, -np.inf, grad
        if k != n_steps - 1:
            p = p + step * grad
    p = p + 0.5 * step * grad
    return q, p, lp, grad


def _init_point(model, rng, radius, init):
    if init is not None:
        q = np.asarray(init, dtype=float)
        lp, g = model.evaluate(q)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return q, lp, g
    for _ in range(100):
        q = rng.uniform(-radius, radius, size=model.dimension)
        with np.errstate(all="ignore"):
            lp, g = model.evaluate(q)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return q, lp, g
    raise SamplerError("could not find a finite initial density after 100 attempts")


def _initial_step(model, q, lp, grad, rng, metric):
    step = 1.0
    p = metric.momentum(rng, q.size)
    h0 = lp - metric.kinetic(p)

    def log_ratio(s):
        with np.errstate(all="ignore"):
            _, p1, lp1, _ = _leapfrog(model, q, p, grad, s, 1, metric)
        h1 = lp1 - metric.kinetic(p1) if np.isfinite(lp1) else -np.inf
        return h1 - h0 if np.isfinite(h1) else -np.inf

    direction = 1 if log_ratio(step) > math.log(0.5) else -1
    for _ in range(50):
        r = log_ratio(step)
        if (direction == 1 and not r > math.log(0.5)) or (direction == -1 and r > math.log(0.5)):
            break
        step = step * (2.0 ** direction)
    return step


def _run_chain(model, warmup, iters, target_accept, rng, path_length, max_steps, adapt_metric, init, init_radius,
               dense):
    d = model.dimension
    q, lp, grad = _init_point(model, rng, init_radius, init)
    metric = _Metric(np.ones(d))
    step = _initial_step(model, q, lp, grad, rng, metric)
    da = _DualAveraging(step, target_accept)
    window_start, windows = _metric_windows(warmup) if adapt_metric else (0, [])
    window_draws = []

    kept = np.empty((iters, d))
    accepts, divergences, n_leapfrog = [], 0, 0
    for it in range(warmup + iters):
        warm = it < warmup
        base_steps = min(max_steps, max(1, math.ceil(path_length / step)))
        n_steps = int(rng.integers(max(1, math.ceil(0.5 * base_steps)), max(1, math.floor(1.5 * base_steps)) + 1))
        p0 = metric.momentum(rng, d)
        h0 = lp - metric.kinetic(p0)
        with np.errstate(all="ignore"):
            q1, p1, lp1, g1 = _leapfrog(model, q, p0, grad, step, n_steps, metric)
            h1 = lp1 - metric.kinetic(p1) if np.isfinite(lp1) else -np.inf
        n_leapfrog += n_steps
        if not np.isfinite(h1) or h0 - h1 > DIVERGENCE_THRESHOLD:
            accept = 0.0
            if not warm:
                divergences += 1
        else:
            accept = min(1.0, math.exp(min(0.0, h1 - h0)))
        if rng.uniform() < accept:
            q, lp, grad = q1, lp1, g1

        if warm:
            step = da.update(accept)
            if windows:
                if it >= window_start:
                    window_draws.append(q.copy())
                if it + 1 == windows[0]:
                    arr = np.asarray(window_draws)
                    if len(arr) > 2:
                        metric = _Metric.estimate(arr, dense)
                    window_draws = []
                    windows = windows[1:]
                    step = _initial_step(model, q, lp, grad, rng, metric)
                    da.restart(step)
            if it + 1 == warmup:
                step = da.final
        else:
            kept[it - warmup] = q
            accepts.append(accept)
    return kept, step, float(np.mean(accepts)) if accepts else float("nan"), divergences, n_leapfrog


def hmc_sample(
    model: ModelDensity,
    chains: int = 2,
    warmup: int = 1000,
    iters: int = 1000,
    target_accept: float = 0.8,
    seed: int = 0,
    *,
    path_length: float = 1.0,
    max_steps: int = 256,
    adapt_metric: bool = True,
    dense_metric: bool = False,
    init=None,
    init_radius: float = 2.0,
) -> PosteriorDraws:
    """Draw ``iters`` post-warmup samples per chain from ``model``.

    Chains use independent streams spawned from ``seed``; identical arguments
    reproduce identical draws.  Unconstrained initial points are uniform on
    ``(-init_radius, init_radius)`` unless ``init`` is given.  With
    ``dense_metric`` the warmup windows estimate a full covariance instead of
    per-coordinate variances, which helps when parameters are strongly
    linearly correlated.
    """
    if model.dimension < 1:
        raise ValueError("model dimension must be at least 1")
    if chains < 1 or iters < 1 or warmup < 0:
        raise ValueError("need chains >= 1, iters >= 1 and warmup >= 0")
    streams = np.random.SeedSequence(seed).spawn(chains)
    all_u, chain_ids, steps, rates = [], [], [], []
    divergences = n_leapfrog = 0
    for c, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        try:
            kept, step, rate, div, nl = _run_chain(
                model, warmup, iters, target_accept, rng, path_length, max_steps, adapt_metric, init, init_radius,
                dense_metric,
            )
        except DensityError as exc:
            raise SamplerError(str(exc)) from exc
        log.debug("chain %d: step %.4g, accept %.3f, divergences %d", c, step, rate, div)
        all_u.append(kept)
        chain_ids.append(np.full(iters, c))
        steps.append(step)
        rates.append(rate)
        divergences += div
        n_leapfrog += nl
    unconstrained = np.vstack(all_u)
    constrained = np.array([model.space.constrain_flat(z) for z in unconstrained])
    out = PosteriorDraws(
        draws=constrained,
        names=model.space.names(),
        chain_ids=np.concatenate(chain_ids),
        unconstrained=unconstrained,
        divergences=divergences,
        step_sizes=steps,
        accept_rates=rates,
        n_leapfrog=n_leapfrog,
    )
    rate = divergences / (chains * iters)
    if rate > 0.2:
        msg = f"{divergences} of {chains * iters} post-warmup transitions diverged ({rate:.0%})"
        out.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return out
