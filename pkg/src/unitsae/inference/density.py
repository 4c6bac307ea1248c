"""Differentiable log-densities over a :class:`ParamSpace` and the shared
prior terms the survey models are assembled from."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .transforms import ParamSpace

LOG_2PI = math.log(2.0 * math.pi)


class DensityError(ValueError):
    """Raised when a log-density cannot be evaluated at a point."""


@dataclass(frozen=True)
class ModelDensity:
    """A log-density on constrained blocks, evaluated from unconstrained vectors.

    ``log_prob`` receives the dict of constrained block nodes and returns the
    log-density node; the log-Jacobian of the block transforms is added here.
    Instances hold no mutable state and can be shared across chains.
    """

    space: ParamSpace
    log_prob: Callable
    description: str = ""
    derived: Callable | None = field(default=None, compare=False)

    @property
    def dimension(self) -> int:
        return self.space.dim

    def _graph(self, z):
        params, log_jac = self.space.constrain_var(z)
        return self.log_prob(params) + log_jac

    def evaluate(self, z):
        """Log-density and its gradient at unconstrained ``z``."""
        return ad.value_and_grad(self._graph, z)

    def log_density(self, z) -> float:
        return self.evaluate(z)[0]

    def constrain(self, z) -> dict:
        return self.space.constrain(z)

    def block_values(self, z) -> dict:
        """Constrained blocks plus any model-derived quantities at ``z``."""
        params = self.space.constrain(z)
        if self.derived is not None:
            params.update(self.derived(params))
        return params


def grad_check(model: ModelDensity, point, step: float = 1e-3) -> float:
    """Maximum relative error of the autodiff gradient against finite differences.

    Uses the five-point central stencil, whose O(step^4) truncation error
    allows a step large enough to keep roundoff small.  The relative error of
    each coordinate is ``|g - fd| / max(1, |fd|)``.
    """
    point = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(point)):
        raise DensityError("point has non-finite coordinates")
    lp, g = model.evaluate(point)
    if not np.isfinite(lp):
        raise DensityError(f"non-finite density at point; blocks: {_bad_blocks(model, point)}")
    fd = np.empty_like(point)
    for k in range(point.size):
        e = np.zeros_like(point)
        e[k] = step
        f = model.log_density
        fd[k] = (8 * (f(point + e) - f(point - e)) - (f(point + 2 * e) - f(point - 2 * e))) / (12 * step)
    return float(np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd)))) if point.size else 0.0


def _bad_blocks(model, point):
    bad = []
    for name, value in model.space.constrain(point).items():
        if not np.all(np.isfinite(value)):
            bad.append(name)
    return bad or [b.name for b in model.space.blocks]


# prior and likelihood terms (all return graph nodes) ----------------------
def normal_lpdf(x, mu, sigma):
    """Sum of N(mu, sigma^2) log-densities; ``sigma`` may be a node."""
    z = (x - mu) / sigma
    n = np.size(ad._val(z))
    if np.ndim(ad._val(sigma)) == 0:
        log_scale = n * ad.log(sigma)
    else:
        log_scale = ad.sum_(ad.log(sigma))
    return -0.5 * ad.sum_(ad.square(z)) - log_scale - 0.5 * n * LOG_2PI


def half_cauchy_lpdf(x, scale):
    """Cauchy(0, scale) truncated to the positive axis."""
    return math.log(2.0 / (math.pi * scale)) - ad.log1p(ad.square(x / scale))


def bernoulli_logit_terms(y, eta):
    """Per-observation Bernoulli log-mass with logit ``eta``."""
    return y * ad.log_sigmoid(eta) + (1.0 - y) * ad.log_sigmoid(-eta)
