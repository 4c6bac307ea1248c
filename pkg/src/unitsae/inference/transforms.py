"""Named parameter blocks mapped between constrained and unconstrained space."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from math import prod

import numpy as np
from scipy.special import expit, log_expit, logit, softmax

from . import autodiff as ad


class Transform(str, Enum):
    IDENTITY = "identity"
    LOG = "log"
    INTERVAL = "interval"  # logit-affine onto (lower, upper)
    SIMPLEX = "simplex"  # softmax with the last logit pinned to zero


@dataclass(frozen=True)
class Block:
    name: str
    shape: tuple = ()
    transform: Transform = Transform.IDENTITY
    lower: float = -1.0
    upper: float = 1.0

    @property
    def size(self) -> int:
        """Constrained element count."""
        return int(prod(self.shape))

    @property
    def free_size(self) -> int:
        """Unconstrained element count."""
        if self.transform is Transform.SIMPLEX:
            return self.size - 1
        return self.size


class ParamSpace:
    """Ordered collection of parameter blocks.

    The unconstrained vector is the concatenation of every block's free
    coordinates; ``constrain_var`` maps it onto the constrained blocks and
    accumulates the log-Jacobian of every non-identity transform.
    """

    def __init__(self, blocks):
        self.blocks = tuple(blocks)
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate block names in {names}")
        for b in self.blocks:
            if b.transform is Transform.SIMPLEX and (len(b.shape) != 1 or b.size < 2):
                raise ValueError(f"simplex block {b.name!r} needs a 1-d shape of length >= 2")
        self._offsets = np.concatenate([[0], np.cumsum([b.free_size for b in self.blocks])]).astype(int)

    @property
    def dim(self) -> int:
        return int(self._offsets[-1])

    @property
    def constrained_dim(self) -> int:
        return sum(b.size for b in self.blocks)

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def slice_of(self, name: str) -> slice:
        for k, b in enumerate(self.blocks):
            if b.name == name:
                return slice(self._offsets[k], self._offsets[k + 1])
        raise KeyError(name)

    def names(self) -> list[str]:
        """Flat column names on the constrained scale."""
        out = []
        for b in self.blocks:
            if b.shape == ():
                out.append(b.name)
            else:
                out.extend(f"{b.name}[{','.join(map(str, ix))}]" for ix in np.ndindex(*b.shape))
        return out

    # numeric maps ---------------------------------------------------------
    def constrain(self, z) -> dict:
        z = np.asarray(z, dtype=float)
        out = {}
        for k, b in enumerate(self.blocks):
            zb = z[self._offsets[k] : self._offsets[k + 1]]
            if b.transform is Transform.IDENTITY:
                x = zb
            elif b.transform is Transform.LOG:
                x = np.exp(zb)
            elif b.transform is Transform.INTERVAL:
                x = b.lower + (b.upper - b.lower) * expit(zb)
            else:
                x = softmax(np.append(zb, 0.0))
            out[b.name] = x.reshape(b.shape) if b.shape != () else float(x[0])
        return out

    def unconstrain(self, params: dict) -> np.ndarray:
        parts = []
        for b in self.blocks:
            x = np.asarray(params[b.name], dtype=float).ravel()
            if b.transform is Transform.IDENTITY:
                z = x
            elif b.transform is Transform.LOG:
                z = np.log(x)
            elif b.transform is Transform.INTERVAL:
                z = logit((x - b.lower) / (b.upper - b.lower))
            else:
                lx = np.log(x)
                z = lx[:-1] - lx[-1]
            parts.append(z)
        return np.concatenate(parts) if parts else np.zeros(0)

    def flatten(self, params: dict) -> np.ndarray:
        return np.concatenate([np.ravel(params[b.name]) for b in self.blocks])

    def unflatten(self, flat) -> dict:
        flat = np.asarray(flat, dtype=float)
        out, k = {}, 0
        for b in self.blocks:
            v = flat[k : k + b.size]
            out[b.name] = v.reshape(b.shape) if b.shape != () else float(v[0])
            k += b.size
        return out

    def constrain_flat(self, z) -> np.ndarray:
        return self.flatten(self.constrain(z))

    # differentiable map ---------------------------------------------------
    def constrain_var(self, z):
        """Return ``(blocks, log_jacobian)`` with graph nodes for every block."""
        out = {}
        log_jac = 0.0
        for k, b in enumerate(self.blocks):
            zb = z[self._offsets[k] : self._offsets[k + 1]]
            if b.transform is Transform.IDENTITY:
                x = zb
            elif b.transform is Transform.LOG:
                x = ad.exp(zb)
                log_jac = log_jac + ad.sum_(zb)
            elif b.transform is Transform.INTERVAL:
                width = b.upper - b.lower
                x = b.lower + width * ad.sigmoid(zb)
                log_jac = log_jac + ad.sum_(
                    np.log(width) + ad.log_sigmoid(zb) + ad.log_sigmoid(-zb)
                )
            else:
                full = ad.concat([zb, np.zeros(1)])
                logp = full - ad.logsumexp(full)
                x = ad.exp(logp)
                log_jac = log_jac + ad.sum_(logp)
            if b.shape == ():
                x = x[0]
            elif len(b.shape) > 1:
                x = ad.reshape(x, b.shape)
            out[b.name] = x
        return out, log_jac


def interval_log_jacobian(z, lower, upper) -> float:
    """Numeric log-Jacobian of the logit-affine map, for checks."""
    return float(np.sum(np.log(upper - lower) + log_expit(z) + log_expit(-z)))
