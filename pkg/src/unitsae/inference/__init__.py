"""Gradient-based posterior sampling: autodiff, transforms, HMC, diagnostics."""

from .density import DensityError, ModelDensity, grad_check
from .diagnostics import diagnostics, ess, mcse_mean, split_rhat
from .hmc import PosteriorDraws, SamplerError, hmc_sample
from .transforms import Block, ParamSpace, Transform

__all__ = [
    "Block",
    "DensityError",
    "ModelDensity",
    "ParamSpace",
    "PosteriorDraws",
    "SamplerError",
    "Transform",
    "diagnostics",
    "ess",
    "grad_check",
    "hmc_sample",
    "mcse_mean",
    "split_rhat",
]
