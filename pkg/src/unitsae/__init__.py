"""Unit-level small area estimation of proportions under informative sampling.

Synthetic populations, PPS sampling designs, direct and classical mixed-model
estimators, Bayesian unit-level models fitted by HMC, poststratification and a
repeated-sampling harness.
"""

__version__ = "0.1.0"
