"""Repeated informative subsampling of a synthetic population and comparison
of direct, classical and Bayesian area estimators.

Each replicate draws a PPS sample (inclusion proportional to the size
variable), fits every requested estimator, and records per-area point
estimates, standard errors and 95% intervals.  Metrics are computed against
the finite-population area proportions.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import bayes_models as bm
from . import classical, direct, poststrat, sampling
from .inference import hmc_sample
from .population import (
    GeneratorConfig,
    Population,
    PoststratCell,
    design_matrix,
    generate_population,
    grid_adjacency,
    index_cells,
    read_population,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ESTIMATORS = ("HT", "UW", "Model1", "Model2", "Model3", "NER-EBLUP", "PseudoEBLUP", "Oracle")
MODEL_BASED = ("Model1", "Model2", "Model3")


# data shared by all estimators ---------------------------------------------
@dataclass(eq=False)
class SurveyData:
    """A sample together with the population information the estimators need:
    poststratification cells (known counts), their design rows, area sizes,
    area covariate means and the area adjacency."""

    y: np.ndarray
    X: np.ndarray
    area_ids: np.ndarray
    weights: np.ndarray
    n_areas: int
    levels: tuple
    cells: list
    X_cell: np.ndarray
    W: np.ndarray

    @property
    def N_i(self) -> np.ndarray:
        return np.bincount([c.area_id for c in self.cells], [c.population_count for c in self.cells], self.n_areas)

    @property
    def Xbar_pop(self) -> np.ndarray:
        area = np.array([c.area_id for c in self.cells])
        cnt = np.array([c.population_count for c in self.cells], dtype=float)
        tot = np.stack([np.bincount(area, cnt * self.X_cell[:, k], self.n_areas) for k in range(self.X_cell.shape[1])], 1)
        return tot / self.N_i[:, None]

    @classmethod
    def from_population(cls, pop: Population, draw: sampling.SampleDraw, W=None) -> "SurveyData":
        pos = np.asarray(draw.indices, dtype=int)
        if not np.array_equal(pop.unit_id, np.arange(pop.total_size)):
            lookup = {int(u): k for k, u in enumerate(pop.unit_id)}
            pos = np.array([lookup[int(u)] for u in draw.indices])
        cells = index_cells(pop, pos)
        return cls.from_cells(
            pop.y_binary[pos].astype(float), pop.covariates[pos], pop.area_id[pos], draw.weights,
            pop.n_areas, pop.levels, cells, W,
        )

    @classmethod
    def from_cells(cls, y, covariates, area_ids, weights, n_areas, levels, cells, W=None) -> "SurveyData":
        X = design_matrix(np.asarray(covariates), levels)
        X_cell = design_matrix(np.array([c.covariate_key for c in cells]), levels)
        W = grid_adjacency(n_areas) if W is None else W
        return cls(np.asarray(y, dtype=float), X, np.asarray(area_ids, dtype=int), np.asarray(weights, dtype=float),
                   n_areas, tuple(levels), list(cells), X_cell, W)


@dataclass
class McmcBudget:
    chains: int = 2
    warmup: int = 400
    iters: int = 300
    cell_warmup: int = 300
    cell_concentration: float = 1.0
    priors: dict = field(default_factory=dict)

    @property
    def prior_settings(self) -> bm.Priors:
        return bm.Priors.from_dict(self.priors)


@dataclass
class AreaEstimate:
    point: np.ndarray
    se: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    info: dict = field(default_factory=dict)


def _normal_estimate(point, var):
    se = np.sqrt(np.maximum(var, 0.0))
    lo, hi = direct.normal_interval(point, se)
    return AreaEstimate(np.asarray(point, dtype=float), se, lo, hi)


def _posterior_estimate(area_draws, post):
    s = poststrat.aggregate(area_draws)
    info = {"divergences": post.divergences, "accept": [float(a) for a in post.accept_rates], "posterior": post}
    return AreaEstimate(s["point"], s["se"], s["lo95"], s["hi95"], info)


# estimators ------------------------------------------------------------------
def estimate_ht(data: SurveyData, budget, seed) -> AreaEstimate:
    p = direct.hajek_mean(data.y, data.weights, data.area_ids, data.n_areas)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        v = direct.direct_variance(data.y, data.weights, data.area_ids, data.N_i, data.n_areas)
    return _normal_estimate(p, v)


def estimate_uw(data: SurveyData, budget, seed) -> AreaEstimate:
    p = direct.unweighted_mean(data.y, data.area_ids, data.n_areas)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        v = direct.direct_variance(data.y, np.ones_like(data.y), data.area_ids, data.N_i, data.n_areas)
    return _normal_estimate(p, v)


def estimate_ner(data: SurveyData, budget, seed) -> AreaEstimate:
    fit = classical.fit_ner(data.y, data.X, data.area_ids, data.n_areas)
    p = classical.blup_area_means(fit, data.Xbar_pop, data.N_i)
    return _normal_estimate(p, classical.ner_mse_leading(fit, data.N_i))


def estimate_pseudo_eblup(data: SurveyData, budget, seed) -> AreaEstimate:
    ner = classical.fit_ner(data.y, data.X, data.area_ids, data.n_areas)
    fit = classical.fit_pseudo_eblup(data.y, data.X, data.weights, data.area_ids, data.Xbar_pop, data.n_areas, ner)
    return _normal_estimate(fit.theta_iw, classical.pseudo_eblup_mse_leading(fit))


def _streams(seed, k):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def estimate_model1(data: SurveyData, budget, seed) -> AreaEstimate:
    s_mcmc, s_pred = _streams(seed, 2)
    w = sampling.scale_weights(data.weights, None, sampling.WeightScaling.SUM_TO_TOTAL_SAMPLE_SIZE)
    model = bm.model1_logdensity(bm.Model1Spec(data.X, data.y, data.area_ids, data.n_areas, w,
                                               budget.prior_settings))
    post = hmc_sample(model, budget.chains, budget.warmup, budget.iters, seed=s_mcmc)
    beta = post.block("beta")
    u = post.block("z_u") * post.column("sigma_u")[:, None]
    draws = poststrat.predict_area_means_model1(beta, u, data.cells, data.X_cell, data.n_areas,
                                                np.random.default_rng(s_pred))
    return _posterior_estimate(draws, post)


def estimate_model3(data: SurveyData, budget, seed) -> AreaEstimate:
    s_mcmc, s_pred = _streams(seed, 2)
    model = bm.model3_logdensity(bm.Model3Spec(data.X, data.y, data.area_ids, data.n_areas, data.weights,
                                               priors=budget.prior_settings))
    post = hmc_sample(model, budget.chains, budget.warmup, budget.iters, seed=s_mcmc)
    beta = post.block("beta")
    u = post.block("z_u") * post.column("sigma_u")[:, None]
    alpha = post.block("alpha")
    a = post.column("a")
    s_eps = post.column("sigma_eps")
    area = np.array([c.area_id for c in data.cells])
    p_s = expit(beta @ data.X_cell.T + u[:, area])
    base = alpha @ data.X_cell.T + 0.5 * s_eps[:, None] ** 2
    Ew1, Ew0 = np.exp(base + a[:, None]), np.exp(base)
    p_c = bm.sample_to_population_bernoulli(p_s, np.maximum(Ew1, 1.0), np.maximum(Ew0, 1.0))
    draws = poststrat.predict_area_means(p_c, data.cells, data.n_areas, np.random.default_rng(s_pred))
    return _posterior_estimate(draws, post)


def weight_cells(data: SurveyData):
    """Cells formed by distinct weight values within each area."""
    n_cells, w_cells, sums = [], [], []
    for i in range(data.n_areas):
        sel = data.area_ids == i
        wv, inv = np.unique(data.weights[sel], return_inverse=True)
        n_cells.append(np.bincount(inv, minlength=wv.size))
        w_cells.append(wv)
        sums.append(np.bincount(inv, data.y[sel], wv.size))
    return n_cells, w_cells, sums


def estimate_model2(data: SurveyData, budget, seed) -> AreaEstimate:
    s_mcmc, s_cells, s_pred = _streams(seed, 3)
    model = bm.model2_logdensity(bm.Model2Spec(data.y, data.area_ids, data.weights, data.W,
                                               budget.prior_settings))
    post = hmc_sample(model, budget.chains, budget.warmup, budget.iters, seed=s_mcmc)
    K = post.n_draws
    n_cells, w_cells, sums = weight_cells(data)
    N_i = data.N_i
    sizes = poststrat.multinomial_cell_sizes(n_cells, w_cells, N_i, K, chains=budget.chains,
                                             warmup=budget.cell_warmup, seed=s_cells,
                                             concentration=budget.cell_concentration)
    # f at the distinct weights, per draw
    vals = [model.block_values(z) for z in post.unconstrained]
    wu = vals[0]["weight_values"]
    f = np.array([v["f"] for v in vals])
    eff = np.array([v["u"] + v["v"] + v["beta0"] for v in vals])
    cells, probs, counts = [], [], []
    for i in range(data.n_areas):
        if w_cells[i].size == 0:
            continue
        pos = np.searchsorted(wu, w_cells[i])
        for l in range(w_cells[i].size):
            cells.append(PoststratCell(i, (l,), int(max(sizes[i][:, l].min(), n_cells[i][l])), int(n_cells[i][l]),
                                       float(sums[i][l])))
            probs.append(expit(f[:, pos[l]] + eff[:, i]))
            counts.append(sizes[i][:, l])
    draws = poststrat.predict_area_means(np.stack(probs, 1), cells, data.n_areas, np.random.default_rng(s_pred),
                                         population_counts=np.stack(counts, 1))
    return _posterior_estimate(draws, post)


def _oracle(truth):
    def est(data, budget, seed):
        t = np.asarray(truth, dtype=float)
        return AreaEstimate(t.copy(), np.zeros_like(t), t.copy(), t.copy())
    return est


FITTERS = {
    "HT": estimate_ht,
    "UW": estimate_uw,
    "Model1": estimate_model1,
    "Model2": estimate_model2,
    "Model3": estimate_model3,
    "NER-EBLUP": estimate_ner,
    "PseudoEBLUP": estimate_pseudo_eblup,
}


# configuration and report ---------------------------------------------------
@dataclass
class SimConfig:
    generator: GeneratorConfig | None = field(default_factory=GeneratorConfig)
    population_csv: str | None = None
    n_sample: int = 1000
    replicates: int = 50
    estimators: tuple = ("HT", "UW", "Model1", "Model2", "Model3", "NER-EBLUP", "PseudoEBLUP")
    budget: McmcBudget = field(default_factory=McmcBudget)
    base_seed: int = 1000

    def validate(self, N: int | None = None) -> None:
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.n_sample < 1 or (N is not None and self.n_sample > N):
            raise ValueError(f"n_sample must lie in [1, N]; got {self.n_sample}")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimators {unknown}; choose from {list(ESTIMATORS)}")
        if (self.generator is None) == (self.population_csv is None):
            raise ValueError("give exactly one of generator or population_csv")
        if self.budget.chains < 1 or self.budget.iters < 1 or self.budget.warmup < 0:
            raise ValueError("invalid MCMC budget")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        if self.generator is not None:
            d["generator"] = json.loads(self.generator.to_json())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown simulation settings: {sorted(unknown)}")
        if "generator" in d and d["generator"] is not None:
            d["generator"] = GeneratorConfig.from_dict(d["generator"])
        elif "population_csv" in d:
            d["generator"] = None
        if "budget" in d:
            d["budget"] = McmcBudget(**d["budget"])
        if "estimators" in d:
            d["estimators"] = tuple(d["estimators"])
        return cls(**d)


@dataclass
class SimReport:
    config: SimConfig
    truth: np.ndarray
    N_i: np.ndarray
    estimates: dict  # name -> {"point"|"se"|"lo95"|"hi95": (R, m) arrays}
    seconds: dict  # name -> list of fit times
    failures: list
    informativeness: list

    def summary(self) -> list:
        rows = []
        for name, est in self.estimates.items():
            err = est["point"] - self.truth[None, :]
            ok = ~np.isnan(err)
            cover = (est["lo95"] <= self.truth) & (self.truth <= est["hi95"])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)  # areas with no successful fit
                bias_area = np.nanmean(err, axis=0)
            rows.append({
                "estimator": name,
                "mse": float(np.nanmean(err**2)) if ok.any() else float("nan"),
                "abs_bias": float(np.nanmean(np.abs(bias_area))) if ok.any() else float("nan"),
                "coverage": float(cover[ok].mean()) if ok.any() else float("nan"),
                "fits": int(np.all(ok, axis=1).sum()),
            })
        return rows

    def metric(self, name: str, key: str) -> float:
        for row in self.summary():
            if row["estimator"] == name:
                return row[key]
        raise KeyError(name)

    def mean_seconds(self, name: str) -> float:
        return float(np.mean(self.seconds[name])) if self.seconds.get(name) else float("nan")

    def area_rmse(self, name: str) -> np.ndarray:
        err = self.estimates[name]["point"] - self.truth[None, :]
        return np.sqrt(np.nanmean(err**2, axis=0))


def load_population(config: SimConfig) -> Population:
    if config.population_csv is not None:
        return read_population(config.population_csv)
    return generate_population(config.generator)


def run(config: SimConfig, progress=None, extra_fitters=None) -> SimReport:
    """Run every replicate serially and collect estimates.

    Replicate ``r`` uses seed ``base_seed + r`` for its sample; each
    estimator's MCMC and prediction streams are spawned from that seed and
    the estimator's position, so results do not depend on which estimators
    are requested.  A failed fit is logged, recorded and left as NaN.
    """
    pop = load_population(config)
    config.validate(pop.total_size)
    truth = pop.area_means()
    fitters = {**FITTERS, "Oracle": _oracle(truth), **(extra_fitters or {})}
    names = list(config.estimators)
    R, m = config.replicates, pop.n_areas
    est = {k: {f: np.full((R, m), np.nan) for f in ("point", "se", "lo95", "hi95")} for k in names}
    secs = {k: [] for k in names}
    failures, informative = [], []
    W = grid_adjacency(m)
    for r in range(R):
        seed = config.base_seed + r
        rng = np.random.default_rng(seed)
        draw = sampling.draw_midzuno_pps(pop.size_value, config.n_sample, rng, pop.unit_id)
        data = SurveyData.from_population(pop, draw, W)
        rep = sampling.informativeness_check(data.y, data.weights)
        informative.append({"replicate": r, "z": rep.z, "informative": rep.informative})
        for name in names:
            fseed = int(np.random.SeedSequence([seed, ESTIMATORS.index(name) if name in ESTIMATORS else 99])
                        .generate_state(1)[0])
            t0 = time.perf_counter()
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    out = fitters[name](data, config.budget, fseed)
            except Exception as exc:  # noqa: BLE001 - one failed fit must not abort the run
                log.warning("replicate %d: %s failed: %s", r, name, exc)
                failures.append({"replicate": r, "estimator": name, "error": f"{type(exc).__name__}: {exc}"})
                continue
            secs[name].append(time.perf_counter() - t0)
            for f in ("point", "se", "lo95", "hi95"):
                est[name][f][r] = getattr(out, f)
        if progress is not None:
            progress(r, R)
    return SimReport(config, truth, pop.area_sizes.astype(float), est, secs, failures, informative)


def _fmt(x):
    return repr(float(x))


def report_write(report: SimReport, out_dir) -> list:
    """Write summary.csv, per_area.csv, replicates.csv, timing.csv and
    manifest.json.  Everything except timing.csv is a deterministic function
    of the configuration."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    p = out / "summary.csv"
    with p.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "mse", "abs_bias", "coverage", "fits"])
        for row in report.summary():
            w.writerow([row["estimator"], _fmt(row["mse"]), _fmt(row["abs_bias"]), _fmt(row["coverage"]), row["fits"]])
    paths.append(p)

    p = out / "per_area.csv"
    with p.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "area_id", "rmse_direct", "rmse_model", "reduction"])
        if "HT" in report.estimates:
            base = report.area_rmse("HT")
            for name in report.estimates:
                if name == "HT":
                    continue
                rm = report.area_rmse(name)
                for i in range(len(base)):
                    w.writerow([name, i, _fmt(base[i]), _fmt(rm[i]), _fmt(base[i] - rm[i])])
    paths.append(p)

    p = out / "replicates.csv"
    with p.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate", "estimator", "area_id", "estimate", "se", "lo95", "hi95", "truth"])
        for name, e in report.estimates.items():
            for r in range(e["point"].shape[0]):
                for i in range(e["point"].shape[1]):
                    w.writerow([r, name, i, *(_fmt(e[f][r, i]) for f in ("point", "se", "lo95", "hi95")),
                                _fmt(report.truth[i])])
    paths.append(p)

    p = out / "timing.csv"
    with p.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "mean_seconds", "fits"])
        for name in report.estimates:
            w.writerow([name, f"{report.mean_seconds(name):.4f}", len(report.seconds[name])])
    paths.append(p)

    p = out / "manifest.json"
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": report.config.to_dict(),
        "replicate_seeds": [report.config.base_seed + r for r in range(report.config.replicates)],
        "failures": report.failures,
        "informativeness": report.informativeness,
    }
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    paths.append(p)
    return paths


def config_from_manifest(path) -> SimConfig:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported manifest schema {doc.get('schema_version')}")
    return SimConfig.from_dict(doc["config"])
