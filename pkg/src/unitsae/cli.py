"""Command-line interface: ``unitsae {generate,sample,fit,simulate,diagnose}``.

Exit status is 0 on success, 2 for usage or configuration errors and 3 when
a numerical routine fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bayes_models as bm
from . import direct, poststrat, sampling, simharness
from .inference import DensityError, PosteriorDraws, SamplerError, diagnostics, hmc_sample
from .population import (
    ConfigError,
    GeneratorConfig,
    ParseError,
    PoststratCell,
    generate_population,
    grid_adjacency,
    index_cells,
    read_population,
    write_population,
)

log = logging.getLogger("unitsae")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
MODELS = ("model1", "model2", "model3", "ner", "pseudo-eblup", "eff-counts")
FIT_NAMES = {"model1": "Model1", "model2": "Model2", "model3": "Model3", "ner": "NER-EBLUP",
             "pseudo-eblup": "PseudoEBLUP"}
SAMPLE_EXTRA = ("pi", "weight")
CELL_COLUMNS = ("area_id", "population_count", "sample_count", "sample_sum")


class UsageError(Exception):
    pass


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout
    return open(path, "w", newline="", encoding="utf-8")


def _read_text(path):
    if path in (None, "-"):
        return sys.stdin.read()
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


# generate ----------------------------------------------------------------------
def cmd_generate(args) -> int:
    cfg = GeneratorConfig.from_json(_read_text(args.config)) if args.config else GeneratorConfig()
    if args.seed is not None:
        cfg = GeneratorConfig.from_dict({**json.loads(cfg.to_json()), "seed": args.seed})
    pop = generate_population(cfg)
    write_population(pop, sys.stdout if args.out in (None, "-") else args.out)
    print(f"generated {pop.total_size} units in {pop.n_areas} areas", file=sys.stderr)
    return EXIT_OK


def _population_from(path):
    return read_population(sys.stdin if path in (None, "-") else path)


# sample ------------------------------------------------------------------------
def cmd_sample(args) -> int:
    pop = _population_from(args.population)
    rng = np.random.default_rng(args.seed)
    if args.design == "midzuno":
        draw = sampling.draw_midzuno(pop.size_value, args.n, rng, pop.unit_id)
    elif args.design == "midzuno-pps":
        draw = sampling.draw_midzuno_pps(pop.size_value, args.n, rng, pop.unit_id)
    else:
        draw = sampling.draw_srs(pop.total_size, args.n, rng, pop.unit_id)
    lookup = {int(u): k for k, u in enumerate(pop.unit_id)}
    pos = np.array([lookup[int(u)] for u in draw.indices])
    fh = _open_out(args.out)
    try:
        w = csv.writer(fh)
        w.writerow(["unit_id", "area_id", *pop.covariate_names, "y", "y_cont", "size", *SAMPLE_EXTRA])
        for k, j in enumerate(pos):
            w.writerow([int(pop.unit_id[j]), int(pop.area_id[j]), *(int(c) for c in pop.covariates[j]),
                        int(pop.y_binary[j]), repr(float(pop.y_continuous[j])), repr(float(pop.size_value[j])),
                        repr(float(draw.pi[k])), repr(float(draw.weights[k]))])
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.cells_out:
        write_cells(index_cells(pop, pos), pop.covariate_names, args.cells_out)
    rep = sampling.informativeness_check(pop.y_binary[pos], draw.weights)
    print(f"drew {draw.n} units ({draw.design_tag.value}); weighted - unweighted mean z = {rep.z:.2f}",
          file=sys.stderr)
    return EXIT_OK


def write_cells(cells, covariate_names, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", *covariate_names, "population_count", "sample_count", "sample_sum"])
        for c in cells:
            w.writerow([c.area_id, *c.covariate_key, c.population_count, c.sample_count, repr(float(c.sample_sum))])


def read_cells(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "area_id" or tuple(header[-3:]) != CELL_COLUMNS[1:]:
            raise ParseError(f"{path}: expected columns area_id, <covariates>, population_count, sample_count, sample_sum")
        cells = []
        for lineno, row in enumerate(reader, start=2):
            try:
                vals = [int(v) for v in row[:-1]]
                cells.append(PoststratCell(vals[0], tuple(vals[1:-2]), vals[-2], vals[-1], float(row[-1])))
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not cells:
        raise ParseError(f"{path}: no cells")
    return cells, header[1:-3]


def read_sample(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ParseError(f"{path}: empty sample file")
    cols = list(rows[0])
    try:
        covs = cols[cols.index("area_id") + 1: cols.index("y")]
        data = {
            "area_id": np.array([int(r["area_id"]) for r in rows]),
            "covariates": np.array([[int(r[c]) for c in covs] for r in rows], dtype=int).reshape(len(rows), len(covs)),
            "y": np.array([float(r["y"]) for r in rows]),
            "weight": np.array([float(r["weight"]) for r in rows]),
        }
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: sample needs area_id, covariates, y and weight columns ({exc})") from None
    return data, covs


# fit ---------------------------------------------------------------------------
def _survey_data(args, need_cells=True):
    sample, covs = read_sample(args.sample)
    if args.cells is None:
        if need_cells:
            raise UsageError(f"--cells is required for model {args.model}")
        cells = None
    else:
        cells, _ = read_cells(args.cells)
    if cells is None:
        n_areas = int(sample["area_id"].max()) + 1
        return sample, n_areas, None
    n_areas = max(max(c.area_id for c in cells), int(sample["area_id"].max())) + 1
    keys = np.array([c.covariate_key for c in cells] + list(sample["covariates"]))
    levels = tuple(int(v) for v in keys.max(axis=0) + 1)
    W = bm.read_adjacency(args.adjacency, n_areas) if args.adjacency else grid_adjacency(n_areas)
    data = simharness.SurveyData.from_cells(sample["y"], sample["covariates"], sample["area_id"], sample["weight"],
                                           n_areas, levels, cells, W)
    return sample, n_areas, data


def cmd_fit(args) -> int:
    priors = json.loads(_read_text(args.priors)) if args.priors else {}
    bm.Priors.from_dict(priors)  # validate early
    budget = simharness.McmcBudget(chains=args.chains, warmup=args.warmup, iters=args.iters, priors=priors)
    if args.model == "eff-counts":
        return _fit_eff_counts(args, budget)
    _, n_areas, data = _survey_data(args)
    est = simharness.FITTERS[FIT_NAMES[args.model]](data, budget, args.seed)
    post = est.info.pop("posterior", None)
    if args.draws_out and post is not None:
        post.to_csv(args.draws_out)
    doc = {
        "model": args.model,
        "areas": [
            {"area_id": i, "estimate": _num(est.point[i]), "se": _num(est.se[i]),
             "lo95": _num(est.lo95[i]), "hi95": _num(est.hi95[i])}
            for i in range(n_areas)
        ],
        "info": est.info,
    }
    _write_json(doc, args.out)
    return EXIT_OK


def _fit_eff_counts(args, budget):
    sample, n_areas, _ = _survey_data(args, need_cells=False)
    d, n_eff, y_eff = direct.design_effect_and_kish(sample["y"], sample["weight"], sample["area_id"], n_areas)
    ok = np.isfinite(n_eff)
    W = bm.read_adjacency(args.adjacency, n_areas) if args.adjacency else grid_adjacency(n_areas)
    if args.structure != "iid" and not ok.all():
        raise UsageError("every area needs sampled units for a spatial structure")
    idx = np.flatnonzero(ok)
    model = bm.effective_counts_logdensity(y_eff[idx], n_eff[idx], np.ones((idx.size, 1)), args.structure,
                                           W[np.ix_(idx, idx)], budget.prior_settings)
    post = hmc_sample(model, budget.chains, budget.warmup, budget.iters, seed=args.seed)
    if args.draws_out:
        post.to_csv(args.draws_out)
    p = np.array([model.block_values(z)["p_area"] for z in post.unconstrained])
    s = poststrat.aggregate(p)
    areas = []
    for k, i in enumerate(idx):
        areas.append({"area_id": int(i), "estimate": _num(s["point"][k]), "se": _num(s["se"][k]),
                      "lo95": _num(s["lo95"][k]), "hi95": _num(s["hi95"][k]), "n_eff": _num(n_eff[i])})
    _write_json({"model": "eff-counts", "structure": args.structure, "areas": areas,
                 "info": {"divergences": post.divergences}}, args.out)
    return EXIT_OK


def _num(x):
    x = float(x)
    return None if not np.isfinite(x) else x


def _write_json(doc, out):
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out in (None, "-"):
        sys.stdout.write(text + "\n")
    else:
        Path(out).write_text(text + "\n", encoding="utf-8")


# simulate ------------------------------------------------------------------------
def cmd_simulate(args) -> int:
    doc = json.loads(_read_text(args.config)) if args.config else {}
    if "schema_version" in doc and "config" in doc:
        doc = doc["config"]
    cfg = simharness.SimConfig.from_dict(doc)
    if args.seed is not None:
        cfg.base_seed = args.seed
    if args.chains is not None:
        cfg.budget.chains = args.chains
    if args.iters is not None:
        cfg.budget.iters = args.iters
    if args.warmup is not None:
        cfg.budget.warmup = args.warmup
    if args.replicates is not None:
        cfg.replicates = args.replicates

    def progress(r, R):
        print(f"replicate {r + 1}/{R} done", file=sys.stderr, flush=True)

    report = simharness.run(cfg, progress=progress)
    out = args.out or "sim_out"
    simharness.report_write(report, out)
    print(f"wrote report to {out}", file=sys.stderr)
    return EXIT_OK


# diagnose ------------------------------------------------------------------------
def cmd_diagnose(args) -> int:
    try:
        post = PosteriorDraws.from_csv(args.draws)
    except OSError as exc:
        raise UsageError(f"cannot read {args.draws}: {exc.strerror}") from None
    table = diagnostics(post)
    fh = _open_out(args.out)
    try:
        w = csv.writer(fh)
        w.writerow(["parameter", "mean", "sd", "rhat", "ess"])
        for k, name in enumerate(post.names):
            col = post.draws[:, k]
            w.writerow([name, f"{col.mean():.6g}", f"{col.std(ddof=1):.6g}",
                        f"{table[name]['rhat']:.4f}", f"{table[name]['ess']:.1f}"])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# parser ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unitsae", description="Unit-level small area estimation under informative sampling")
    p.add_argument("-v", "--verbose", action="store_true", help="log debug output to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic population CSV")
    g.add_argument("--config", help="generator JSON config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output CSV (default stdout)")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("sample", help="draw a sample from a population CSV")
    s.add_argument("--population", help="population CSV (default stdin)")
    s.add_argument("--design", choices=("midzuno", "midzuno-pps", "srs"), default="midzuno-pps")
    s.add_argument("-n", type=int, required=True, help="sample size")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="sample CSV (default stdout)")
    s.add_argument("--cells-out", help="also write poststratification cells CSV")
    s.set_defaults(func=cmd_sample)

    f = sub.add_parser("fit", help="fit one estimator to a sample")
    f.add_argument("--model", choices=MODELS, required=True)
    f.add_argument("--sample", required=True)
    f.add_argument("--cells", help="poststratification cells CSV")
    f.add_argument("--adjacency", help="area adjacency edge list CSV")
    f.add_argument("--priors", help="prior settings JSON")
    f.add_argument("--structure", choices=("iid", "icar", "car"), default="iid", help="eff-counts random effects")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--chains", type=int, default=2)
    f.add_argument("--iters", type=int, default=1000)
    f.add_argument("--warmup", type=int, default=1000)
    f.add_argument("--draws-out", help="write posterior draws CSV")
    f.add_argument("--out", help="estimates JSON (default stdout)")
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("simulate", help="run the repeated-sampling experiment")
    m.add_argument("--config", help="simulation JSON config or a previous manifest.json")
    m.add_argument("--seed", type=int)
    m.add_argument("--chains", type=int)
    m.add_argument("--iters", type=int)
    m.add_argument("--warmup", type=int)
    m.add_argument("--replicates", type=int)
    m.add_argument("--out", help="report directory")
    m.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", help="R-hat and ESS for a draws CSV")
    d.add_argument("--draws", required=True)
    d.add_argument("--out", help="table CSV (default stdout)")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError, json.JSONDecodeError, FileNotFoundError,
            sampling.DesignError, poststrat.CellDataError) as exc:
        print(f"unitsae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SamplerError, DensityError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"unitsae {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"unitsae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
