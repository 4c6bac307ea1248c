"""Synthetic finite populations with categorical covariates, area labels and
a size variable whose value depends on the binary response."""

from __future__ import annotations

import csv
import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit


class ConfigError(ValueError):
    """Invalid generator or run configuration."""


class ParseError(ValueError):
    """Malformed population or sample file."""


@dataclass(frozen=True)
class Unit:
    unit_id: int
    area_id: int
    covariates: tuple
    y_binary: int
    y_continuous: float
    size_value: float


@dataclass(frozen=True, eq=False)
class Population:
    """Column-oriented finite population; ``units`` materialises row objects."""

    unit_id: np.ndarray
    area_id: np.ndarray
    covariates: np.ndarray  # (N, K) integer levels
    y_binary: np.ndarray
    y_continuous: np.ndarray
    size_value: np.ndarray
    n_areas: int
    covariate_names: tuple = ("age", "race", "sex")
    levels: tuple = (4, 3, 2)

    def __post_init__(self):
        n = len(self.unit_id)
        if n == 0:
            raise ParseError("no units")
        for name in ("area_id", "y_binary", "y_continuous", "size_value"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if self.covariates.shape != (n, len(self.covariate_names)):
            raise ConfigError("covariate matrix does not match covariate names")
        if np.any(self.area_id < 0) or np.any(self.area_id >= self.n_areas):
            raise ConfigError("area_id outside [0, n_areas)")
        if np.any(self.size_value <= 0):
            raise ConfigError("size_value must be positive")
        if not np.all(np.isin(self.y_binary, (0, 1))):
            raise ConfigError("y_binary must be 0/1")
        if np.any(self.area_sizes < 1):
            raise ConfigError(f"areas without units: {np.flatnonzero(self.area_sizes < 1).tolist()}")
        if len(np.unique(self.unit_id)) != n:
            raise ConfigError("unit_id values must be distinct")

    @property
    def total_size(self) -> int:
        return len(self.unit_id)

    @property
    def area_sizes(self) -> np.ndarray:
        return np.bincount(self.area_id, minlength=self.n_areas)

    @property
    def units(self) -> list:
        return [
            Unit(int(u), int(a), tuple(int(c) for c in cov), int(yb), float(yc), float(s))
            for u, a, cov, yb, yc, s in zip(
                self.unit_id, self.area_id, self.covariates, self.y_binary, self.y_continuous, self.size_value
            )
        ]

    def area_means(self, y=None) -> np.ndarray:
        """Finite-population area means of ``y`` (default: the binary response)."""
        y = self.y_binary if y is None else y
        return np.bincount(self.area_id, weights=y, minlength=self.n_areas) / self.area_sizes

    def design_matrix(self, rows=None) -> np.ndarray:
        cov = self.covariates if rows is None else self.covariates[rows]
        return design_matrix(cov, self.levels)

    def __eq__(self, other):
        if not isinstance(other, Population):
            return NotImplemented
        return (
            self.n_areas == other.n_areas
            and tuple(self.covariate_names) == tuple(other.covariate_names)
            and tuple(self.levels) == tuple(other.levels)
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("unit_id", "area_id", "covariates", "y_binary", "y_continuous", "size_value")
            )
        )


@dataclass(frozen=True)
class PoststratCell:
    area_id: int
    covariate_key: tuple
    population_count: int
    sample_count: int
    sample_sum: float = 0.0  # sum of sampled binary responses in the cell

    def __post_init__(self):
        if not self.population_count >= self.sample_count >= 0:
            raise ConfigError(
                f"cell {self.area_id}/{self.covariate_key}: need population_count >= sample_count >= 0"
            )


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of the synthetic universe.

    ``beta`` is on the dummy-coded scale: an intercept followed by
    ``levels[k] - 1`` effects per covariate (first level is the reference).
    Sizes are ``exp(c0 + c1 * y + noise)``.  With ``log_size_step`` the log
    size is first rounded to a multiple of it (a geometric grid); with
    ``size_step`` the size is then rounded to a multiple of it.  Either grid
    makes sizes, and hence weights, take few distinct values, as survey
    weights do; 0 disables a grid.
    """

    m: int = 20
    area_sizes: tuple | None = None
    levels: tuple = (4, 3, 2)
    covariate_names: tuple = ("age", "race", "sex")
    beta: tuple = (-1.2, 0.3, 0.5, 0.2, 0.4, -0.3, 0.2)
    sigma_u: float = 0.3
    c0: float = 3.0
    c1: float = 1.0
    sigma_size: float = 0.8
    size_step: float = 0.0
    log_size_step: float = 0.5
    mix_concentration: float = 20.0
    beta_continuous: tuple | None = None
    sigma_e: float = 1.0
    seed: int = 42
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def sizes(self) -> tuple:
        return tuple(self.area_sizes) if self.area_sizes is not None else (1000,) * self.m

    def validate(self) -> None:
        if self.m < 1:
            raise ConfigError("m must be at least 1")
        if len(self.sizes) != self.m:
            raise ConfigError(f"area_sizes has {len(self.sizes)} entries for m = {self.m}")
        if any(int(n) < 1 for n in self.sizes):
            raise ConfigError("all area sizes must be >= 1")
        if len(self.levels) != len(self.covariate_names) or any(k < 1 for k in self.levels):
            raise ConfigError("levels must give a positive level count per covariate name")
        p = 1 + sum(k - 1 for k in self.levels)
        if len(self.beta) != p:
            raise ConfigError(f"beta has {len(self.beta)} entries, design has {p} columns")
        if self.beta_continuous is not None and len(self.beta_continuous) != p:
            raise ConfigError(f"beta_continuous has {len(self.beta_continuous)} entries, design has {p} columns")
        if self.sigma_u < 0 or self.sigma_size < 0 or self.sigma_e < 0:
            raise ConfigError("standard deviations must be nonnegative")
        if self.size_step < 0 or self.log_size_step < 0:
            raise ConfigError("size grids must be nonnegative")

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("extra")
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__) - {"extra"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "GeneratorConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"generator config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("generator config must be a JSON object")
        return cls.from_dict(d)


def design_matrix(covariates, levels) -> np.ndarray:
    """Intercept plus treatment-coded dummies (first level dropped)."""
    covariates = np.asarray(covariates, dtype=int).reshape(-1, len(levels))
    cols = [np.ones(len(covariates))]
    for k, nlev in enumerate(levels):
        for lev in range(1, nlev):
            cols.append((covariates[:, k] == lev).astype(float))
    return np.column_stack(cols)


def generate_population(config: GeneratorConfig) -> Population:
    config.validate()
    rng = np.random.default_rng(config.seed)
    sizes = np.asarray(config.sizes, dtype=int)
    area_id = np.repeat(np.arange(config.m), sizes)
    n = int(sizes.sum())

    covariates = np.empty((n, len(config.levels)), dtype=int)
    for k, nlev in enumerate(config.levels):
        base = np.full(nlev, 1.0 / nlev)
        for i in range(config.m):
            rows = area_id == i
            probs = rng.dirichlet(config.mix_concentration * nlev * base) if nlev > 1 else base
            covariates[rows, k] = rng.choice(nlev, size=int(rows.sum()), p=probs)

    X = design_matrix(covariates, config.levels)
    u = rng.normal(0.0, config.sigma_u, size=config.m) if config.sigma_u > 0 else np.zeros(config.m)
    eta = X @ np.asarray(config.beta, dtype=float) + u[area_id]
    y = (rng.uniform(size=n) < expit(eta)).astype(int)

    beta_c = np.asarray(config.beta_continuous if config.beta_continuous is not None else config.beta, dtype=float)
    y_cont = X @ beta_c + u[area_id] + rng.normal(0.0, config.sigma_e, size=n)

    log_size = config.c0 + config.c1 * y + rng.normal(0.0, config.sigma_size, size=n)
    if config.log_size_step > 0:
        log_size = np.round(log_size / config.log_size_step) * config.log_size_step
    size = np.exp(log_size)
    if config.size_step > 0:
        size = np.maximum(config.size_step, np.round(size / config.size_step) * config.size_step)

    return Population(
        unit_id=np.arange(n),
        area_id=area_id,
        covariates=covariates,
        y_binary=y,
        y_continuous=y_cont,
        size_value=size,
        n_areas=config.m,
        covariate_names=tuple(config.covariate_names),
        levels=tuple(config.levels),
    )


def cell_keys(area_id, covariates, levels) -> np.ndarray:
    """Integer code for each (area, covariate combination)."""
    key = np.asarray(area_id, dtype=np.int64)
    covariates = np.asarray(covariates, dtype=np.int64).reshape(len(key), -1)
    for k, nlev in enumerate(levels):
        key = key * nlev + covariates[:, k]
    return key


def decode_key(key: int, levels) -> tuple:
    cov = []
    for nlev in reversed(levels):
        key, lev = divmod(int(key), nlev)
        cov.append(lev)
    return int(key), tuple(reversed(cov))


def index_cells(pop: Population, sample) -> list:
    """Poststratification cells: every (area, covariate) combination present in
    the population, with its population and sample counts."""
    idx = np.asarray(sample.indices if hasattr(sample, "indices") else sample, dtype=int)
    pos = _positions(pop, idx)
    keys = cell_keys(pop.area_id, pop.covariates, pop.levels)
    uniq, inverse = np.unique(keys, return_inverse=True)
    pop_counts = np.bincount(inverse, minlength=len(uniq))
    samp_counts = np.bincount(inverse[pos], minlength=len(uniq))
    samp_sums = np.bincount(inverse[pos], weights=pop.y_binary[pos], minlength=len(uniq))
    cells = []
    for k, key in enumerate(uniq):
        area, cov = decode_key(key, pop.levels)
        cells.append(PoststratCell(area, cov, int(pop_counts[k]), int(samp_counts[k]), float(samp_sums[k])))
    return cells


def _positions(pop: Population, unit_ids) -> np.ndarray:
    if np.array_equal(pop.unit_id, np.arange(pop.total_size)):
        pos = np.asarray(unit_ids, dtype=int)
        if pos.size and (pos.min() < 0 or pos.max() >= pop.total_size):
            raise ConfigError("sample indices outside the population")
        return pos
    lookup = {int(u): k for k, u in enumerate(pop.unit_id)}
    try:
        return np.array([lookup[int(u)] for u in unit_ids], dtype=int)
    except KeyError as exc:
        raise ConfigError(f"sample unit {exc.args[0]} not in population") from None


@contextmanager
def _text_stream(target, mode):
    """Yield ``target`` if it is already a text stream, else open the path."""
    if hasattr(target, "read" if mode == "r" else "write"):
        yield target
    else:
        with Path(target).open(mode, newline="", encoding="utf-8") as fh:
            yield fh


def write_population(pop: Population, path) -> None:
    """Write ``pop`` to a CSV path or an open text stream."""
    with _text_stream(path, "w") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "area_id", *pop.covariate_names, "y", "y_cont", "size"])
        for u, a, cov, yb, yc, s in zip(
            pop.unit_id, pop.area_id, pop.covariates, pop.y_binary, pop.y_continuous, pop.size_value
        ):
            w.writerow([int(u), int(a), *(int(c) for c in cov), int(yb), repr(float(yc)), repr(float(s))])


def read_population(path, n_areas: int | None = None, levels=None) -> Population:
    """Parse a population CSV from a path or an open text stream.

    Header: ``unit_id,area_id,<covariates...>,y[,y_cont],size``.  Area labels
    must be integers in ``[0, n_areas)`` (``n_areas`` defaults to the largest
    label plus one); covariate levels are inferred unless ``levels`` is given.
    """
    with _text_stream(path, "r") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(rows):
        raise ParseError("no units")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["unit_id", "area_id"] or "y" not in header or header[-1] != "size":
        raise ParseError("header must be unit_id,area_id,<covariates...>,y[,y_cont],size")
    iy = header.index("y")
    cov_names = tuple(header[2:iy])
    has_cont = "y_cont" in header
    body = [r for r in rows[1:] if r]
    if not body:
        raise ParseError("no units")

    n = len(body)
    unit_id = np.empty(n, dtype=int)
    area_id = np.empty(n, dtype=int)
    cov = np.empty((n, len(cov_names)), dtype=int)
    yb = np.empty(n, dtype=int)
    yc = np.zeros(n)
    size = np.empty(n)
    for k, r in enumerate(body):
        line = k + 2
        if len(r) != len(header):
            raise ParseError(f"row {line}: expected {len(header)} fields, got {len(r)}")
        try:
            unit_id[k] = int(r[0])
            area_id[k] = int(r[1])
            cov[k] = [int(v) for v in r[2:iy]]
            yb[k] = int(r[iy])
            if has_cont:
                yc[k] = float(r[header.index("y_cont")])
            size[k] = float(r[-1])
        except ValueError:
            raise ParseError(f"row {line}: non-numeric field") from None
        if area_id[k] < 0 or (n_areas is not None and area_id[k] >= n_areas):
            raise ParseError(f"row {line}: unknown area label {r[1]!r}")
        if yb[k] not in (0, 1):
            raise ParseError(f"row {line}: y must be 0 or 1")
        if not size[k] > 0 or not np.isfinite(size[k]):
            raise ParseError(f"row {line}: size must be positive, got {r[-1]!r}")
        if np.any(cov[k] < 0):
            raise ParseError(f"row {line}: covariate levels must be nonnegative")
    m = int(area_id.max()) + 1 if n_areas is None else n_areas
    empty = np.flatnonzero(np.bincount(area_id, minlength=m) == 0)
    if empty.size:
        raise ParseError(f"areas without units: {empty.tolist()}")
    if levels is None:
        levels = tuple(int(c) for c in cov.max(axis=0) + 1) if cov.size else tuple()
    try:
        return Population(unit_id, area_id, cov, yb, yc, size, m, cov_names, tuple(levels))
    except ConfigError as exc:
        raise ParseError(str(exc)) from None


def grid_adjacency(m: int) -> np.ndarray:
    """Rook adjacency for ``m`` areas laid out row-major on a near-square grid."""
    ncol = int(np.ceil(np.sqrt(m)))
    W = np.zeros((m, m), dtype=int)
    for i in range(m):
        r, c = divmod(i, ncol)
        for j in (i + 1, i + ncol):
            if j < m and (j == i + ncol or divmod(j, ncol)[0] == r):
                W[i, j] = W[j, i] = 1
    return W
