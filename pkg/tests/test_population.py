import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from unitsae.population import (
    ConfigError,
    GeneratorConfig,
    ParseError,
    Population,
    generate_population,
    grid_adjacency,
    index_cells,
    read_population,
    write_population,
)


def small_config(**kw):
    base = dict(m=4, area_sizes=(50, 60, 70, 80), seed=3)
    base.update(kw)
    return GeneratorConfig(**base)


def test_generator_is_deterministic():
    a = generate_population(GeneratorConfig())
    b = generate_population(GeneratorConfig())
    assert a == b
    buf_a, buf_b = io.StringIO(), io.StringIO()
    write_population(a, buf_a)
    write_population(b, buf_b)
    assert buf_a.getvalue() == buf_b.getvalue()


def test_default_scale():
    pop = generate_population(GeneratorConfig())
    assert pop.total_size == 20000
    assert pop.n_areas == 20
    assert np.all(pop.area_sizes == 1000)
    assert set(np.unique(pop.y_binary)) <= {0, 1}
    assert np.all(pop.size_value > 0)


def test_symmetric_case_gives_half():
    cfg = GeneratorConfig(m=5, area_sizes=(4000,) * 5, beta=(0.0,) * 7, sigma_u=0.0, seed=1)
    pop = generate_population(cfg)
    means = pop.area_means()
    assert np.all(np.abs(means - 0.5) < 4 * np.sqrt(0.25 / 4000))


def test_noninformative_sizes_are_independent_of_y():
    pop = generate_population(GeneratorConfig(c1=0.0, size_step=0.0, seed=9))
    r, p = spearmanr(pop.size_value, pop.y_binary)
    assert abs(r) < 0.03


def test_informativeness_monotone_in_c1():
    rs = {c1: [] for c1 in (0.0, 0.5, 1.0)}
    for seed in range(200):
        for c1 in rs:
            pop = generate_population(small_config(c1=c1, seed=seed, size_step=0.0))
            rs[c1].append(spearmanr(pop.size_value, pop.y_binary)[0])
    means = [np.mean(rs[c]) for c in (0.0, 0.5, 1.0)]
    assert means[0] < means[1] < means[2]


@pytest.mark.parametrize(
    "kw",
    [dict(m=0), dict(m=3, area_sizes=(10, 10)), dict(area_sizes=(0, 5, 5, 5)), dict(beta=(1.0, 2.0)),
     dict(sigma_u=-1.0)],
)
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        small_config(**kw).validate()


def test_config_json_round_trip():
    cfg = small_config(sigma_size=0.7)
    assert GeneratorConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigError):
        GeneratorConfig.from_json('{"nope": 1}')


def test_round_trip(tmp_path):
    pop = generate_population(small_config(area_sizes=(25, 25, 25, 25)))
    assert pop.total_size == 100
    p = tmp_path / "pop.csv"
    write_population(pop, p)
    back = read_population(p, n_areas=pop.n_areas, levels=pop.levels)
    assert back == pop


def test_negative_size_names_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("unit_id,area_id,age,y,size\n0,0,1,1,2.0\n1,0,0,0,-3\n")
    with pytest.raises(ParseError, match="row 3"):
        read_population(p)


def test_unknown_area_label(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("unit_id,area_id,age,y,size\n0,0,1,1,2.0\n1,7,0,0,3\n")
    with pytest.raises(ParseError, match="row 3"):
        read_population(p, n_areas=2)


def test_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(ParseError, match="no units"):
        read_population(p)


def test_single_cell_population():
    pop = Population(np.arange(6), np.zeros(6, int), np.zeros((6, 1), int), np.array([0, 1, 0, 1, 1, 0]),
                     np.zeros(6), np.ones(6), 1, ("sex",), (1,))
    cells = index_cells(pop, [0, 2])
    assert len(cells) == 1
    assert cells[0].population_count == 6 and cells[0].sample_count == 2


def test_hand_built_cells():
    # 2 areas x 2 sex levels, 8 units
    area = np.array([0, 0, 0, 1, 1, 1, 1, 0])
    sex = np.array([0, 1, 1, 0, 0, 1, 0, 0])
    y = np.array([1, 0, 1, 1, 0, 0, 1, 1])
    pop = Population(np.arange(8), area, sex[:, None], y, np.zeros(8), np.ones(8), 2, ("sex",), (2,))
    cells = {(c.area_id, c.covariate_key): c for c in index_cells(pop, [0, 1, 4])}
    assert len(cells) == 4
    assert cells[(0, (0,))].population_count == 2
    assert cells[(0, (1,))].population_count == 2
    assert cells[(1, (0,))].population_count == 3
    assert cells[(1, (1,))].population_count == 1
    assert cells[(0, (0,))].sample_count == 1 and cells[(0, (0,))].sample_sum == 1
    assert cells[(1, (0,))].sample_count == 1 and cells[(1, (0,))].sample_sum == 0
    assert cells[(1, (1,))].sample_count == 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 200))
def test_cells_partition_population(seed, n):
    pop = generate_population(small_config(seed=seed))
    rng = np.random.default_rng(seed)
    sample = rng.choice(pop.total_size, size=n, replace=False)
    cells = index_cells(pop, sample)
    assert sum(c.population_count for c in cells) == pop.total_size
    assert sum(c.sample_count for c in cells) == n
    assert all(c.population_count >= c.sample_count >= 0 for c in cells)
    assert sum(c.sample_sum for c in cells) == pop.y_binary[sample].sum()


def test_grid_adjacency_symmetric():
    W = grid_adjacency(20)
    assert np.array_equal(W, W.T)
    assert np.all(np.diag(W) == 0)
    assert np.all(W.sum(axis=1) >= 2)
    # 5 x 4 grid: 2*(5*3 + 4*4) / 2 edges
    assert W.sum() // 2 == 31


def test_log_size_grid():
    pop = generate_population(small_config(size_step=0.0, log_size_step=0.25))
    ls = np.log(pop.size_value) / 0.25
    assert np.allclose(ls, np.round(ls))
