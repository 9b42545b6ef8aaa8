from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from taltransfer.data import N_WEATHER, WEATHER_COLUMNS, retention_problem
from taltransfer.generator import (
    GeneratorConfig,
    GeneratorParams,
    WeatherParams,
    default_task_params,
    generate_from_config,
    generate_synthetic,
    simulate_task,
    simulate_weather,
)


def test_deterministic(small_raw):
    again = generate_synthetic(default_task_params(4, seed=1), 4, WeatherParams(seed=3))
    assert again.equals(small_raw)


def test_distinct_seeds_differ(small_raw):
    other = generate_synthetic(default_task_params(4, seed=1), 4, WeatherParams(seed=4))
    assert not other.equals(small_raw)
    a, b = small_raw.seasons()[0], other.seasons()[0]
    assert not np.array_equal(a.weather, b.weather)


def test_lte_sample_counts_default_cadence():
    ds = generate_synthetic(default_task_params(6), 8)
    counts = [s.n_lte for s in ds.seasons()]
    # 251 days at 14 +- 3 after a 0-10 day offset: between 15 and 22 samples
    assert min(counts) >= 15 and max(counts) <= 22


def test_seasons_pass_retention(small_raw):
    for s in small_raw.seasons():
        assert retention_problem(s) is None
        assert s.length in (251, 252)
        # LTE10 > LTE50 > LTE90 on the synthetic cultivars
        lte = s.lte[s.lte_mask]
        assert (lte[:, 0] > lte[:, 1]).mean() > 0.9


def test_duplicate_params_identical_labels():
    p = default_task_params(3)
    a = p[1]
    b = dataclasses.replace(a, task_id="clone")
    ds = generate_synthetic([a, b], 3)
    for x, y in zip(ds.tasks[a.task_id], ds.tasks["clone"]):
        assert np.array_equal(x.lte, y.lte, equal_nan=True)
        assert np.array_equal(x.pheno, y.pheno)
        assert np.array_equal(x.weather, y.weather)


def test_simulate_task_matches_joint_generation():
    p = default_task_params(3)
    ds = generate_synthetic(p, 2, WeatherParams(seed=9), start_year=2010)
    alone = simulate_task(p[2], range(2010, 2012), WeatherParams(seed=9))
    for x, y in zip(ds.tasks[p[2].task_id], alone):
        assert x.equals(y)


def test_weather_shared_across_tasks_and_plausible():
    ds = generate_synthetic(default_task_params(3), 2)
    seasons = [ss[0] for ss in ds.tasks.values()]
    for s in seasons[1:]:
        assert np.array_equal(s.weather, seasons[0].weather)
    w = seasons[0].weather
    tmin, tmax, tavg = (w[:, WEATHER_COLUMNS.index(c)] for c in ("at_min", "at_max", "at_avg"))
    assert (tmin <= tavg).all() and (tavg <= tmax).all()
    assert (w[:, WEATHER_COLUMNS.index("precip")] >= 0).all()
    # winter is colder than the start of the season
    assert tavg[100:160].mean() < tavg[:30].mean()


def test_hardiness_shape():
    ds = generate_synthetic(default_task_params(2), 1)
    s = ds.seasons()[0]
    lte50 = s.lte[s.lte_mask, 1]
    assert lte50.min() < -18 and lte50[-1] > lte50.min() + 5


def test_earliness_orders_budbreak():
    ds = generate_synthetic(default_task_params(6), 4)
    mean_budbreak = [np.mean([(s.event_dates[2] - s.start).days for s in ss]) for ss in ds.tasks.values()]
    assert all(a > b for a, b in zip(mean_budbreak, mean_budbreak[1:]))


def test_missing_rate_blanks_cells():
    _, w = simulate_weather(2001, WeatherParams(missing_rate=0.05, seed=2))
    assert 0.02 < np.isnan(w).mean() < 0.08
    assert w.shape[1] == N_WEATHER


def test_preconditions():
    with pytest.raises(ValueError):
        generate_synthetic(default_task_params(2)[:1], 2)
    with pytest.raises(ValueError):
        generate_synthetic(default_task_params(2), 0)
    with pytest.raises(ValueError):
        GeneratorParams("x", gdd_thresholds=(10, 5, 20, 30))
    with pytest.raises(ValueError):
        GeneratorParams("x", hardiness_max=-5.0)


def test_config_json_round_trip(tmp_path):
    cfg = GeneratorConfig(tuple(default_task_params(3)), WeatherParams(seed=5), 2, 1990)
    path = tmp_path / "g.json"
    cfg.save(path)
    back = GeneratorConfig.load(path)
    assert back == cfg
    assert generate_from_config(back).equals(generate_from_config(cfg))
