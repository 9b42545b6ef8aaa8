from __future__ import annotations

import datetime as dt
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taltransfer.data import (
    CSV_COLUMNS,
    N_EVENTS,
    N_WEATHER,
    DataError,
    Dataset,
    FeatureStats,
    SeasonSeries,
    compute_feature_stats,
    encode_phenology,
    interpolate_series,
    interpolate_weather,
    load_csv,
    make_batch,
    normalize,
    retention_problem,
    season_label,
    season_length,
    season_window,
    write_csv,
)


def _season(task="t", year=2001, weather=None, lte_days=(10, 40), events=(150, 160, 170, 180), seed=0):
    n = season_length(year)
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(n, N_WEATHER)) if weather is None else weather
    lte = np.full((n, 3), np.nan)
    mask = np.zeros(n, dtype=bool)
    for d in lte_days:
        lte[d] = [-8.0 - d / 100, -10.0 - d / 100, -12.0 - d / 100]
        mask[d] = True
    start, _ = season_window(year)
    s = SeasonSeries(task, season_label(year), start, w, lte, mask, np.zeros((n, N_EVENTS)))
    if events is None:
        return s
    return encode_phenology([start + dt.timedelta(days=e) for e in events], s)


# --- calendar ---------------------------------------------------------------


@pytest.mark.parametrize("year,expected", [(2001, 251), (2003, 252), (1999, 252), (2099, 251), (2000, 251)])
def test_season_length(year, expected):
    # Sep 7 .. May 15: 116 days to Dec 31, then Jan 1 .. May 15 (135, or 136 in a leap year)
    feb = 29 if (year + 1) % 4 == 0 and ((year + 1) % 100 != 0 or (year + 1) % 400 == 0) else 28
    assert 116 + 31 + feb + 31 + 30 + 15 == expected
    assert season_length(year) == expected


# --- interpolation ----------------------------------------------------------


def test_interpolation_examples():
    nan = math.nan
    np.testing.assert_array_equal(interpolate_series(np.array([2.0, nan, 4.0])), [2.0, 3.0, 4.0])
    np.testing.assert_allclose(interpolate_series(np.array([1.0, nan, nan, 4.0])), [1.0, 2.0, 3.0, 4.0], atol=1e-15)
    np.testing.assert_array_equal(interpolate_series(np.array([nan, 5.0])), [5.0, 5.0])
    np.testing.assert_array_equal(interpolate_series(np.array([5.0, nan, nan])), [5.0, 5.0, 5.0])


def test_interpolation_fully_missing_names_feature():
    w = np.random.default_rng(0).normal(size=(251, N_WEATHER))
    w[:, 9] = np.nan
    with pytest.raises(DataError, match="precip"):
        interpolate_weather(_season(weather=w))


@settings(max_examples=60, deadline=None)
@given(
    st.floats(-50, 50),
    st.floats(-2, 2),
    st.lists(st.booleans(), min_size=5, max_size=60),
)
def test_interpolation_exact_on_affine_interior(a, b, observed):
    observed = np.array(observed)
    observed[0] = observed[-1] = True  # interior gaps only: edges are flat-filled
    idx = np.arange(observed.size)
    truth = a + b * idx
    vals = np.where(observed, truth, np.nan)
    out = interpolate_series(vals)
    assert np.max(np.abs(out - truth)) <= 1e-12 * max(1.0, np.max(np.abs(truth)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(-100, 100)), min_size=1, max_size=40))
def test_interpolation_never_touches_observed(values):
    vals = np.array([np.nan if v is None else v for v in values])
    if np.isnan(vals).all():
        return
    out = interpolate_series(vals)
    obs = ~np.isnan(vals)
    assert np.array_equal(out[obs], vals[obs])
    assert not np.isnan(out).any()
    # fills stay inside the observed range
    assert out.min() >= vals[obs].min() and out.max() <= vals[obs].max()


# --- normalization ----------------------------------------------------------


def test_normalize_examples():
    w = np.zeros((251, N_WEATHER))
    w[:, 0] = np.where(np.arange(251) % 2 == 0, 0.0, 10.0)
    w[:, 1:] = np.random.default_rng(1).normal(size=(251, N_WEATHER - 1))
    s = _season(weather=w)
    stats = FeatureStats(np.r_[5.0, np.zeros(N_WEATHER - 1)], np.ones(N_WEATHER) * np.r_[5.0, np.ones(N_WEATHER - 1)])
    out = normalize(Dataset({"t": [s]}, stats))
    col = out.tasks["t"][0].weather[:, 0]
    assert set(np.unique(col)) == {-1.0, 1.0}
    # unit stats leave values unchanged
    np.testing.assert_array_equal(out.tasks["t"][0].weather[:, 1:], w[:, 1:])
    # LTE untouched
    np.testing.assert_array_equal(out.tasks["t"][0].lte, s.lte)


def test_normalize_zero_variance():
    w = np.random.default_rng(1).normal(size=(251, N_WEATHER))
    w[:, 3] = 7.0
    s = _season(weather=w)
    with pytest.raises(DataError, match="zero variance.*rh_min"):
        normalize(Dataset({"t": [s]}, compute_feature_stats([s])))


def test_training_features_are_standardized(small_prepared):
    w = np.concatenate([s.weather for s in small_prepared.seasons()])
    assert np.abs(w.mean(axis=0)).max() < 1e-9
    assert np.abs(w.std(axis=0) - 1).max() < 1e-9


# --- phenology --------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 260), min_size=N_EVENTS, max_size=N_EVENTS))
def test_phenology_monotone_binary(offsets):
    offsets = sorted(offsets)
    s = _season(events=None)
    dates = [s.start + dt.timedelta(days=o) for o in offsets]
    out = encode_phenology(dates, s)
    p = out.pheno
    assert set(np.unique(p)) <= {0.0, 1.0}
    assert (np.diff(p, axis=0) >= 0).all()
    for e, o in enumerate(offsets):
        assert p[:, e].sum() == max(0, s.length - o)


def test_phenology_out_of_order_warns():
    s = _season(events=None)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        encode_phenology([s.start + dt.timedelta(days=d) for d in (50, 40, 60, 70)], s)
    assert any("out of order" in str(w.message) for w in rec)


# --- retention / CSV --------------------------------------------------------


def test_retention_rules():
    assert retention_problem(_season()) is None
    w = np.random.default_rng(0).normal(size=(251, N_WEATHER))
    w[: int(0.12 * 251)] = np.nan
    assert "missing" in retention_problem(_season(weather=w))
    assert retention_problem(_season(lte_days=())) == "no LTE samples"
    assert retention_problem(_season(lte_days=()), require_lte=False) is None


def test_csv_round_trip(tmp_path, small_raw):
    path = tmp_path / "d.csv"
    write_csv(small_raw, path)
    back = load_csv(path)
    assert back.equals(small_raw)


def test_csv_one_good_season(tmp_path):
    w = np.random.default_rng(0).normal(size=(251, N_WEATHER))
    w[np.random.default_rng(1).random(w.shape) < 0.02] = np.nan
    s = _season(weather=w, lte_days=(3, 20, 50, 90, 120))
    path = tmp_path / "one.csv"
    write_csv([s], path)
    ds = load_csv(path)
    assert ds.task_ids == ["t"] and len(ds) == 1
    assert ds.tasks["t"][0].n_lte == 5


def test_csv_drops_season_with_12_percent_missing(tmp_path, caplog):
    w = np.random.default_rng(0).normal(size=(251, N_WEATHER))
    w[np.random.default_rng(1).random(w.shape) < 0.12] = np.nan
    path = tmp_path / "bad.csv"
    write_csv([_season(weather=w)], path)
    with caplog.at_level("INFO"):
        ds = load_csv(path)
    assert len(ds) == 0
    assert "missing" in caplog.text


def test_csv_window_and_missing_days(tmp_path):
    s = _season()
    path = tmp_path / "w.csv"
    write_csv([s], path)
    lines = path.read_text().splitlines()
    # add an out-of-window row (dropped) and delete ten in-window days (become missing)
    extra = lines[1].replace(s.start.isoformat(), "2002-06-01")
    kept = lines[:50] + lines[60:] + [extra]
    path.write_text("\n".join(kept) + "\n")
    back = load_csv(path).tasks["t"][0]
    assert back.length == 251
    assert np.isnan(back.weather[49:59]).all() and not np.isnan(back.weather[[48, 59]]).any()
    assert back.missing_fraction() == pytest.approx(10 / 251)


def test_csv_errors_carry_row_numbers(tmp_path):
    path = tmp_path / "e.csv"
    write_csv([_season()], path)
    lines = path.read_text().splitlines()
    fields = lines[5].split(",")
    fields[3] = "warm"
    lines[5] = ",".join(fields)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="row 6"):
        load_csv(path)


def test_csv_unknown_task_and_header(tmp_path):
    path = tmp_path / "u.csv"
    write_csv([_season(task="zin")], path)
    with pytest.raises(DataError, match="unknown task"):
        load_csv(path, known_tasks=["merlot"])
    path.write_text("a,b,c\n")
    with pytest.raises(DataError, match="header"):
        load_csv(path)


# per cultivar: LTE seasons, phenology seasons, mutual seasons, LTE samples in mutual seasons
ROSTER = {
    "Barbera": (14, 7, 7, 84),
    "Cabernet Sauvignon": (32, 16, 16, 465),
    "Chardonnay": (25, 18, 15, 450),
    "Chenin Blanc": (17, 17, 9, 109),
    "Grenache": (14, 16, 8, 97),
    "Malbec": (17, 16, 8, 140),
    "Merlot": (25, 20, 17, 489),
    "Mourvedre": (12, 7, 5, 69),
    "Nebbiolo": (14, 7, 7, 85),
    "Pinot Gris": (17, 16, 9, 111),
    "Riesling": (32, 18, 18, 408),
    "Sangiovese": (15, 7, 7, 86),
    "Sauvignon Blanc": (12, 7, 7, 87),
    "Semillon": (13, 16, 7, 119),
    "Syrah": (22, 4, 4, 106),
    "Viognier": (17, 8, 5, 62),
    "Zinfandel": (14, 17, 8, 94),
}


def test_cultivar_roster_keeps_mutual_seasons(tmp_path):
    rng = np.random.default_rng(0)
    seasons = []
    for task, (n_lte, n_ph, n_mut, n_samples) in ROSTER.items():
        total = n_lte + n_ph - n_mut
        per = np.full(n_mut, n_samples // n_mut)
        per[: n_samples % n_mut] += 1
        for k in range(total):
            year = 1988 + k
            has_lte = k < n_lte
            has_ph = k < n_mut or k >= n_lte
            days = ()
            if has_lte:
                count = per[k] if k < n_mut else 5
                days = tuple(sorted(rng.choice(251, size=count, replace=False)))
            seasons.append(
                _season(task, year, weather=rng.normal(size=(season_length(year), N_WEATHER)), lte_days=days, events=(150, 160, 170, 180) if has_ph else None)
            )
    path = tmp_path / "t1.csv"
    write_csv(seasons, path)
    ds = load_csv(path)
    for task, (_, _, n_mut, n_samples) in ROSTER.items():
        assert len(ds.tasks[task]) == n_mut, task
        assert sum(s.n_lte for s in ds.tasks[task]) == n_samples, task


def test_make_batch_pads_and_masks():
    a, b = _season(year=2001), _season(year=2003)
    batch = make_batch([a, b])
    assert batch.x.shape == (2, 252, N_WEATHER)
    assert batch.day_mask[0].sum() == 251 and batch.day_mask[1].sum() == 252
    assert batch.lte_mask.sum() == 4
    assert not np.isnan(batch.lte).any()
    w = np.array(a.weather)
    w[5, 0] = np.nan
    with pytest.raises(DataError, match="interpolate"):
        make_batch([_season(weather=w)])


def test_season_is_read_only():
    s = _season()
    with pytest.raises(ValueError):
        s.weather[0, 0] = 1.0
    assert len(s.days) == 251 and s.days[10].lte is not None and s.days[11].lte is None


def test_without_lte_keeps_everything_else():
    s = _season()
    a = s.without_lte()
    assert a.n_lte == 0 and np.isnan(a.lte).all()
    assert np.array_equal(a.pheno, s.pheno) and np.array_equal(a.weather, s.weather)


def test_csv_columns():
    assert len(CSV_COLUMNS) == 3 + N_WEATHER + 3 + N_EVENTS
