"""Synthetic multi-cultivar dormant-season data.

Weather is a seasonal sinusoid plus AR(1) anomalies and is shared by all
tasks in a given year, as cultivars grown at one site see the same station.
Each task then runs its own daily hardiness model:

* acclimation pulls LTE50 toward the task's deepest hardiness on days colder
  than the acclimation threshold, proportionally to the remaining capacity;
* deacclimation pushes it back toward the least-hardy level on days warmer
  than the deacclimation threshold, with a response that grows as chilling
  accumulates (dormancy release);
* phenology events fire when growing degree days counted from January 1
  cross four increasing thresholds.

Label noise and the sampling calendar come from a stream keyed by the task's
``rng_seed`` and the season year, so two tasks with identical parameters see
identical labels.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    N_EVENTS,
    N_WEATHER,
    Dataset,
    SeasonSeries,
    compute_feature_stats,
    encode_phenology,
    season_label,
    season_length,
    season_window,
)

# simulation keeps running past May 15 so late events still get a date
_SIM_END = (7, 31)


@dataclass(frozen=True)
class GeneratorParams:
    """Latent parameters of one synthetic cultivar."""

    task_id: str
    hardiness_init: float = -10.0  # LTE50 on Sep 7, °C
    hardiness_max: float = -24.0  # deepest reachable LTE50
    hardiness_min: float = -2.0  # least hardy level reached in spring
    acclimation_rate: float = 0.012  # per °C·day below threshold
    acclimation_threshold: float = 10.0
    deacclimation_rate: float = 0.004  # per °C·day above threshold
    deacclimation_threshold: float = 4.0
    chill_requirement: float = 60.0  # days below 5 °C for full dormancy release
    gdd_base: float = 5.0
    gdd_thresholds: tuple[float, ...] = (60.0, 110.0, 170.0, 240.0)
    lte_spread: float = 1.8  # LTE10 - LTE50 = LTE50 - LTE90
    spread_noise: float = 0.2
    obs_noise: float = 0.4
    sample_interval: int = 14
    sample_jitter: int = 3
    rng_seed: int = 0

    def __post_init__(self) -> None:
        th = tuple(float(v) for v in self.gdd_thresholds)
        if len(th) != N_EVENTS or any(a >= b for a, b in zip(th, th[1:])):
            raise ValueError(f"{self.task_id}: GDD thresholds must be {N_EVENTS} strictly increasing values, got {th}")
        object.__setattr__(self, "gdd_thresholds", th)
        if not self.hardiness_max < self.hardiness_init < self.hardiness_min:
            raise ValueError(f"{self.task_id}: need hardiness_max < hardiness_init < hardiness_min")


@dataclass(frozen=True)
class WeatherParams:
    temp_mean: float = 11.5  # annual mean of daily average air temperature
    temp_amplitude: float = 12.5
    warmest_doy: int = 200
    diurnal_range: float = 13.0
    ar_coef: float = 0.75
    ar_sd: float = 2.6
    year_sd: float = 1.2
    humidity_mean: float = 62.0
    wind_mean: float = 2.6
    rain_prob_winter: float = 0.3
    rain_prob_summer: float = 0.08
    missing_rate: float = 0.0  # fraction of weather cells blanked out
    seed: int = 0


@dataclass(frozen=True)
class GeneratorConfig:
    tasks: tuple[GeneratorParams, ...]
    weather: WeatherParams = field(default_factory=WeatherParams)
    seasons_per_task: int = 8
    start_year: int = 2000

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        tasks = tuple(
            GeneratorParams(**{**t, "gdd_thresholds": tuple(t["gdd_thresholds"])}) for t in d["tasks"]
        )
        return cls(
            tasks=tasks,
            weather=WeatherParams(**d.get("weather", {})),
            seasons_per_task=int(d.get("seasons_per_task", 8)),
            start_year=int(d.get("start_year", 2000)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_task_params(n_tasks: int = 6, seed: int = 0) -> list[GeneratorParams]:
    """A roster of cultivars spread along an earliness axis.

    Early cultivars reach phenology events at lower GDD totals and also
    deacclimate faster; hardiness depth varies on a second, partly
    independent axis. The coupling is what lets phenology carry information
    about cold hardiness.
    """
    if n_tasks < 2:
        raise ValueError("need at least two tasks")
    rng = np.random.default_rng(seed)
    earliness = np.linspace(-1.0, 1.0, n_tasks)
    depth = rng.permutation(np.linspace(-1.0, 1.0, n_tasks))
    base = np.array([60.0, 110.0, 170.0, 240.0])
    out = []
    for i in range(n_tasks):
        e, d = earliness[i], depth[i]
        out.append(
            GeneratorParams(
                task_id=f"cultivar_{i:02d}",
                hardiness_init=-10.0 + 0.8 * d,
                hardiness_max=-24.0 + 2.0 * d + 1.0 * e,
                acclimation_rate=0.012 * (1.0 + 0.15 * d),
                deacclimation_rate=0.004 * (1.0 + 0.45 * e),
                deacclimation_threshold=4.0 - 1.0 * e,
                chill_requirement=60.0 - 12.0 * e,
                gdd_thresholds=tuple(float(v) for v in base * np.exp(-0.8 * e)),
                lte_spread=1.8 + 0.3 * d,
                rng_seed=1000 + i,
            )
        )
    return out


def _dewpoint(temp: np.ndarray, rh: np.ndarray) -> np.ndarray:
    # Magnus formula
    a, b = 17.62, 243.12
    gamma = np.log(np.clip(rh, 1.0, 100.0) / 100.0) + a * temp / (b + temp)
    return b * gamma / (a - gamma)


def simulate_weather(year: int, wp: WeatherParams) -> tuple[dt.date, np.ndarray]:
    """Daily weather from Sep 7 of ``year`` through the end of the simulation horizon.

    Returns the first date and a (days, 12) matrix in ``WEATHER_COLUMNS`` order.
    """
    start, _ = season_window(year)
    stop = dt.date(year + 1, *_SIM_END)
    n = (stop - start).days + 1
    rng = np.random.default_rng([wp.seed, year, 17])
    doy = np.array([(start + dt.timedelta(days=i)).timetuple().tm_yday for i in range(n)], dtype=float)
    seasonal = np.cos(2.0 * np.pi * (doy - wp.warmest_doy) / 365.25)

    anomaly = np.empty(n)
    state = rng.normal(0.0, wp.ar_sd / np.sqrt(1.0 - wp.ar_coef**2))
    shocks = rng.normal(0.0, wp.ar_sd, size=n)
    for i in range(n):
        state = wp.ar_coef * state + shocks[i]
        anomaly[i] = state
    at_avg = wp.temp_mean + rng.normal(0.0, wp.year_sd) + wp.temp_amplitude * seasonal + anomaly
    rng_range = np.clip(wp.diurnal_range + 3.0 * seasonal + rng.normal(0.0, 2.0, n), 3.0, None)
    at_min = at_avg - 0.5 * rng_range
    at_max = at_avg + 0.5 * rng_range

    rh_noise = np.empty(n)
    s = 0.0
    for i, e in enumerate(rng.normal(0.0, 6.0, n)):
        s = 0.6 * s + e
        rh_noise[i] = s
    rh_avg = np.clip(wp.humidity_mean - 1.4 * (at_avg - wp.temp_mean) - 0.6 * anomaly + rh_noise, 15.0, 98.0)
    rh_spread = np.clip(12.0 + 0.6 * rng_range + rng.normal(0.0, 3.0, n), 4.0, None)
    rh_min = np.clip(rh_avg - rh_spread, 5.0, None)
    rh_max = np.clip(rh_avg + rh_spread, None, 100.0)

    dp_avg = _dewpoint(at_avg, rh_avg)
    dp_min = dp_avg - 1.5 - np.abs(rng.normal(0.0, 1.2, n))
    dp_max = dp_avg + 1.5 + np.abs(rng.normal(0.0, 1.2, n))

    wet_prob = wp.rain_prob_summer + (wp.rain_prob_winter - wp.rain_prob_summer) * 0.5 * (1.0 - seasonal)
    precip = np.where(rng.random(n) < wet_prob, rng.exponential(3.5, n), 0.0)

    ws_avg = rng.gamma(4.0, wp.wind_mean / 4.0, n)
    ws_max = ws_avg * (1.6 + rng.gamma(2.0, 0.3, n))

    weather = np.column_stack(
        [at_min, at_max, at_avg, rh_min, rh_max, rh_avg, dp_min, dp_max, dp_avg, precip, ws_max, ws_avg]
    )
    if wp.missing_rate > 0:
        holes = rng.random(weather.shape) < wp.missing_rate
        weather = np.where(holes, np.nan, weather)
    return start, weather


def simulate_hardiness(temp: np.ndarray, dates: Sequence[dt.date], p: GeneratorParams) -> tuple[np.ndarray, list[dt.date | None]]:
    """Latent LTE50 per day and the four event dates for one cultivar."""
    n = temp.size
    lte = np.empty(n)
    h = p.hardiness_init
    chill = 0.0
    gdd = 0.0
    events: list[dt.date | None] = [None] * N_EVENTS
    span_acc = p.hardiness_init - p.hardiness_max
    span_deacc = p.hardiness_min - p.hardiness_max
    for i in range(n):
        t = temp[i]
        lte[i] = h
        if t < 5.0:
            chill += 1.0
        release = min(1.0, chill / p.chill_requirement)
        cold = max(0.0, p.acclimation_threshold - t)
        warm = max(0.0, t - p.deacclimation_threshold)
        # acclimation fades as dormancy is released
        acc = p.acclimation_rate * cold * max(0.0, h - p.hardiness_max) / span_acc * (1.0 - 0.8 * release)
        deacc = p.deacclimation_rate * (0.25 + 4.0 * release**2) * warm * max(0.0, p.hardiness_min - h) / span_deacc * 6.0
        h = min(p.hardiness_min, max(p.hardiness_max, h - acc * span_acc + deacc))
        if dates[i].month < 8:
            gdd += max(0.0, t - p.gdd_base)
            for e in range(N_EVENTS):
                if events[e] is None and gdd >= p.gdd_thresholds[e]:
                    events[e] = dates[i]
    return lte, events


def _sample_days(n: int, rng: np.random.Generator, interval: int, jitter: int) -> np.ndarray:
    days = []
    d = int(rng.integers(0, 11))
    while d < n:
        days.append(d)
        d += interval + int(rng.integers(-jitter, jitter + 1))
    return np.asarray(days, dtype=int)


def generate_season(p: GeneratorParams, year: int, weather_start: dt.date, weather: np.ndarray) -> SeasonSeries:
    n = season_length(year)
    dates = [weather_start + dt.timedelta(days=i) for i in range(weather.shape[0])]
    temp = weather[:, 2]
    if np.isnan(temp).any():
        from .data import interpolate_series

        temp = interpolate_series(temp, "at_avg")
    latent, events = simulate_hardiness(temp, dates, p)
    rng = np.random.default_rng([p.rng_seed, year, 29])
    days = _sample_days(n, rng, p.sample_interval, p.sample_jitter)
    lte = np.full((n, 3), np.nan)
    mask = np.zeros(n, dtype=bool)
    lte50 = latent[days] + rng.normal(0.0, p.obs_noise, days.size)
    spread = p.lte_spread + rng.normal(0.0, p.spread_noise, days.size)
    lte[days, 0] = lte50 + spread
    lte[days, 1] = lte50
    lte[days, 2] = lte50 - spread
    mask[days] = True
    series = SeasonSeries(
        p.task_id, season_label(year), weather_start, weather[:n].copy(), lte, mask, np.zeros((n, N_EVENTS))
    )
    return encode_phenology(events, series)


def simulate_task(
    p: GeneratorParams, years: Sequence[int], weather: WeatherParams | None = None
) -> list[SeasonSeries]:
    """Seasons of a single task, e.g. a target that duplicates a source under fresh weather."""
    wp = weather or WeatherParams()
    return [generate_season(p, y, *simulate_weather(y, wp)) for y in years]


def generate_synthetic(
    params: Sequence[GeneratorParams],
    seasons_per_task: int = 8,
    weather: WeatherParams | None = None,
    start_year: int = 2000,
) -> Dataset:
    """Build a Dataset; a pure function of its arguments (seeds included)."""
    if len(params) < 2:
        raise ValueError("generate_synthetic needs at least two tasks")
    if seasons_per_task < 1:
        raise ValueError("seasons_per_task must be >= 1")
    ids = [p.task_id for p in params]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids: {ids}")
    wp = weather or WeatherParams()
    years = range(start_year, start_year + seasons_per_task)
    shared = {y: simulate_weather(y, wp) for y in years}
    tasks = {p.task_id: [generate_season(p, y, *shared[y]) for y in years] for p in params}
    seasons = [s for ss in tasks.values() for s in ss]
    return Dataset(tasks, compute_feature_stats(seasons))


def generate_from_config(cfg: GeneratorConfig) -> Dataset:
    return generate_synthetic(cfg.tasks, cfg.seasons_per_task, cfg.weather, cfg.start_year)
