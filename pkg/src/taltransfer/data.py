"""Season records, CSV ingestion and preprocessing.

A season runs from September 7 through May 15 of the following year. Each
day carries 12 weather features, an optional LTE triple and four cumulative
phenology flags. Arrays are stored column-wise on ``SeasonSeries``; the
``days`` property materialises per-day records when they are wanted.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

WEATHER_COLUMNS = (
    "at_min", "at_max", "at_avg",
    "rh_min", "rh_max", "rh_avg",
    "dp_min", "dp_max", "dp_avg",
    "precip",
    "ws_max", "ws_avg",
)
LTE_COLUMNS = ("lte10", "lte50", "lte90")
EVENT_COLUMNS = ("ev_first_swell", "ev_full_swell", "ev_budbreak", "ev_first_leaf")
CSV_COLUMNS = ("task_id", "season", "date") + WEATHER_COLUMNS + LTE_COLUMNS + EVENT_COLUMNS

N_WEATHER = len(WEATHER_COLUMNS)
N_EVENTS = len(EVENT_COLUMNS)
SEASON_START = (9, 7)
SEASON_END = (5, 15)
MAX_MISSING_FRACTION = 0.10


class DataError(ValueError):
    """Malformed or unusable input data."""


def season_window(start_year: int) -> tuple[dt.date, dt.date]:
    return dt.date(start_year, *SEASON_START), dt.date(start_year + 1, *SEASON_END)


def season_length(start_year: int) -> int:
    start, end = season_window(start_year)
    return (end - start).days + 1


def season_start_year(label: str) -> int:
    m = re.match(r"\s*(\d{4})", label)
    if not m:
        raise DataError(f"season label {label!r} does not start with a year")
    return int(m.group(1))


def season_label(start_year: int) -> str:
    return f"{start_year}-{start_year + 1}"


@dataclass(frozen=True)
class DayRecord:
    date: dt.date
    weather: np.ndarray  # (12,), NaN = missing
    lte: np.ndarray | None  # (3,) when sampled
    pheno: np.ndarray  # (4,) 0/1


@dataclass(frozen=True, eq=False)
class SeasonSeries:
    """One dormant season of one task.

    ``lte`` holds NaN on unsampled days and ``lte_mask`` marks sampled days;
    a day is either fully sampled (all three LTE values) or not at all.
    """

    task_id: str
    season_label: str
    start: dt.date
    weather: np.ndarray  # (T, 12)
    lte: np.ndarray  # (T, 3)
    lte_mask: np.ndarray  # (T,) bool
    pheno: np.ndarray  # (T, 4) float 0/1
    event_dates: tuple[dt.date | None, ...] = (None,) * N_EVENTS

    def __post_init__(self) -> None:
        n = self.weather.shape[0]
        if self.weather.shape != (n, N_WEATHER):
            raise DataError(f"weather must be (T, {N_WEATHER}), got {self.weather.shape}")
        if self.lte.shape != (n, 3) or self.lte_mask.shape != (n,) or self.pheno.shape != (n, N_EVENTS):
            raise DataError("lte / lte_mask / pheno lengths disagree with weather")
        for arr in (self.weather, self.lte, self.lte_mask, self.pheno):
            arr.setflags(write=False)

    @property
    def length(self) -> int:
        return self.weather.shape[0]

    @property
    def key(self) -> tuple[str, str]:
        return (self.task_id, self.season_label)

    @property
    def dates(self) -> list[dt.date]:
        return [self.start + dt.timedelta(days=i) for i in range(self.length)]

    @property
    def days(self) -> list[DayRecord]:
        return [
            DayRecord(
                date=d,
                weather=self.weather[i],
                lte=self.lte[i] if self.lte_mask[i] else None,
                pheno=self.pheno[i],
            )
            for i, d in enumerate(self.dates)
        ]

    @property
    def n_lte(self) -> int:
        return int(self.lte_mask.sum())

    def missing_fraction(self) -> float:
        return float(np.isnan(self.weather).mean())

    def without_lte(self) -> "SeasonSeries":
        """Copy with every LTE value removed (auxiliary labels only)."""
        return replace(
            self,
            lte=np.full_like(self.lte, np.nan),
            lte_mask=np.zeros_like(self.lte_mask),
        )

    def equals(self, other: "SeasonSeries") -> bool:
        return (
            self.task_id == other.task_id
            and self.season_label == other.season_label
            and self.start == other.start
            and self.event_dates == other.event_dates
            and np.array_equal(self.weather, other.weather, equal_nan=True)
            and np.array_equal(self.lte, other.lte, equal_nan=True)
            and np.array_equal(self.lte_mask, other.lte_mask)
            and np.array_equal(self.pheno, other.pheno)
        )


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureStats":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass(frozen=True)
class Dataset:
    tasks: dict[str, list[SeasonSeries]]
    feature_stats: FeatureStats | None = None

    @property
    def task_ids(self) -> list[str]:
        return list(self.tasks)

    def seasons(self, task_ids: Iterable[str] | None = None) -> list[SeasonSeries]:
        ids = self.task_ids if task_ids is None else list(task_ids)
        return [s for t in ids for s in self.tasks[t]]

    def __iter__(self) -> Iterator[SeasonSeries]:
        return iter(self.seasons())

    def __len__(self) -> int:
        return sum(len(v) for v in self.tasks.values())

    def subset(self, task_ids: Iterable[str]) -> "Dataset":
        return Dataset({t: list(self.tasks[t]) for t in task_ids}, self.feature_stats)

    def equals(self, other: "Dataset") -> bool:
        if list(self.tasks) != list(other.tasks):
            return False
        for t in self.tasks:
            a, b = self.tasks[t], other.tasks[t]
            if len(a) != len(b) or not all(x.equals(y) for x, y in zip(a, b)):
                return False
        if (self.feature_stats is None) != (other.feature_stats is None):
            return False
        if self.feature_stats is not None:
            return np.array_equal(self.feature_stats.mean, other.feature_stats.mean) and np.array_equal(
                self.feature_stats.std, other.feature_stats.std
            )
        return True


# ---------------------------------------------------------------------------
# preprocessing


def interpolate_series(values: np.ndarray, name: str = "feature") -> np.ndarray:
    """Linear fill of interior NaN gaps; edge gaps take the nearest observed value."""
    values = np.asarray(values, dtype=float)
    observed = ~np.isnan(values)
    if not observed.any():
        raise DataError(f"weather feature {name!r} has no observed values in the season")
    if observed.all():
        return values.copy()
    idx = np.arange(values.size)
    out = values.copy()
    # np.interp clamps to the end values outside the observed range
    out[~observed] = np.interp(idx[~observed], idx[observed], values[observed])
    return out


def interpolate_weather(series: SeasonSeries) -> SeasonSeries:
    if not np.isnan(series.weather).any():
        return series
    filled = np.column_stack(
        [interpolate_series(series.weather[:, j], WEATHER_COLUMNS[j]) for j in range(N_WEATHER)]
    )
    return replace(series, weather=filled)


def compute_feature_stats(seasons: Sequence[SeasonSeries]) -> FeatureStats:
    """Per-feature mean and population std over every day of ``seasons``."""
    if not seasons:
        raise DataError("cannot compute feature statistics of zero seasons")
    stacked = np.concatenate([interpolate_weather(s).weather for s in seasons], axis=0)
    return FeatureStats(stacked.mean(axis=0), stacked.std(axis=0))


def _check_stats(stats: FeatureStats) -> None:
    for j, sd in enumerate(stats.std):
        if not sd > 0:
            raise DataError(f"zero variance in weather feature {WEATHER_COLUMNS[j]!r}")


def normalize_season(series: SeasonSeries, stats: FeatureStats) -> SeasonSeries:
    _check_stats(stats)
    return replace(series, weather=(series.weather - stats.mean) / stats.std)


def normalize(dataset: Dataset, stats: FeatureStats | None = None) -> Dataset:
    """Standardise weather with ``stats`` (default: the dataset's own). LTE stays in °C."""
    stats = stats if stats is not None else dataset.feature_stats
    if stats is None:
        raise DataError("normalize: feature statistics have not been computed")
    _check_stats(stats)
    return Dataset(
        {t: [normalize_season(s, stats) for s in ss] for t, ss in dataset.tasks.items()},
        stats,
    )


def prepare(dataset: Dataset, stats: FeatureStats | None = None) -> Dataset:
    """Interpolate then normalise every season."""
    filled = Dataset(
        {t: [interpolate_weather(s) for s in ss] for t, ss in dataset.tasks.items()},
        dataset.feature_stats,
    )
    return normalize(filled, stats)


def encode_phenology(
    event_dates: Sequence[dt.date | None], season: SeasonSeries
) -> SeasonSeries:
    """Cumulative per-event indicators: flag e is 1 on and after its event date."""
    if len(event_dates) != N_EVENTS:
        raise DataError(f"expected {N_EVENTS} event dates, got {len(event_dates)}")
    known = [d for d in event_dates if d is not None]
    if any(a > b for a, b in zip(known, known[1:])):
        warnings.warn(
            f"{season.task_id} {season.season_label}: phenology events out of order {known}",
            stacklevel=2,
        )
    offsets = np.arange(season.length)
    flags = np.zeros((season.length, N_EVENTS))
    for e, d in enumerate(event_dates):
        if d is None:
            continue
        flags[:, e] = offsets >= (d - season.start).days
    return replace(season, pheno=flags, event_dates=tuple(event_dates))


# ---------------------------------------------------------------------------
# CSV


def _parse_float(text: str, row: int, col: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError as exc:
        raise DataError(f"row {row}: column {col!r} is not a number: {text!r}") from exc


def _parse_date(text: str, row: int, col: str, allow_empty: bool = False) -> dt.date | None:
    text = text.strip()
    if text == "" and allow_empty:
        return None
    try:
        return dt.date.fromisoformat(text)
    except ValueError as exc:
        raise DataError(f"row {row}: column {col!r} is not an ISO date: {text!r}") from exc


def retention_problem(series: SeasonSeries, require_lte: bool = True) -> str | None:
    """Why ``series`` must be dropped, or None when it is usable.

    Target files that carry phenology only pass ``require_lte=False``.
    """
    missing = series.missing_fraction()
    if missing >= MAX_MISSING_FRACTION:
        return f"{missing:.1%} of weather cells missing"
    if require_lte and series.n_lte == 0:
        return "no LTE samples"
    if any(d is None for d in series.event_dates):
        return "missing phenology event dates"
    return None


def load_csv(path: str | Path, known_tasks: Iterable[str] | None = None, require_lte: bool = True) -> Dataset:
    """Read one-row-per-day season data and apply the retention rules.

    Rows outside the Sep 7 - May 15 window of their season are discarded;
    days with no row count as fully missing weather. Seasons that fail a
    retention rule are dropped and logged. Feature statistics come from the
    interpolated weather of the retained seasons.
    """
    path = Path(path)
    roster = None if known_tasks is None else set(known_tasks)
    grouped: dict[tuple[str, str], dict] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise DataError(f"{path}: header does not match the expected columns {list(CSV_COLUMNS)}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise DataError(f"row {rowno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            task, label = row[0].strip(), row[1].strip()
            if not task:
                raise DataError(f"row {rowno}: empty task_id")
            if roster is not None and task not in roster:
                raise DataError(f"row {rowno}: unknown task id {task!r}")
            try:
                year = season_start_year(label)
            except DataError as exc:
                raise DataError(f"row {rowno}: {exc}") from exc
            day = _parse_date(row[2], rowno, "date")
            weather = [_parse_float(v, rowno, c) for v, c in zip(row[3:15], WEATHER_COLUMNS)]
            lte = [_parse_float(v, rowno, c) for v, c in zip(row[15:18], LTE_COLUMNS)]
            events = tuple(_parse_date(v, rowno, c, allow_empty=True) for v, c in zip(row[18:22], EVENT_COLUMNS))
            rec = grouped.setdefault((task, label), {"year": year, "days": {}, "events": events, "row": rowno})
            if rec["events"] != events:
                raise DataError(f"row {rowno}: event dates differ from earlier rows of {task} {label}")
            start, end = season_window(year)
            if not (start <= day <= end):
                continue
            if day in rec["days"]:
                raise DataError(f"row {rowno}: duplicate date {day} for {task} {label}")
            lte_arr = np.asarray(lte)
            if np.isnan(lte_arr).any() and not np.isnan(lte_arr).all():
                raise DataError(f"row {rowno}: LTE triple must be all present or all missing")
            rec["days"][day] = (weather, lte_arr)

    tasks: dict[str, list[SeasonSeries]] = {}
    for (task, label), rec in grouped.items():
        start, _ = season_window(rec["year"])
        n = season_length(rec["year"])
        weather = np.full((n, N_WEATHER), np.nan)
        lte = np.full((n, 3), np.nan)
        for day, (w, l) in rec["days"].items():
            i = (day - start).days
            weather[i] = w
            lte[i] = l
        mask = ~np.isnan(lte).any(axis=1)
        series = SeasonSeries(task, label, start, weather, lte, mask, np.zeros((n, N_EVENTS)))
        series = encode_phenology(rec["events"], series) if all(rec["events"]) else replace(series, event_dates=rec["events"])
        problem = retention_problem(series, require_lte)
        tasks.setdefault(task, [])
        if problem:
            logger.info("dropping %s %s: %s", task, label, problem)
            continue
        tasks[task].append(series)
    tasks = {t: ss for t, ss in tasks.items() if ss}
    kept = [s for ss in tasks.values() for s in ss]
    stats = compute_feature_stats(kept) if kept else None
    return Dataset(tasks, stats)


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_csv(dataset: Dataset | Iterable[SeasonSeries], path: str | Path) -> None:
    """Write seasons in the ingestion schema; floats use repr so reloading is exact."""
    seasons = dataset.seasons() if isinstance(dataset, Dataset) else list(dataset)
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in seasons:
            events = ["" if d is None else d.isoformat() for d in s.event_dates]
            for i, day in enumerate(s.dates):
                lte = s.lte[i] if s.lte_mask[i] else [math.nan] * 3
                writer.writerow(
                    [s.task_id, s.season_label, day.isoformat()]
                    + [_fmt(v) for v in s.weather[i]]
                    + [_fmt(v) for v in lte]
                    + events
                )


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class SeasonBatch:
    """Seasons padded to a common length; padded days carry no supervision."""

    tasks: tuple[str, ...]
    x: np.ndarray  # (B, T, 12)
    lte: np.ndarray  # (B, T, 3), 0 where unsampled
    lte_mask: np.ndarray  # (B, T) float
    pheno: np.ndarray  # (B, T, 4)
    day_mask: np.ndarray  # (B, T) float
    lengths: tuple[int, ...] = field(default=())


def make_batch(seasons: Sequence[SeasonSeries]) -> SeasonBatch:
    if not seasons:
        raise DataError("empty batch")
    steps = max(s.length for s in seasons)
    b = len(seasons)
    x = np.zeros((b, steps, N_WEATHER))
    lte = np.zeros((b, steps, 3))
    lte_mask = np.zeros((b, steps))
    pheno = np.zeros((b, steps, N_EVENTS))
    day_mask = np.zeros((b, steps))
    for i, s in enumerate(seasons):
        if np.isnan(s.weather).any():
            raise DataError(f"{s.task_id} {s.season_label}: weather still has gaps; interpolate first")
        n = s.length
        x[i, :n] = s.weather
        lte_mask[i, :n] = s.lte_mask
        lte[i, :n] = np.where(s.lte_mask[:, None], s.lte, 0.0)
        pheno[i, :n] = s.pheno
        day_mask[i, :n] = 1.0
    return SeasonBatch(
        tuple(s.task_id for s in seasons), x, lte, lte_mask, pheno, day_mask, tuple(s.length for s in seasons)
    )
