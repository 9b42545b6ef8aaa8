"""Leave-one-task-out benchmark, sweeps, reports and the identifiability oracle."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, FeatureStats, SeasonSeries, compute_feature_stats, interpolate_weather, load_csv, normalize_season
from .generator import GeneratorConfig, WeatherParams, default_task_params, generate_from_config, generate_synthetic, simulate_task
from .models import EMBEDDING, MULTIHEAD, ModelParams
from .tal import TalConfig, TalError, compute_weights, optimize_embedding, select_best_source, source_set, transfer
from .training import TrainConfig, eval_rmse, predict_fn, train

logger = logging.getLogger(__name__)

LTE_ORACLE = "LTE Optim.*"
SUPERVISED = "Supervised*"

DEFAULT_METHODS = (
    TalConfig(scheme="averaging", task_set="S", weighting="uniform"),
    TalConfig(scheme="averaging", task_set="S", weighting="exp"),
    TalConfig(scheme="averaging", task_set="S+CR", weighting="uniform"),
    TalConfig(scheme="averaging", task_set="S+CR", weighting="exp"),
    TalConfig(scheme="best_source"),
    TalConfig(scheme="opt_embedding"),
)


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig | None = None  # None and no csv: default roster, weather seeded by master_seed
    csv: str | None = None
    trials: int = 3
    holdout: int = 2
    train: TrainConfig = field(default_factory=TrainConfig)
    methods: tuple[TalConfig, ...] = DEFAULT_METHODS
    oracles: bool = True
    output_dir: str | None = None
    master_seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise HarnessError("trials must be >= 1")
        if self.holdout < 1:
            raise HarnessError("holdout must be >= 1")
        if self.generator is not None and self.csv is not None:
            raise HarnessError("give either a generator config or a csv path, not both")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise HarnessError(f"method names must be unique: {names}")
        for m in self.methods:
            check_method(m, self.train.variant)

    def to_dict(self) -> dict:
        return {
            "generator": None if self.generator is None else self.generator.to_dict(),
            "csv": self.csv,
            "trials": self.trials,
            "holdout": self.holdout,
            "train": self.train.to_dict(),
            "methods": [m.to_dict() for m in self.methods],
            "oracles": self.oracles,
            "output_dir": self.output_dir,
            "master_seed": self.master_seed,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        if d.get("generator") is not None:
            d["generator"] = GeneratorConfig.from_dict(d["generator"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "methods" in d:
            d["methods"] = tuple(TalConfig.from_dict(m) for m in d["methods"])
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def check_method(method: TalConfig, variant: str) -> None:
    if variant == MULTIHEAD and (method.scheme == "opt_embedding" or method.random_kind is not None):
        raise HarnessError(f"method {method.name!r} needs an Embedding model, but the experiment trains {variant}")


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed for a (master, trial, target, ...) key."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.csv is not None:
        return load_csv(config.csv)
    gen = config.generator or GeneratorConfig(
        tuple(default_task_params(6, seed=0)), WeatherParams(seed=config.master_seed), 8, 2000
    )
    return generate_from_config(gen)


def split_holdout(dataset: Dataset, holdout: int, rng: np.random.Generator) -> dict[str, tuple[list[int], list[int]]]:
    """Per task (training indices, held-out indices), held-out chosen uniformly without replacement."""
    out = {}
    for task in dataset.task_ids:
        n = len(dataset.tasks[task])
        if n - holdout < 1:
            raise HarnessError(f"{task}: {n} seasons leave no training season after holding out {holdout}")
        test = sorted(int(i) for i in rng.choice(n, size=holdout, replace=False))
        out[task] = ([i for i in range(n) if i not in test], test)
    return out


def prepare_seasons(seasons: Sequence[SeasonSeries], stats: FeatureStats) -> list[SeasonSeries]:
    return [normalize_season(interpolate_weather(s), stats) for s in seasons]


# ---------------------------------------------------------------------------
# holdout audit


@dataclass
class AuditRecord:
    """Every season that reached a training or transfer input for one (trial, target)."""

    trial: int
    target: str
    heldout: list[tuple[str, str]]
    heldout_lte: np.ndarray
    train_inputs: list[tuple[str, str]] = field(default_factory=list)
    aux_inputs: list[tuple[str, str]] = field(default_factory=list)
    oracle_inputs: list[tuple[str, str]] = field(default_factory=list)
    aux_lte_count: int = 0
    input_lte: list[np.ndarray] = field(default_factory=list)

    def saw(self, kind: str, seasons: Sequence[SeasonSeries]) -> None:
        keys = [s.key for s in seasons]
        getattr(self, f"{kind}_inputs").extend(keys)
        if kind == "aux":
            self.aux_lte_count += sum(s.n_lte for s in seasons)
        for s in seasons:
            if s.n_lte:
                self.input_lte.append(s.lte[s.lte_mask].ravel())


@dataclass
class AuditResult:
    ok: bool
    checked: int
    violations: list[str]


def audit_holdout(records: Sequence[AuditRecord]) -> AuditResult:
    """Confirm that no held-out LTE value reached any training, selection or weighting input."""
    violations = []
    for r in records:
        held = set(r.heldout)
        where = f"trial {r.trial}, target {r.target}"
        for kind in ("train", "aux", "oracle"):
            leaked = held.intersection(getattr(r, f"{kind}_inputs"))
            if leaked:
                violations.append(f"{where}: held-out seasons {sorted(leaked)} in {kind} inputs")
        if r.aux_lte_count:
            violations.append(f"{where}: auxiliary data carried {r.aux_lte_count} LTE samples")
        if r.input_lte and r.heldout_lte.size:
            seen = np.concatenate(r.input_lte)
            hits = np.isin(r.heldout_lte, seen)
            if hits.any():
                violations.append(f"{where}: {int(hits.sum())} held-out LTE values appear among inputs")
    return AuditResult(not violations, len(records), violations)


# ---------------------------------------------------------------------------
# report


@dataclass
class ExperimentReport:
    tasks: list[str]
    columns: list[str]
    per_trial: np.ndarray  # (trials, tasks, columns), NaN where not run
    metadata: dict = field(default_factory=dict)
    audit: list[AuditRecord] = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        return self.per_trial.mean(axis=0)

    def mean_row(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def mean(self, name: str) -> float:
        return float(self.mean_row()[self.columns.index(name)])

    def subset(self, columns: Sequence[str]) -> "ExperimentReport":
        idx = [self.columns.index(c) for c in columns]
        return ExperimentReport(self.tasks, list(columns), self.per_trial[:, :, idx], self.metadata, self.audit)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(["task"] + [_csv_field(c) for c in self.columns]) + "\n")
        for t, row in zip(self.tasks + ["Mean"], np.vstack([self.values, self.mean_row()])):
            buf.write(",".join([t] + [f"{v:.6f}" for v in row]) + "\n")
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text())

    def render(self) -> str:
        width = max(len(t) for t in self.tasks + ["Mean"])
        cols = [max(len(c), 6) for c in self.columns]
        lines = [" ".join([" " * width] + [c.rjust(w) for c, w in zip(self.columns, cols)])]
        for t, row in zip(self.tasks, self.values):
            lines.append(" ".join([t.ljust(width)] + [f"{v:.2f}".rjust(w) for v, w in zip(row, cols)]))
        lines.append(" ".join(["Mean".ljust(width)] + [f"{v:.2f}".rjust(w) for v, w in zip(self.mean_row(), cols)]))
        return "\n".join(lines) + "\n"


def _csv_field(text: str) -> str:
    return f'"{text}"' if "," in text else text


# ---------------------------------------------------------------------------
# leave-one-task-out


@dataclass
class _Job:
    trial: int
    target_index: int
    target: str
    sources: list[str]
    seed: int
    train_seasons: dict[str, list[SeasonSeries]]
    target_train: list[SeasonSeries]
    target_test: list[SeasonSeries]
    train_config: TrainConfig
    methods: tuple[TalConfig, ...]
    lte_oracle: bool


@dataclass
class _JobResult:
    trial: int
    target: str
    rmse: dict[str, float]
    meta: dict
    audit: AuditRecord


def _run_job(job: _Job) -> _JobResult:
    t0 = time.perf_counter()
    raw_src = [s for t in job.sources for s in job.train_seasons[t]]
    stats = compute_feature_stats(raw_src)
    src = Dataset({t: prepare_seasons(job.train_seasons[t], stats) for t in job.sources}, stats)
    heldout = [s.key for s in job.target_test]
    held_lte = np.concatenate([s.lte[s.lte_mask].ravel() for s in job.target_test]) if job.target_test else np.zeros(0)
    audit = AuditRecord(job.trial, job.target, heldout, held_lte)
    audit.saw("train", src.seasons())
    model = train(src, job.sources, dataclasses.replace(job.train_config, rng_seed=job.seed))
    fp = model.fingerprint()
    target_train = prepare_seasons(job.target_train, stats)
    aux = [s.without_lte() for s in target_train]
    test = prepare_seasons(job.target_test, stats)
    test_x = [s.weather for s in test]
    rmse, methods_meta = {}, {}
    for i, m in enumerate(job.methods):
        cfg = dataclasses.replace(m, rng_seed=derive_seed(job.seed, i))
        audit.saw("aux", aux)
        try:
            res = transfer(model, aux, cfg)
        except Exception as exc:
            raise HarnessError(f"trial {job.trial}, target {job.target}, method {m.name!r}: {exc}") from exc
        preds = res.predict(model, test_x)
        rmse[m.name] = _rmse(preds, test)
        methods_meta[m.name] = {
            "model": fp,
            "entries": len(res.task_set),
            "work": len(res.task_set) * (len(aux) + len(test)),
            "chosen": res.chosen,
        }
    if job.lte_oracle:
        audit.saw("oracle", target_train)
        search = optimize_embedding(model, target_train, TalConfig(scheme="opt_embedding"), objective="lte")
        pred = predict_fn(model, embedding=search.embedding)
        rmse[LTE_ORACLE] = eval_rmse(pred, test)
        methods_meta[LTE_ORACLE] = {"model": fp, "entries": 1, "work": len(target_train) + len(test), "chosen": None}
    meta = {
        "trial": job.trial,
        "target": job.target,
        "seed": job.seed,
        "model": fp,
        "train_seasons": len(raw_src),
        "aux_seasons": len(aux),
        "test_seasons": len(test),
        "methods": methods_meta,
        "seconds": round(time.perf_counter() - t0, 3),
    }
    logger.info("trial %d target %s: %s", job.trial, job.target, {k: round(v, 3) for k, v in rmse.items()})
    return _JobResult(job.trial, job.target, rmse, meta, audit)


def _rmse(preds: Sequence[np.ndarray], seasons: Sequence[SeasonSeries]) -> float:
    err = np.concatenate([p[s.lte_mask, 1] - s.lte[s.lte_mask, 1] for p, s in zip(preds, seasons)])
    if err.size == 0:
        raise HarnessError("held-out seasons carry no LTE samples")
    return float(np.sqrt(np.mean(err * err)))


def _supervised(trial: int, seed: int, dataset: Dataset, split, cfg: TrainConfig) -> tuple[dict[str, float], str]:
    """Upper bound: one model trained with every task's training-split LTE included."""
    raw = {t: [dataset.tasks[t][i] for i in split[t][0]] for t in dataset.task_ids}
    stats = compute_feature_stats([s for ss in raw.values() for s in ss])
    ds = Dataset({t: prepare_seasons(ss, stats) for t, ss in raw.items()}, stats)
    model = train(ds, dataset.task_ids, dataclasses.replace(cfg, rng_seed=seed))
    out = {}
    for t in dataset.task_ids:
        test = prepare_seasons([dataset.tasks[t][i] for i in split[t][1]], stats)
        out[t] = eval_rmse(predict_fn(model, task=t), test)
    return out, model.fingerprint()


def _map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def run_loco(config: ExperimentConfig, dataset: Dataset | None = None) -> ExperimentReport:
    """Leave-one-task-out evaluation of every configured method (plus oracles)."""
    t0 = time.perf_counter()
    data = dataset if dataset is not None else load_dataset(config)
    tasks = data.task_ids
    if len(tasks) < 3:
        raise HarnessError(f"need at least 3 tasks, got {len(tasks)}")
    lte_oracle = config.oracles and config.train.variant == EMBEDDING
    columns = [m.name for m in config.methods]
    if lte_oracle:
        columns.append(LTE_ORACLE)
    if config.oracles:
        columns.append(SUPERVISED)
    jobs, splits = [], []
    for trial in range(config.trials):
        split = split_holdout(data, config.holdout, np.random.default_rng([config.master_seed, trial]))
        splits.append(split)
        for ti, target in enumerate(tasks):
            sources = [t for t in tasks if t != target]
            jobs.append(
                _Job(
                    trial,
                    ti,
                    target,
                    sources,
                    derive_seed(config.master_seed, trial, ti),
                    {t: [data.tasks[t][i] for i in split[t][0]] for t in sources},
                    [data.tasks[target][i] for i in split[target][0]],
                    [data.tasks[target][i] for i in split[target][1]],
                    config.train,
                    config.methods,
                    lte_oracle,
                )
            )
    results = _map(_run_job, jobs, config.workers)
    per_trial = np.full((config.trials, len(tasks), len(columns)), np.nan)
    for r in results:
        ti = tasks.index(r.target)
        for name, v in r.rmse.items():
            per_trial[r.trial, ti, columns.index(name)] = v
    supervised_models = []
    if config.oracles:
        for trial in range(config.trials):
            seed = derive_seed(config.master_seed, trial, len(tasks))
            scores, fp = _supervised(trial, seed, data, splits[trial], config.train)
            supervised_models.append(fp)
            for ti, t in enumerate(tasks):
                per_trial[trial, ti, columns.index(SUPERVISED)] = scores[t]
    meta = {
        "master_seed": config.master_seed,
        "config": config.to_dict(),
        "config_fingerprint": hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:16],
        "holdout": [{t: split[t][1] for t in tasks} for split in splits],
        "runs": [r.meta for r in results],
        "supervised_models": supervised_models,
        "seconds": round(time.perf_counter() - t0, 3),
    }
    report = ExperimentReport(list(tasks), columns, per_trial, meta, [r.audit for r in results])
    if config.output_dir:
        write_run(report, config.output_dir)
    return report


def run_oracle_baselines(config: ExperimentConfig, dataset: Dataset | None = None) -> ExperimentReport:
    """Only the oracle columns: LTE-driven embedding search and the supervised bound."""
    cfg = dataclasses.replace(config, methods=(), oracles=True)
    return run_loco(cfg, dataset)


def methods_share_model(report: ExperimentReport) -> bool:
    """True when every method of each (trial, target) used that run's model."""
    return all(all(m["model"] == run["model"] for m in run["methods"].values()) for run in report.metadata["runs"])


def write_run(report: ExperimentReport, out_dir: str | Path, stem: str = "report") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / f"{stem}.csv")
    (out / f"{stem}.txt").write_text(report.render())
    (out / f"{stem}_manifest.json").write_text(json.dumps(report.metadata, indent=2, sort_keys=True) + "\n")
    return out / f"{stem}.csv"


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("set", "n_random", "tau", "weighting")
SWEEP_DEFAULTS = {
    "set": ("S", "CR", "LR-3", "LR-all", "S+CR", "S+LR-3", "S+LR-all"),
    "n_random": (17, 34, 68, 136, 272),
    "tau": (5.0, 10.0, 20.0, 50.0),
    "weighting": ("uniform", "linear", "exp"),
}


@dataclass
class SweepResult:
    axis: str
    values: tuple
    reports: dict
    work: dict
    table: str


def sweep_methods(axis: str, values: Sequence, task_set: str = "S+CR") -> dict:
    """Methods evaluated for each axis value, keyed by the value."""
    out = {}
    for v in values:
        if axis == "set":
            ms = [TalConfig(task_set=v, weighting=w, label=f"{h} ({v})") for w, h in (("uniform", "Uniform"), ("exp", "Weighted"))]
        elif axis == "n_random":
            n = int(v)
            ms = [
                TalConfig(task_set=task_set, n_random=n, weighting=w, label=f"{h} ({task_set}, {n})")
                for w, h in (("uniform", "Uniform"), ("exp", "Weighted"))
            ]
        elif axis == "tau":
            ms = [TalConfig(task_set=task_set, weighting="exp", tau=float(v), label=f"Ex-{float(v):g} ({task_set})")]
        elif axis == "weighting":
            head = {"uniform": "Uniform", "linear": "Lin", "exp": "Ex-10"}[v]
            ms = [TalConfig(task_set=task_set, weighting=v, label=f"{head} ({task_set})")]
        else:
            raise HarnessError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
        out[v] = ms
    return out


def sweep(config: ExperimentConfig, axis: str, values: Sequence | None = None, task_set: str = "S+CR") -> SweepResult:
    """Train each model once, then evaluate every axis value on it."""
    if axis not in SWEEP_AXES:
        raise HarnessError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    values = tuple(SWEEP_DEFAULTS[axis] if values is None else values)
    if axis == "weighting" and "uniform" not in values:
        values = ("uniform",) + values
    by_value = sweep_methods(axis, values, task_set)
    try:
        for ms in by_value.values():
            for m in ms:
                check_method(m, config.train.variant)
    except (HarnessError, TalError) as exc:
        raise HarnessError(f"sweep over {axis}: {exc}") from exc
    methods = tuple(m for ms in by_value.values() for m in ms)
    full = run_loco(dataclasses.replace(config, methods=methods, oracles=False, output_dir=None))
    reports, work = {}, {}
    for v, ms in by_value.items():
        names = [m.name for m in ms]
        reports[v] = full.subset(names)
        work[v] = sum(run["methods"][n]["work"] for run in full.metadata["runs"] for n in names)
    table = _sweep_table(axis, reports)
    if config.output_dir:
        out = Path(config.output_dir)
        for v, rep in reports.items():
            write_run(rep, out, stem=f"sweep_{axis}_{v}")
        (out / f"sweep_{axis}.txt").write_text(table)
    return SweepResult(axis, values, reports, work, table)


def _sweep_table(axis: str, reports: Mapping) -> str:
    lines = [f"{axis:>10}  " + "  ".join(f"{c}" for c in next(iter(reports.values())).columns)]
    for v, rep in reports.items():
        lines.append(f"{str(v):>10}  " + "  ".join(f"{c}={m:.3f}" for c, m in zip(rep.columns, rep.mean_row())))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# identifiability oracle


@dataclass
class IdentifiabilityTrial:
    trial: int
    source: str
    best_source: str
    exp_argmax: str
    losses: np.ndarray

    @property
    def hit(self) -> bool:
        return self.best_source == self.source and self.exp_argmax == self.source


def identifiability_experiment(
    n_trials: int = 20,
    n_tasks: int = 6,
    seasons_per_task: int = 8,
    target_seasons: int = 6,
    train_config: TrainConfig | None = None,
    seed: int = 0,
    tau: float = 10.0,
) -> tuple[list[IdentifiabilityTrial], ModelParams]:
    """Targets that duplicate a source's generative parameters under fresh weather.

    The source model is trained once; every trial draws the duplicated
    source, a new weather stream and a new label-noise stream from its own seed.
    """
    cfg = train_config or TrainConfig(variant=MULTIHEAD, epochs=200)
    params = default_task_params(n_tasks, seed=seed)
    data = generate_synthetic(params, seasons_per_task, WeatherParams(seed=seed))
    stats = compute_feature_stats(data.seasons())
    prepared = Dataset({t: prepare_seasons(ss, stats) for t, ss in data.tasks.items()}, stats)
    model = train(prepared, prepared.task_ids, dataclasses.replace(cfg, rng_seed=derive_seed(seed, 7)))
    trials = []
    for i in range(n_trials):
        rng = np.random.default_rng([seed, 11, i])
        k = int(rng.integers(n_tasks))
        wp = WeatherParams(seed=int(rng.integers(2**31)))
        dup = dataclasses.replace(params[k], rng_seed=int(rng.integers(2**31)))
        first = 2100 + 10 * i
        target = prepare_seasons(simulate_task(dup, range(first, first + target_seasons), wp), stats)
        aux = [s.without_lte() for s in target]
        best = select_best_source(model, aux)
        w = compute_weights(source_set(model), model, aux, "exp", tau)
        trials.append(IdentifiabilityTrial(i, params[k].task_id, best, w.labels[w.argmax()], w.losses))
    return trials, model
