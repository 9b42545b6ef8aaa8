"""Joint LTE + phenology training of the multi-task models."""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import N_EVENTS, N_WEATHER, Dataset, SeasonBatch, SeasonSeries, make_batch
from .models import (
    DESK_WIDTHS,
    EMBEDDING,
    MULTIHEAD,
    VARIANTS,
    ModelParams,
    as_tensors,
    embedding_graph,
    init_model,
    multihead_graph,
    predict_embedding,
    predict_task,
)

logger = logging.getLogger(__name__)

# a prediction handle maps a (T, 12) weather matrix to per-day 7-vectors
PredictFn = Callable[[np.ndarray], np.ndarray]


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = EMBEDDING
    epochs: int = 60
    batch_size: int = 12
    lr: float = 1e-3
    lambda_lte: float = 1.0
    lambda_pheno: float = 1.0
    hidden1: int = DESK_WIDTHS[0]
    hidden2: int = DESK_WIDTHS[1]
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise TrainingError(f"unknown variant {self.variant!r}")
        for name in ("epochs", "batch_size", "hidden1", "hidden2"):
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be positive")
        if self.lr <= 0 or self.lambda_lte < 0 or self.lambda_pheno < 0:
            raise TrainingError("lr must be positive and loss weights nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def fingerprint(self) -> dict:
        # reduction choices travel with the bundle
        return {**self.to_dict(), "mse_reduction": "mean over sampled days x 3", "bce_reduction": "mean over days x 4"}


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lte_mse: float
    pheno_bce: float


@dataclass
class LossParts:
    total: nx.Tensor
    lte_mse: float
    pheno_bce: float


def _row_graph(p, model: ModelParams, batch: SeasonBatch, gru=nx.gru_scan) -> nx.Tensor:
    if model.variant == MULTIHEAD:
        return multihead_graph(p, model, batch.x, batch.tasks, gru)
    return embedding_graph(p, batch.x, [p[f"embed.{t}"] for t in batch.tasks], gru)


def loss_graph(
    out: nx.Tensor, batch: SeasonBatch, lambda_lte: float = 1.0, lambda_pheno: float = 1.0
) -> LossParts:
    """Masked MSE over sampled LTE days plus BCE over every real day."""
    n_lte = float(batch.lte_mask.sum())
    n_days = float(batch.day_mask.sum())
    if n_lte == 0 and lambda_pheno == 0:
        raise TrainingError("no supervised signal: batch has no LTE samples and the phenology weight is 0")
    terms = []
    mse_val = 0.0
    if n_lte > 0:
        pred = nx.slice_(out, (Ellipsis, slice(0, 3)))
        mask3 = np.repeat(batch.lte_mask[..., None], 3, axis=-1)
        sq = nx.mul(nx.square(nx.sub(pred, nx.constant(batch.lte))), nx.constant(mask3))
        mse = nx.scale(nx.sum_(sq), 1.0 / (3.0 * n_lte))
        mse_val = float(mse.value)
        terms.append(nx.scale(mse, lambda_lte))
    logits = nx.slice_(out, (Ellipsis, slice(3, 3 + N_EVENTS)))
    mask4 = np.repeat(batch.day_mask[..., None], N_EVENTS, axis=-1)
    bce = nx.scale(
        nx.sum_(nx.mul(nx.bce_with_logits(logits, nx.constant(batch.pheno)), nx.constant(mask4))),
        1.0 / (N_EVENTS * n_days),
    )
    terms.append(nx.scale(bce, lambda_pheno))
    total = terms[0] if len(terms) == 1 else nx.add(terms[0], terms[1])
    return LossParts(total, mse_val, float(bce.value))


def joint_loss(
    model: ModelParams,
    batch: Sequence[SeasonSeries] | SeasonBatch,
    lambda_lte: float = 1.0,
    lambda_pheno: float = 1.0,
) -> float:
    """Value of the training objective on preprocessed seasons."""
    b = batch if isinstance(batch, SeasonBatch) else make_batch(batch)
    out = _row_graph(as_tensors(model), model, b)
    return float(loss_graph(out, b, lambda_lte, lambda_pheno).total.value)


def loss_and_grads(
    model: ModelParams,
    batch: SeasonBatch,
    lambda_lte: float = 1.0,
    lambda_pheno: float = 1.0,
    gru=nx.gru_scan,
) -> tuple[LossParts, dict[str, np.ndarray]]:
    """Loss plus a gradient for every array in ``model`` (zeros where untouched)."""
    p = as_tensors(model, trainable=True)
    with nx.Tape() as tape:
        parts = loss_graph(_row_graph(p, model, batch, gru), batch, lambda_lte, lambda_pheno)
    g = tape.backward(parts.total)
    grads = {k: g[t] if t in g else np.zeros_like(t.value) for k, t in p.items()}
    return parts, grads


def output_bias_from(seasons: Sequence[SeasonSeries]) -> np.ndarray:
    """Head bias start: mean LTE per channel and the logit of each flag's base rate."""
    lte = np.concatenate([s.lte[s.lte_mask] for s in seasons], axis=0)
    pheno = np.concatenate([s.pheno for s in seasons], axis=0)
    rate = np.clip(pheno.mean(axis=0), 1e-3, 1 - 1e-3)
    mean_lte = lte.mean(axis=0) if len(lte) else np.zeros(3)
    return np.concatenate([mean_lte, np.log(rate / (1 - rate))])


def train(
    dataset: Dataset,
    source_tasks: Iterable[str],
    config: TrainConfig,
    extra_seasons: Sequence[SeasonSeries] = (),
    log_path: str | Path | None = None,
) -> ModelParams:
    """Fit a fresh model on every season of ``source_tasks``.

    The dataset must already be interpolated and normalised. The result is a
    pure function of the data and ``config.rng_seed``; per-epoch losses are
    kept in ``model.meta['history']``.
    """
    tasks = list(dict.fromkeys(source_tasks))
    if not tasks:
        raise TrainingError("empty source task set")
    seasons: list[SeasonSeries] = []
    for t in tasks:
        if t not in dataset.tasks or not dataset.tasks[t]:
            raise TrainingError(f"source task {t!r} has no training seasons")
        seasons.extend(dataset.tasks[t])
    seasons.extend(extra_seasons)
    for s in seasons:
        if s.task_id not in tasks:
            raise TrainingError(f"season {s.key} belongs to a task outside the roster")

    rng = np.random.default_rng(config.rng_seed)
    model = init_model(
        config.variant, tasks, config.hidden1, config.hidden2, rng, output_bias=output_bias_from(seasons)
    )
    model.feature_stats = dataset.feature_stats
    state = nx.AdamState(lr=config.lr)
    history: list[EpochLog] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(seasons))
        tot = mse = bce = 0.0
        nb = 0
        for lo in range(0, len(order), config.batch_size):
            batch = make_batch([seasons[i] for i in order[lo : lo + config.batch_size]])
            parts, grads = loss_and_grads(model, batch, config.lambda_lte, config.lambda_pheno)
            nx.adam_step(state, model.arrays, grads)
            tot += float(parts.total.value)
            mse += parts.lte_mse
            bce += parts.pheno_bce
            nb += 1
        history.append(EpochLog(epoch, tot / nb, mse / nb, bce / nb))
        logger.debug("epoch %d loss %.4f (mse %.4f bce %.4f)", epoch, tot / nb, mse / nb, bce / nb)
    model.meta = {
        "train_config": config.fingerprint(),
        "train_seasons": [list(s.key) for s in seasons],
        "history": [dataclasses.astuple(h) for h in history],
    }
    if log_path is not None:
        write_training_log(history, log_path)
    return model


def write_training_log(history: Sequence[EpochLog], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "joint_loss", "lte_mse", "pheno_bce"])
        for h in history:
            w.writerow([h.epoch, repr(h.loss), repr(h.lte_mse), repr(h.pheno_bce)])


def history(model: ModelParams) -> list[EpochLog]:
    return [EpochLog(int(e), l, m, b) for e, l, m, b in model.meta.get("history", [])]


# ---------------------------------------------------------------------------
# evaluation


def predict_fn(model: ModelParams, task: str | None = None, embedding: np.ndarray | None = None) -> PredictFn:
    """Prediction handle for a source task or, on Embedding models, any task vector."""
    if (task is None) == (embedding is None):
        raise TrainingError("give exactly one of task or embedding")
    if task is not None:
        model.head_keys(task) if model.variant == MULTIHEAD else model.embedding(task)
        return lambda x: predict_task(model, task, x)
    e = np.array(embedding, dtype=float)
    return lambda x: predict_embedding(model, e, x)


def eval_rmse(predict: PredictFn, seasons: Sequence[SeasonSeries]) -> float:
    """RMSE of the LTE50 channel over every sampled day of ``seasons``."""
    err = []
    for s in seasons:
        if s.n_lte == 0:
            continue
        pred = np.asarray(predict(s.weather))
        err.append(pred[s.lte_mask, 1] - s.lte[s.lte_mask, 1])
    if not err:
        raise TrainingError("eval_rmse: no LTE samples to score")
    e = np.concatenate(err)
    return float(np.sqrt(np.mean(e * e)))


def bce_mean(logits: np.ndarray, labels: np.ndarray) -> float:
    x = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=float)
    return float(np.mean(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))))


def aux_loss(predict: PredictFn, target_data: Sequence[SeasonSeries]) -> float:
    """Mean BCE over all days x 4 phenology channels of the target seasons."""
    if not target_data:
        raise TrainingError("aux_loss needs at least one season")
    logits = np.concatenate([np.asarray(predict(s.weather))[:, 3 : 3 + N_EVENTS] for s in target_data])
    labels = np.concatenate([s.pheno for s in target_data])
    return bce_mean(logits, labels)


# ---------------------------------------------------------------------------
# gradient check


def random_batch(
    rng: np.random.Generator, tasks: Sequence[str], n_seasons: int = 3, days: int = 12, lte_scale: float = 1.0
) -> SeasonBatch:
    """Small random batch with sparse LTE samples and monotone phenology flags."""
    seasons = []
    for i in range(n_seasons):
        n = days - (i % 2)  # ragged lengths exercise the padding mask
        w = rng.normal(size=(n, N_WEATHER))
        mask = rng.random(n) < 0.35
        mask[rng.integers(n)] = True
        lte50 = rng.normal(0.0, lte_scale, size=n)
        lte = np.where(mask[:, None], np.column_stack([lte50 + 0.2, lte50, lte50 - 0.2]), np.nan)
        onset = np.sort(rng.integers(0, n + 3, size=N_EVENTS))
        pheno = (np.arange(n)[:, None] >= onset[None, :]).astype(float)
        start = dt.date(2000 + i, 9, 7)
        seasons.append(SeasonSeries(tasks[i % len(tasks)], f"{2000 + i}-{2001 + i}", start, w, lte, mask, pheno))
    return make_batch(seasons)


def loss_terms(model: ModelParams, batch: SeasonBatch, lambda_lte: float = 1.0, lambda_pheno: float = 1.0) -> np.ndarray:
    """Per-cell contributions whose sum is the joint loss (forward only)."""
    out = _row_graph(as_tensors(model), model, batch).value
    n_lte = batch.lte_mask.sum()
    mse = (out[..., :3] - batch.lte) ** 2 * batch.lte_mask[..., None]
    x, y = out[..., 3:], batch.pheno
    bce = (np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))) * batch.day_mask[..., None]
    parts = [lambda_pheno * bce.ravel() / (N_EVENTS * batch.day_mask.sum())]
    if n_lte > 0:
        parts.insert(0, lambda_lte * mse.ravel() / (3.0 * n_lte))
    return np.concatenate(parts)


def gradcheck_model(
    variant: str,
    seed: int = 0,
    hidden1: int = 8,
    hidden2: int = 16,
    days: int = 20,
    h: float = 1e-5,
    max_coords: int | None = None,
) -> nx.GradcheckResult:
    """Analytic vs central-difference gradients of the joint loss on a tiny model.

    The random batch keeps LTE targets on a unit scale; with targets near
    -15 °C the loss rounding alone (~1 ulp of the outputs) would swamp
    coordinates whose true gradient is below 1e-6.
    """
    if max(hidden1, hidden2) > 16 or days > 20:
        raise TrainingError("gradcheck is limited to widths <= 16 and sequences <= 20 days")
    rng = np.random.default_rng(seed)
    tasks = ("a", "b", "c")
    model = init_model(variant, tasks, hidden1, hidden2, rng, output_bias=rng.normal(0.0, 0.5, size=7))
    batch = random_batch(rng, tasks, days=days)
    _, grads = loss_and_grads(model, batch)
    return nx.gradcheck(lambda arrays: loss_terms(model, batch), model.arrays, grads, h=h, max_coords=max_coords, rng=rng)
