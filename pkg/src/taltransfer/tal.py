"""Transfer via auxiliary labels: selection, task sets, weighting, mixtures.

Every method sees the target only through phenology-only seasons (the
auxiliary data). Entries of a task set are source heads, trained source
embeddings, or sampled fictitious embeddings; all are scored by the mean
phenology BCE of their predictions on the auxiliary data.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import N_EVENTS, SeasonBatch, SeasonSeries, make_batch
from .models import EMBED_DIM, EMBEDDING, MULTIHEAD, ModelError, ModelParams, as_tensors, embedding_graph, multihead_graph

logger = logging.getLogger(__name__)

SCHEMES = ("best_source", "opt_embedding", "averaging")
WEIGHTINGS = ("uniform", "linear", "exp")
_SET_RE = re.compile(r"^(S|CR|LR-(?:3|all))$|^S\+(CR|LR-(?:3|all))$")
DEFAULT_N_CR = 68
DEFAULT_N_LR = 17
# rows per forward pass when scoring many entries at once
_CHUNK_ROWS = 256


class TalError(ValueError):
    pass


@dataclass(frozen=True)
class TalConfig:
    scheme: str = "averaging"
    task_set: str = "S"
    n_random: int | None = None  # None: 68 for CR, 17 for LR
    weighting: str = "exp"
    tau: float = 10.0
    steps: int = 500
    opt_lr: float = 0.01
    rng_seed: int = 0
    linear_literal: bool = False  # w_i = L_i as written, instead of decreasing in L_i
    prior: tuple[float, ...] | None = None
    label: str | None = None

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise TalError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.weighting not in WEIGHTINGS:
            raise TalError(f"unknown weighting {self.weighting!r}; expected one of {WEIGHTINGS}")
        if not _SET_RE.match(self.task_set):
            raise TalError(f"unknown task set {self.task_set!r}; expected S, CR, LR-3, LR-all, S+CR, S+LR-3 or S+LR-all")
        if not self.tau > 0:
            raise TalError("tau must be positive")
        if self.n_random is not None and self.n_random < 0:
            raise TalError("n_random must be >= 0")
        if self.steps < 0 or not self.opt_lr > 0:
            raise TalError("steps must be >= 0 and opt_lr positive")
        if self.prior is not None:
            object.__setattr__(self, "prior", tuple(float(v) for v in self.prior))

    @property
    def random_kind(self) -> str | None:
        """'CR', 'LR-3', 'LR-all' or None for source-only sets."""
        if self.task_set == "S":
            return None
        return self.task_set.split("+")[-1]

    @property
    def includes_sources(self) -> bool:
        return self.task_set == "S" or self.task_set.startswith("S+")

    @property
    def n_random_effective(self) -> int:
        kind = self.random_kind
        if kind is None:
            return 0
        if self.n_random is not None:
            return self.n_random
        return DEFAULT_N_CR if kind == "CR" else DEFAULT_N_LR

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.scheme == "best_source":
            return "Best Source"
        if self.scheme == "opt_embedding":
            return "Pheno. Optim."
        if self.weighting == "uniform":
            head = "Uniform"
        elif self.weighting == "linear":
            head = "Linear"
        else:
            head = "Weighted" if self.tau == 10.0 else f"Ex-{self.tau:g}"
        return f"{head} ({self.task_set})"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["prior"] is not None:
            d["prior"] = list(d["prior"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TalConfig":
        d = dict(d)
        if d.get("prior") is not None:
            d["prior"] = tuple(d["prior"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class TaskEntry:
    """One member of a task set.

    ``task`` names the source for source entries; ``embedding`` is set for
    every Embedding-model entry; ``coefficients`` records the convex weights
    of an LR sample over the source roster.
    """

    label: str
    kind: str  # source | cr | lr | optimized
    task: str | None = None
    embedding: np.ndarray | None = None
    coefficients: np.ndarray | None = None

    def predict(self, model: ModelParams, sequence: np.ndarray) -> np.ndarray:
        return entry_outputs(model, TaskSet(model.variant, (self,)), [sequence])[0][0]


@dataclass(frozen=True)
class TaskSet:
    variant: str
    entries: tuple[TaskEntry, ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise TalError("a task set needs at least one entry")
        labels = [e.label for e in self.entries]
        if len(set(labels)) != len(labels):
            raise TalError("task set labels must be unique")
        for e in self.entries:
            if self.variant == EMBEDDING and e.embedding is None:
                raise TalError(f"entry {e.label} has no embedding")
            if self.variant == MULTIHEAD and e.task is None:
                raise TalError(f"entry {e.label} names no source head")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    def embedding_matrix(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries])


@dataclass(frozen=True)
class WeightVector:
    labels: tuple[str, ...]
    weights: np.ndarray
    losses: np.ndarray | None = None

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.labels),):
            raise TalError("weights and labels differ in length")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise TalError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.labels)

    def argmax(self) -> int:
        return int(np.argmax(self.weights))


# ---------------------------------------------------------------------------
# task sets


def source_set(model: ModelParams) -> TaskSet:
    if model.variant == MULTIHEAD:
        return TaskSet(MULTIHEAD, tuple(TaskEntry(t, "source", task=t) for t in model.tasks))
    return TaskSet(
        EMBEDDING, tuple(TaskEntry(t, "source", task=t, embedding=model.embedding(t).copy()) for t in model.tasks)
    )


def sample_cr(source_embeddings: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Each coordinate uniform between the source minimum and maximum of that coordinate."""
    e = np.asarray(source_embeddings, dtype=float)
    lo, hi = e.min(axis=0), e.max(axis=0)
    out = lo + (hi - lo) * rng.random((n, e.shape[1]))
    # guard the rare rounding overshoot of lo + (hi - lo) * u
    return np.clip(out, lo, hi)


def sample_lr(
    source_embeddings: np.ndarray, n: int, rng: np.random.Generator, subset: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Flat-Dirichlet convex combinations of all sources or of a random subset.

    Returns (embeddings (n, d), coefficients (n, n_sources)).
    """
    e = np.asarray(source_embeddings, dtype=float)
    m = e.shape[0]
    k = m if subset is None else min(subset, m)
    coef = np.zeros((n, m))
    for i in range(n):
        idx = np.sort(rng.choice(m, size=k, replace=False)) if k < m else np.arange(m)
        coef[i, idx] = rng.dirichlet(np.ones(k))
    return coef @ e, coef


def build_task_set(model: ModelParams, config: TalConfig) -> TaskSet:
    kind = config.random_kind
    if kind is not None and model.variant != EMBEDDING:
        raise TalError(f"task set {config.task_set} needs an Embedding model")
    src = source_set(model)
    entries = list(src.entries) if config.includes_sources else []
    n = config.n_random_effective
    if kind is not None and n > 0:
        rng = np.random.default_rng(config.rng_seed)
        emb = src.embedding_matrix()
        if kind == "CR":
            for i, v in enumerate(sample_cr(emb, n, rng)):
                entries.append(TaskEntry(f"cr_{i:03d}", "cr", embedding=v))
        else:
            vecs, coef = sample_lr(emb, n, rng, subset=3 if kind == "LR-3" else None)
            for i in range(n):
                entries.append(TaskEntry(f"lr_{i:03d}", "lr", embedding=vecs[i], coefficients=coef[i]))
    if not entries:
        raise TalError(f"task set {config.task_set} with n_random=0 is empty")
    return TaskSet(model.variant, tuple(entries))


# ---------------------------------------------------------------------------
# batched evaluation of many entries


def entry_outputs(model: ModelParams, task_set: TaskSet, sequences: Sequence[np.ndarray]) -> list[list[np.ndarray]]:
    """Per-day 7-vectors for every (entry, sequence) pair, as out[entry][sequence].

    Rows are batched up to a fixed size; the recurrence is causal, so padding
    a sequence at its end never changes its real days.
    """
    if task_set.variant != model.variant:
        raise TalError(f"task set built for {task_set.variant} used with a {model.variant} model")
    seqs = [np.asarray(s, dtype=float) for s in sequences]
    if not seqs:
        return [[] for _ in task_set.entries]
    steps = max(s.shape[0] for s in seqs)
    xs = np.zeros((len(seqs), steps, model.n_features))
    for j, s in enumerate(seqs):
        if s.ndim != 2 or s.shape[1] != model.n_features:
            raise ModelError(f"expected (days, {model.n_features}) sequences, got {s.shape}")
        if np.isnan(s).any():
            raise TalError("sequences must be interpolated before prediction")
        xs[j, : s.shape[0]] = s
    p = as_tensors(model)
    n_seq = len(seqs)
    per_chunk = max(1, _CHUNK_ROWS // n_seq)
    out: list[list[np.ndarray]] = []
    entries = task_set.entries
    for start in range(0, len(entries), per_chunk):
        chunk = entries[start : start + per_chunk]
        if model.variant == MULTIHEAD:
            x = np.concatenate([xs] * len(chunk))
            y = multihead_graph(p, model, x, [e.task for e in chunk for _ in seqs]).value
        else:
            x = np.concatenate([xs] * len(chunk))
            rows = [nx.constant(e.embedding) for e in chunk for _ in seqs]
            y = embedding_graph(p, x, rows).value
        for i in range(len(chunk)):
            out.append([y[i * n_seq + j, : seqs[j].shape[0]] for j in range(n_seq)])
    return out


def entry_aux_losses(model: ModelParams, task_set: TaskSet, target_data: Sequence[SeasonSeries]) -> np.ndarray:
    """aux_loss of every entry: mean BCE over all target days x 4 channels."""
    if not target_data:
        raise TalError("auxiliary target data is empty")
    outs = entry_outputs(model, task_set, [s.weather for s in target_data])
    labels = np.concatenate([s.pheno for s in target_data])
    losses = np.empty(len(task_set))
    for i, per_seq in enumerate(outs):
        x = np.concatenate([o[:, 3 : 3 + N_EVENTS] for o in per_seq])
        losses[i] = np.mean(np.maximum(x, 0.0) - x * labels + np.log1p(np.exp(-np.abs(x))))
    return losses


def select_best_source(model: ModelParams, target_data: Sequence[SeasonSeries]) -> str:
    """Source task with the smallest auxiliary loss; ties go to the earliest task."""
    losses = entry_aux_losses(model, source_set(model), target_data)
    # np.argmin returns the first minimum
    return model.tasks[int(np.argmin(losses))]


# ---------------------------------------------------------------------------
# weighting and mixtures


def weights_from_losses(
    losses: Sequence[float],
    weighting: str,
    tau: float = 10.0,
    linear_literal: bool = False,
    prior: Sequence[float] | None = None,
) -> np.ndarray:
    L = np.asarray(losses, dtype=float)
    if L.ndim != 1 or L.size == 0:
        raise TalError("need a nonempty loss vector")
    if weighting == "uniform":
        w = np.ones_like(L)
    elif weighting == "exp":
        if not tau > 0:
            raise TalError("tau must be positive")
        # subtracting the minimum keeps the largest term at exp(0)
        w = np.exp(-tau * (L - L.min()))
    elif weighting == "linear":
        if linear_literal:
            w = L.copy() if L.sum() > 0 else np.ones_like(L)
        else:
            spread = L.max() - L.min()
            w = np.ones_like(L) if spread == 0 else L.max() - L + 1e-6 * (spread + 1.0)
    else:
        raise TalError(f"unknown weighting {weighting!r}")
    if prior is not None:
        pr = np.asarray(prior, dtype=float)
        if pr.shape != L.shape or (pr < 0).any() or pr.sum() <= 0:
            raise TalError("prior must be nonnegative, aligned to the entries and not all zero")
        w = w * pr
    return w / w.sum()


def compute_weights(
    task_set: TaskSet,
    model: ModelParams,
    target_data: Sequence[SeasonSeries],
    weighting: str = "exp",
    tau: float = 10.0,
    linear_literal: bool = False,
    prior: Sequence[float] | None = None,
) -> WeightVector:
    if weighting == "uniform" and prior is None:
        n = len(task_set)
        return WeightVector(tuple(task_set.labels), np.full(n, 1.0 / n))
    losses = entry_aux_losses(model, task_set, target_data)
    w = weights_from_losses(losses, weighting, tau, linear_literal, prior)
    return WeightVector(tuple(task_set.labels), w, losses)


def mixture_predict(
    task_set: TaskSet, weights: WeightVector, model: ModelParams, sequence: np.ndarray
) -> np.ndarray:
    """Weighted mean of the entries' per-day LTE triples, shape (days, 3)."""
    return mixture_predict_many(task_set, weights, model, [sequence])[0]


def mixture_predict_many(
    task_set: TaskSet, weights: WeightVector, model: ModelParams, sequences: Sequence[np.ndarray]
) -> list[np.ndarray]:
    if len(weights) != len(task_set) or tuple(weights.labels) != tuple(task_set.labels):
        raise TalError(f"weights ({len(weights)}) are not aligned to the task set ({len(task_set)})")
    outs = entry_outputs(model, task_set, sequences)
    res = []
    for j in range(len(sequences)):
        member = np.stack([outs[i][j][:, :3] for i in range(len(task_set))])
        mix = np.einsum("e,etc->tc", weights.weights, member)
        # a convex combination cannot leave the members' range; clip the rounding
        res.append(np.clip(mix, member.min(axis=0), member.max(axis=0)))
    return res


# ---------------------------------------------------------------------------
# optimized embedding


@dataclass
class EmbeddingSearch:
    embedding: np.ndarray
    loss: float
    initial_loss: float
    best_step: int
    trace: list[float] = field(default_factory=list)


def _search_loss(out: nx.Tensor, batch: SeasonBatch, objective: str) -> nx.Tensor:
    if objective == "aux":
        logits = nx.slice_(out, (Ellipsis, slice(3, 3 + N_EVENTS)))
        mask = np.repeat(batch.day_mask[..., None], N_EVENTS, axis=-1)
        cells = nx.mul(nx.bce_with_logits(logits, nx.constant(batch.pheno)), nx.constant(mask))
        return nx.scale(nx.sum_(cells), 1.0 / mask.sum())
    n = batch.lte_mask.sum()
    if n == 0:
        raise TalError("LTE objective needs at least one LTE sample")
    mask = np.repeat(batch.lte_mask[..., None], 3, axis=-1)
    err = nx.sub(nx.slice_(out, (Ellipsis, slice(0, 3))), nx.constant(batch.lte))
    return nx.scale(nx.sum_(nx.mul(nx.square(err), nx.constant(mask))), 1.0 / (3.0 * n))


def optimize_embedding(
    model: ModelParams,
    target_data: Sequence[SeasonSeries],
    config: TalConfig | None = None,
    objective: str = "aux",
    init: np.ndarray | None = None,
) -> EmbeddingSearch:
    """Adam on the 12 embedding coordinates with every network weight frozen.

    ``objective='aux'`` minimizes the phenology BCE of the target data;
    ``objective='lte'`` minimizes the masked LTE MSE instead (the oracle that
    is allowed to look at target LTE). The best point seen is returned.
    """
    if model.variant != EMBEDDING:
        raise TalError("optimize_embedding needs an Embedding model")
    if objective not in ("aux", "lte"):
        raise TalError(f"unknown objective {objective!r}")
    if not target_data:
        raise TalError("target data is empty")
    cfg = config or TalConfig(scheme="opt_embedding")
    batch = make_batch(list(target_data))
    p = as_tensors(model)
    e = np.array(model.embeddings().mean(axis=0) if init is None else init, dtype=float)
    if e.shape != (EMBED_DIM,):
        raise TalError(f"initial embedding must have {EMBED_DIM} values")
    state = nx.AdamState(lr=cfg.opt_lr)
    best_e, best_l = e.copy(), np.inf
    trace: list[float] = []
    best_step = 0
    for step in range(cfg.steps + 1):
        t = nx.parameter(e)
        with nx.Tape() as tape:
            loss = _search_loss(embedding_graph(p, batch.x, [t] * len(batch.tasks)), batch, objective)
        val = float(loss.value)
        trace.append(val)
        if val < best_l:
            best_e, best_l, best_step = e.copy(), val, step
        if step == cfg.steps:
            break
        g = tape.backward(loss)[t]
        params = {"e": e}
        nx.adam_step(state, params, {"e": g})
        e = params["e"]
    logger.debug("embedding search: %s -> %s (best at step %d)", trace[0], best_l, best_step)
    return EmbeddingSearch(best_e, best_l, trace[0], best_step, trace)


# ---------------------------------------------------------------------------
# end-to-end transfer


@dataclass
class TransferResult:
    """Outcome of one TAL method on one target; enough to replay it."""

    config: TalConfig
    task_set: TaskSet
    weights: WeightVector
    chosen: str | None = None
    embedding: np.ndarray | None = None
    weight_model: str | None = None

    def predict(self, model: ModelParams, sequences: Sequence[np.ndarray]) -> list[np.ndarray]:
        return mixture_predict_many(self.task_set, self.weights, model, sequences)

    def manifest(self) -> dict:
        entries = []
        for e, w in zip(self.task_set.entries, self.weights.weights):
            item = {"label": e.label, "kind": e.kind, "weight": float(w)}
            if e.task is not None:
                item["task"] = e.task
            if e.embedding is not None:
                item["embedding"] = [float(v) for v in e.embedding]
            entries.append(item)
        losses = None if self.weights.losses is None else [float(v) for v in self.weights.losses]
        return {
            "config": self.config.to_dict(),
            "variant": self.task_set.variant,
            "chosen": self.chosen,
            "embedding": None if self.embedding is None else [float(v) for v in self.embedding],
            "weight_model": self.weight_model,
            "losses": losses,
            "entries": entries,
        }

    def manifest_text(self) -> str:
        return json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n"


def _one_hot(task_set: TaskSet, index: int) -> WeightVector:
    w = np.zeros(len(task_set))
    w[index] = 1.0
    return WeightVector(tuple(task_set.labels), w)


def transfer(
    model: ModelParams,
    target_aux: Sequence[SeasonSeries],
    config: TalConfig,
    weight_model: ModelParams | None = None,
) -> TransferResult:
    """Run one TAL method given only phenology seasons of the target.

    ``weight_model`` lets a second model supply the weights (cross-model
    weighting over a source-only set); its task roster must match.
    """
    for s in target_aux:
        if s.n_lte:
            raise TalError(f"{s.task_id} {s.season_label}: auxiliary data must not carry LTE values")
    if config.scheme == "best_source":
        ts = source_set(model)
        chosen = select_best_source(model, target_aux)
        return TransferResult(config, ts, _one_hot(ts, ts.labels.index(chosen)), chosen=chosen)
    if config.scheme == "opt_embedding":
        res = optimize_embedding(model, target_aux, config)
        ts = TaskSet(EMBEDDING, (TaskEntry("optimized", "optimized", embedding=res.embedding),))
        return TransferResult(config, ts, WeightVector(("optimized",), np.ones(1), np.array([res.loss])), embedding=res.embedding)
    ts = build_task_set(model, config)
    if weight_model is None:
        w = compute_weights(ts, model, target_aux, config.weighting, config.tau, config.linear_literal, config.prior)
        return TransferResult(config, ts, w)
    if config.task_set != "S" or tuple(weight_model.tasks) != tuple(model.tasks):
        raise TalError("cross-model weighting needs source-only sets over the same tasks")
    wset = source_set(weight_model)
    w = compute_weights(wset, weight_model, target_aux, config.weighting, config.tau, config.linear_literal, config.prior)
    return TransferResult(config, ts, WeightVector(tuple(ts.labels), w.weights, w.losses), weight_model=weight_model.variant)
