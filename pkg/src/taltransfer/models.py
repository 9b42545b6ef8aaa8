"""Backbone encoder and the two multi-task architectures.

Backbone: fc1 (in -> H1) + ReLU, fc2 (H1 -> H2) + ReLU, single-layer GRU
(H2 -> H2), fc3 (H2 -> H1) + ReLU. Each head set is a linear map H1 -> 7:
three LTE outputs in °C followed by four phenology logits.

MultiHead keeps one head set per source task on top of the shared backbone.
Embedding keeps a single head set and feeds a 12-dimensional task vector,
concatenated to every day's weather, into the backbone.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import N_EVENTS, N_WEATHER, FeatureStats

MULTIHEAD = "multihead"
EMBEDDING = "embedding"
VARIANTS = (MULTIHEAD, EMBEDDING)
EMBED_DIM = 12
N_OUT = 3 + N_EVENTS
PAPER_WIDTHS = (1024, 2048)
DESK_WIDTHS = (32, 64)


class ModelError(ValueError):
    pass


@dataclass
class ModelParams:
    """All trainable arrays of one model plus what is needed to rebuild it.

    Array keys: ``fc1.W``, ``fc1.b``, ``fc2.*``, ``gru.W`` (H2, 3*H2),
    ``gru.U`` (H2, 3*H2), ``gru.b``, ``fc3.*``; MultiHead adds
    ``head.<task>.W``/``.b``; Embedding adds ``head.W``/``head.b`` and
    ``embed.<task>``.
    """

    variant: str
    tasks: tuple[str, ...]
    hidden1: int
    hidden2: int
    arrays: dict[str, np.ndarray]
    n_features: int = N_WEATHER
    feature_stats: FeatureStats | None = None
    meta: dict = field(default_factory=dict)

    @property
    def input_width(self) -> int:
        return self.n_features + (EMBED_DIM if self.variant == EMBEDDING else 0)

    def head_keys(self, task: str) -> tuple[str, str]:
        if self.variant == MULTIHEAD:
            if task not in self.tasks:
                raise ModelError(f"no head set for task {task!r}")
            return f"head.{task}.W", f"head.{task}.b"
        return "head.W", "head.b"

    def embedding(self, task: str) -> np.ndarray:
        if self.variant != EMBEDDING:
            raise ModelError("task embeddings exist only on the Embedding variant")
        if task not in self.tasks:
            raise ModelError(f"no embedding for task {task!r}")
        return self.arrays[f"embed.{task}"]

    def embeddings(self) -> np.ndarray:
        return np.stack([self.embedding(t) for t in self.tasks])

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.variant,
            self.tasks,
            self.hidden1,
            self.hidden2,
            {k: v.copy() for k, v in self.arrays.items()},
            self.n_features,
            self.feature_stats,
            json.loads(json.dumps(self.meta)),
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.variant}|{','.join(self.tasks)}|{self.hidden1}|{self.hidden2}".encode())
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()[:16]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_model(
    variant: str,
    tasks: Sequence[str],
    hidden1: int = DESK_WIDTHS[0],
    hidden2: int = DESK_WIDTHS[1],
    rng: np.random.Generator | int = 0,
    n_features: int = N_WEATHER,
    output_bias: np.ndarray | None = None,
) -> ModelParams:
    """Fresh parameters; Glorot-uniform matrices, zero biases, embeddings in ±0.1.

    ``output_bias`` (length 7) seeds every head bias, e.g. with training-set
    LTE means so the heads start in the right temperature range.
    """
    if variant not in VARIANTS:
        raise ModelError(f"unknown model variant {variant!r}")
    tasks = tuple(tasks)
    if not tasks or len(set(tasks)) != len(tasks):
        raise ModelError(f"task roster must be nonempty and unique: {tasks}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    d_in = n_features + (EMBED_DIM if variant == EMBEDDING else 0)
    a: dict[str, np.ndarray] = {}
    a["fc1.W"] = _glorot(rng, d_in, hidden1)
    a["fc1.b"] = np.zeros(hidden1)
    a["fc2.W"] = _glorot(rng, hidden1, hidden2)
    a["fc2.b"] = np.zeros(hidden2)
    a["gru.W"] = _glorot(rng, hidden2, 3 * hidden2)
    a["gru.U"] = _glorot(rng, hidden2, 3 * hidden2)
    a["gru.b"] = np.zeros(3 * hidden2)
    a["fc3.W"] = _glorot(rng, hidden2, hidden1)
    a["fc3.b"] = np.zeros(hidden1)
    bias = np.zeros(N_OUT) if output_bias is None else np.asarray(output_bias, dtype=float).copy()
    if variant == MULTIHEAD:
        for t in tasks:
            a[f"head.{t}.W"] = _glorot(rng, hidden1, N_OUT)
            a[f"head.{t}.b"] = bias.copy()
    else:
        a["head.W"] = _glorot(rng, hidden1, N_OUT)
        a["head.b"] = bias.copy()
        for t in tasks:
            a[f"embed.{t}"] = rng.uniform(-0.1, 0.1, size=EMBED_DIM)
    return ModelParams(variant, tasks, hidden1, hidden2, a, n_features)


# ---------------------------------------------------------------------------
# forward passes
#
# The graph functions take a mapping of Tensors so the same code serves
# training (parameters as tape leaves) and inference (plain constants).


def as_tensors(model: ModelParams, trainable: bool = False, keys=None) -> dict[str, nx.Tensor]:
    keys = model.arrays.keys() if keys is None else keys
    make = nx.parameter if trainable else nx.constant
    return {k: make(model.arrays[k]) for k in keys}


def backbone_graph(p: Mapping[str, nx.Tensor], x: nx.Tensor, gru=nx.gru_scan) -> nx.Tensor:
    """(B, T, in) -> (B, T, H1)."""
    h = nx.relu(nx.add(nx.matmul(x, p["fc1.W"]), p["fc1.b"]))
    h = nx.relu(nx.add(nx.matmul(h, p["fc2.W"]), p["fc2.b"]))
    h = gru(h, p["gru.W"], p["gru.U"], p["gru.b"])
    return nx.relu(nx.add(nx.matmul(h, p["fc3.W"]), p["fc3.b"]))


def _check_x(model: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != model.n_features or x.shape[1] < 1:
        raise ModelError(
            f"expected sequences of shape (days, {model.n_features}) or (batch, days, {model.n_features}); got {x.shape}"
        )
    return x


def multihead_graph(
    p: Mapping[str, nx.Tensor], model: ModelParams, x: np.ndarray, row_tasks: Sequence[str], gru=nx.gru_scan
) -> nx.Tensor:
    """Per-row head selection; returns (B, T, 7)."""
    feats = backbone_graph(p, nx.constant(x), gru)
    if len(set(row_tasks)) == 1:
        wk, bk = model.head_keys(row_tasks[0])
        return nx.add(nx.matmul(feats, p[wk]), p[bk])
    rows = []
    for i, task in enumerate(row_tasks):
        wk, bk = model.head_keys(task)
        rows.append(nx.add(nx.matmul(nx.slice_(feats, i), p[wk]), p[bk]))
    return nx.stack(rows, axis=0)


def embedding_graph(
    p: Mapping[str, nx.Tensor], x: np.ndarray, row_embeddings: Sequence[nx.Tensor], gru=nx.gru_scan
) -> nx.Tensor:
    """Embedding concatenated to every day before fc1; returns (B, T, 7)."""
    for e in row_embeddings:
        if e.shape != (EMBED_DIM,):
            raise ModelError(f"task embedding must have {EMBED_DIM} values, got shape {e.shape}")
    emb = nx.repeat_time(nx.stack(list(row_embeddings), axis=0), x.shape[1])
    xin = nx.concat([nx.constant(x), emb], axis=-1)
    feats = backbone_graph(p, xin, gru)
    return nx.add(nx.matmul(feats, p["head.W"]), p["head.b"])


def encode(model: ModelParams, sequence: np.ndarray, embedding: np.ndarray | None = None) -> np.ndarray:
    """Backbone features per day, (T, H1) for one sequence or (B, T, H1) for a batch."""
    x = _check_x(model, sequence)
    p = as_tensors(model)
    if model.variant == EMBEDDING:
        if embedding is None:
            raise ModelError("Embedding backbone needs a task embedding")
        e = nx.constant(np.asarray(embedding, dtype=float))
        if e.shape != (EMBED_DIM,):
            raise ModelError(f"task embedding must have {EMBED_DIM} values, got shape {e.shape}")
        xin = nx.concat([nx.constant(x), nx.repeat_time(nx.stack([e] * x.shape[0]), x.shape[1])])
    else:
        xin = nx.constant(x)
    out = backbone_graph(p, xin).value
    return out[0] if np.ndim(sequence) == 2 else out


def predict_multihead(model: ModelParams, task: str, sequence: np.ndarray) -> np.ndarray:
    """Per-day 7-vectors (3 LTE in °C, 4 phenology logits) for a MultiHead task."""
    if model.variant != MULTIHEAD:
        raise ModelError("predict_multihead needs a MultiHead model")
    x = _check_x(model, sequence)
    model.head_keys(task)
    out = multihead_graph(as_tensors(model), model, x, [task] * x.shape[0]).value
    return out[0] if np.ndim(sequence) == 2 else out


def predict_embedding(model: ModelParams, embedding: np.ndarray, sequence: np.ndarray) -> np.ndarray:
    """Per-day 7-vectors for any 12-dimensional task vector."""
    if model.variant != EMBEDDING:
        raise ModelError("predict_embedding needs an Embedding model")
    x = _check_x(model, sequence)
    e = nx.constant(np.asarray(embedding, dtype=float))
    out = embedding_graph(as_tensors(model), x, [e] * x.shape[0]).value
    return out[0] if np.ndim(sequence) == 2 else out


def predict_task(model: ModelParams, task: str, sequence: np.ndarray) -> np.ndarray:
    if model.variant == MULTIHEAD:
        return predict_multihead(model, task, sequence)
    return predict_embedding(model, model.embedding(task), sequence)


# ---------------------------------------------------------------------------
# bundle files


def save_bundle(model: ModelParams, path: str | Path) -> None:
    """Write an .npz bundle: every array plus a JSON header with the rest."""
    header = {
        "format": "taltransfer-bundle/1",
        "variant": model.variant,
        "tasks": list(model.tasks),
        "hidden1": model.hidden1,
        "hidden2": model.hidden2,
        "n_features": model.n_features,
        "feature_stats": None if model.feature_stats is None else model.feature_stats.to_dict(),
        "meta": model.meta,
    }
    buf = io.BytesIO()
    arrays = {f"param/{k}": v for k, v in model.arrays.items()}
    if model.feature_stats is not None:
        # float lists in JSON are exact for repr'd doubles, arrays keep it bitwise anyway
        arrays["stats/mean"] = model.feature_stats.mean
        arrays["stats/std"] = model.feature_stats.std
    np.savez(buf, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_bundle(path: str | Path) -> ModelParams:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format") != "taltransfer-bundle/1":
            raise ModelError(f"{path}: not a model bundle")
        arrays = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        stats = None
        if "stats/mean" in z.files:
            stats = FeatureStats(z["stats/mean"].copy(), z["stats/std"].copy())
    return ModelParams(
        header["variant"],
        tuple(header["tasks"]),
        int(header["hidden1"]),
        int(header["hidden2"]),
        arrays,
        int(header["n_features"]),
        stats,
        header["meta"],
    )
