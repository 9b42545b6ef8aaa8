"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Only the primitives needed by the recurrent model family live here. Every
primitive checks shapes up front and refuses to broadcast except for adding
a 1-D bias along the last axis.

Typical use::

    with Tape() as tape:
        loss = sum_(square(sub(matmul(x, w), y)))
    grads = tape.backward(loss)
    grads[w]
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "constant",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "concat",
    "slice_",
    "stack",
    "reshape",
    "repeat_time",
    "sum_",
    "mean",
    "square",
    "bce_with_logits",
    "gru_scan",
    "gru_scan_composite",
    "relu_patterns",
    "AdamState",
    "adam_step",
    "GradcheckResult",
    "gradcheck",
]


class ShapeError(ValueError):
    """Raised when a primitive receives non-conforming shapes."""


class Tensor:
    """A float64 array plus the bookkeeping needed for gradients."""

    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


# A node is (output, inputs, backward). backward(g, acc) pushes gradient into
# inputs through acc(tensor, grad, index=None).
Accumulate = Callable[..., None]


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray, Accumulate], None]
    op: str


_ACTIVE: list["Tape"] = []
_RELU_LOG: list[list[np.ndarray]] = []


class Tape:
    """Ordered record of primitive applications.

    Ops are appended in execution order, which is a topological order of the
    graph; ``backward`` walks it in reverse and visits each node once.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.visits = 0

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` for every leaf that requires them."""
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        produced = {id(n.out) for n in self.nodes}
        leaves: dict[int, Tensor] = {}

        def acc(t: Tensor, g: np.ndarray, index=None) -> None:
            if not t.requires_grad:
                return
            key = id(t)
            if key not in produced:
                leaves[key] = t
            cur = grads.get(key)
            if index is None:
                if cur is None:
                    grads[key] = np.array(g, dtype=np.float64, copy=True)
                else:
                    cur += g
            else:
                if cur is None:
                    cur = np.zeros_like(t.value)
                    grads[key] = cur
                cur[index] += g

        self.visits = 0
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            self.visits += 1
            node.backward(g, acc)
        out: dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            out[t] = grads[key]
        return out


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(_Node(out, inputs, backward, op))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------------------
# primitives


def _rows_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b where each output row does not depend on how many rows ``a`` has.

    BLAS sends a single row through gemv, whose rounding differs from gemm;
    padding to two rows keeps a 1-day prefix bit-identical to the longer run.
    """
    flat = a.reshape(-1, a.shape[-1])
    if flat.shape[0] == 1:
        res = np.vstack([flat, np.zeros_like(flat)]) @ b
        return res[:1].reshape(a.shape[:-1] + (b.shape[1],))
    return a @ b


def matmul(a, b) -> Tensor:
    """(..., k) @ (k, n) -> (..., n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(_rows_matmul(a.value, b.value))

    def backward(g, acc):
        if a.requires_grad:
            acc(a, g @ b.value.T)
        if b.requires_grad:
            acc(b, a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    return _record(out, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = b.value.ndim == 1 and a.value.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape
    if a.shape != b.shape and not bias:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(a.value + b.value)

    def backward(g, acc):
        acc(a, g)
        if bias:
            acc(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
        else:
            acc(b, g)

    return _record(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(a.value - b.value)

    def backward(g, acc):
        acc(a, g)
        acc(b, -g)

    return _record(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(a.value * b.value)

    def backward(g, acc):
        if a.requires_grad:
            acc(a, g * b.value)
        if b.requires_grad:
            acc(b, g * a.value)

    return _record(out, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.value * c)
    return _record(out, (a,), lambda g, acc: acc(a, g * c), "scale")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.value)
    out = Tensor(s)
    return _record(out, (a,), lambda g, acc: acc(a, g * s * (1.0 - s)), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.value)
    out = Tensor(t)
    return _record(out, (a,), lambda g, acc: acc(a, g * (1.0 - t * t)), "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0  # subgradient 0 at the kink
    if _RELU_LOG:
        _RELU_LOG[-1].append(mask)
    out = Tensor(np.where(mask, a.value, 0.0))
    return _record(out, (a,), lambda g, acc: acc(a, g * mask), "relu")


@contextlib.contextmanager
def relu_patterns() -> Iterator[list[np.ndarray]]:
    """Collect the activation pattern of every relu evaluated in the block."""
    log: list[np.ndarray] = []
    _RELU_LOG.append(log)
    try:
        yield log
    finally:
        _RELU_LOG.remove(log)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ndim = ts[0].value.ndim
    ax = axis % ndim
    for t in ts:
        if t.value.ndim != ndim or any(
            t.shape[d] != ts[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform on axis {axis}")
    out = Tensor(np.concatenate([t.value for t in ts], axis=ax))
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g, acc):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[ax] = slice(lo, hi)
                acc(t, g[tuple(idx)])

    return _record(out, tuple(ts), backward, "concat")


def slice_(a, index) -> Tensor:
    """Basic (view) indexing; the gradient lands only on the selected cells."""
    a = _as_tensor(a)
    try:
        val = a.value[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}") from exc
    out = Tensor(np.array(val, copy=True))
    return _record(out, (a,), lambda g, acc: acc(a, g, index), "slice")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts or any(t.shape != ts[0].shape for t in ts):
        raise ShapeError(f"stack: shapes {[t.shape for t in ts]} differ")
    out = Tensor(np.stack([t.value for t in ts], axis=axis))
    ax = axis % out.value.ndim

    def backward(g, acc):
        for i, t in enumerate(ts):
            if t.requires_grad:
                acc(t, np.take(g, i, axis=ax))

    return _record(out, tuple(ts), backward, "stack")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    try:
        val = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    out = Tensor(val)
    return _record(out, (a,), lambda g, acc: acc(a, g.reshape(a.shape)), "reshape")


def repeat_time(a, steps: int) -> Tensor:
    """(B, k) -> (B, steps, k) by copying each row along a new time axis."""
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError(f"repeat_time: expected (B, k), got {a.shape}")
    out = Tensor(np.repeat(a.value[:, None, :], steps, axis=1))
    return _record(out, (a,), lambda g, acc: acc(a, g.sum(axis=1)), "repeat_time")


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sum(a.value))
    return _record(out, (a,), lambda g, acc: acc(a, np.full(a.shape, float(g))), "sum")


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.value.size
    out = Tensor(np.mean(a.value))
    return _record(out, (a,), lambda g, acc: acc(a, np.full(a.shape, float(g) / n)), "mean")


def square(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.value * a.value)
    return _record(out, (a,), lambda g, acc: acc(a, 2.0 * g * a.value), "square")


def bce_with_logits(logits, labels) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    x, y = _as_tensor(logits), _as_tensor(labels)
    if x.shape != y.shape:
        raise ShapeError(f"bce_with_logits: shapes {x.shape} and {y.shape} do not conform")
    xv, yv = x.value, y.value
    out = Tensor(np.maximum(xv, 0.0) - xv * yv + np.log1p(np.exp(-np.abs(xv))))

    def backward(g, acc):
        acc(x, g * (_sigmoid(xv) - yv))

    return _record(out, (x, y), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# GRU
#
# Gate layout along the 3H axis is [update z | reset r | candidate n]:
#   z = sigmoid(x Wz + h Uz + bz)
#   r = sigmoid(x Wr + h Ur + br)
#   n = tanh(x Wn + (r * h) Un + bn)
#   h' = (1 - z) * n + z * h
# with h0 = 0. h' is a convex combination of h and n, so |h| < 1 always.


def gru_scan(x, w, u, b) -> Tensor:
    """Run a GRU over (B, T, D) inputs; returns every hidden state (B, T, H).

    Single fused tape node with hand-written backpropagation through time.
    ``gru_scan_composite`` builds the same graph from elementary primitives
    and serves as its cross-check.
    """
    x, w, u, b = (_as_tensor(t) for t in (x, w, u, b))
    if x.value.ndim != 3:
        raise ShapeError(f"gru: expected (B, T, D) input, got {x.shape}")
    hdim = u.shape[0]
    if (
        u.shape != (hdim, 3 * hdim)
        or w.shape != (x.shape[2], 3 * hdim)
        or b.shape != (3 * hdim,)
    ):
        raise ShapeError(f"gru: x {x.shape}, W {w.shape}, U {u.shape}, b {b.shape} do not conform")
    bsz, steps, _ = x.shape
    uv = u.value
    u_zr, u_n = uv[:, : 2 * hdim], uv[:, 2 * hdim :]
    proj = _rows_matmul(x.value, w.value) + b.value
    hs = np.empty((bsz, steps, hdim))
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    ns = np.empty_like(hs)
    h = np.zeros((bsz, hdim))
    for t in range(steps):
        p = proj[:, t]
        zr = _sigmoid(p[:, : 2 * hdim] + h @ u_zr)
        z, r = zr[:, :hdim], zr[:, hdim:]
        n = np.tanh(p[:, 2 * hdim :] + (r * h) @ u_n)
        h = n + z * (h - n)
        zs[:, t], rs[:, t], ns[:, t], hs[:, t] = z, r, n, h
    out = Tensor(hs)

    def backward(g, acc):
        need_u = u.requires_grad
        dproj = np.empty((bsz, steps, 3 * hdim))
        du = np.zeros_like(uv) if need_u else None
        dh_next = np.zeros((bsz, hdim))
        for t in range(steps - 1, -1, -1):
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((bsz, hdim))
            z, r, n = zs[:, t], rs[:, t], ns[:, t]
            dh = g[:, t] + dh_next
            da_n = dh * (1.0 - z) * (1.0 - n * n)
            da_z = dh * (h_prev - n) * z * (1.0 - z)
            d_rh = da_n @ u_n.T
            da_r = d_rh * h_prev * r * (1.0 - r)
            dproj[:, t, :hdim] = da_z
            dproj[:, t, hdim : 2 * hdim] = da_r
            dproj[:, t, 2 * hdim :] = da_n
            da_zr = dproj[:, t, : 2 * hdim]
            dh_next = dh * z + d_rh * r + da_zr @ u_zr.T
            if need_u:
                du[:, : 2 * hdim] += h_prev.T @ da_zr
                du[:, 2 * hdim :] += (r * h_prev).T @ da_n
        if need_u:
            acc(u, du)
        flat = dproj.reshape(-1, 3 * hdim)
        if w.requires_grad:
            acc(w, x.value.reshape(-1, x.shape[2]).T @ flat)
        if b.requires_grad:
            acc(b, flat.sum(axis=0))
        if x.requires_grad:
            acc(x, dproj @ w.value.T)

    return _record(out, (x, w, u, b), backward, "gru")


def gru_scan_composite(x, w, u, b) -> Tensor:
    """Same recurrence as ``gru_scan`` assembled from elementary primitives."""
    x, w, u, b = (_as_tensor(t) for t in (x, w, u, b))
    bsz, steps, _ = x.shape
    hdim = u.shape[0]
    proj = add(matmul(x, w), b)
    u_zr = slice_(u, (slice(None), slice(0, 2 * hdim)))
    u_n = slice_(u, (slice(None), slice(2 * hdim, 3 * hdim)))
    h = constant(np.zeros((bsz, hdim)))
    outs = []
    for t in range(steps):
        p = slice_(proj, (slice(None), t))
        zr = sigmoid(add(slice_(p, (slice(None), slice(0, 2 * hdim))), matmul(h, u_zr)))
        z = slice_(zr, (slice(None), slice(0, hdim)))
        r = slice_(zr, (slice(None), slice(hdim, 2 * hdim)))
        n = tanh(add(slice_(p, (slice(None), slice(2 * hdim, 3 * hdim))), matmul(mul(r, h), u_n)))
        h = add(n, mul(z, sub(h, n)))
        outs.append(h)
    return stack(outs, axis=1)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if set(grads) != set(params):
        missing = sorted(set(params) ^ set(grads))
        raise KeyError(f"adam_step: parameter/gradient keys differ: {missing}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {key!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple[str, tuple[int, ...]] | None = None

    def __str__(self) -> str:
        return (
            f"max relative error {self.max_rel_error:.3e} over {self.checked} coordinates "
            f"({self.skipped} skipped at relu kinks)"
        )


def gradcheck(
    loss_fn: Callable[[dict[str, np.ndarray]], float | np.ndarray],
    params: dict[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckResult:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``loss_fn`` must evaluate the loss at the (temporarily perturbed) arrays in
    ``params``. It may return the per-cell contributions whose sum is the
    loss; the difference L(θ+h) - L(θ-h) is then summed term by term, which
    keeps the rounding of the total out of the numerator. Coordinates whose perturbation changes any relu activation
    pattern are skipped and counted. With ``max_coords`` set, a uniform random
    sample of that many coordinates is checked instead of all of them.
    """
    coords = [(k, idx) for k in sorted(params) for idx in np.ndindex(params[k].shape)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    with relu_patterns() as base:
        loss_fn(params)
    base = [m.copy() for m in base]

    def probe() -> tuple[np.ndarray, bool]:
        with relu_patterns() as pats:
            val = np.atleast_1d(np.asarray(loss_fn(params), dtype=np.float64))
        same = len(pats) == len(base) and all(np.array_equal(a, b) for a, b in zip(pats, base))
        return val, same

    worst_err, worst, checked, skipped = 0.0, None, 0, 0
    for key, idx in coords:
        arr = params[key]
        orig = arr[idx]
        arr[idx] = orig + h
        up, same_up = probe()
        arr[idx] = orig - h
        down, same_down = probe()
        arr[idx] = orig
        if not (same_up and same_down):
            skipped += 1
            continue
        numeric = math.fsum(up - down) / (2.0 * h)
        a = float(analytic[key][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        checked += 1
        if err > worst_err:
            worst_err, worst = err, (key, idx)
    return GradcheckResult(worst_err, checked, skipped, worst)
