"""Dense float64 tensors with a tape-based reverse mode, parameter storage and Adam.

Tensors wrap numpy arrays. An operation records itself on a :class:`Graph` only
when at least one input is attached to a graph; with ``graph=None`` the same
code path evaluates forward values without any bookkeeping, which is how
gradient-free renders (reference pixels, EMA evaluation) run.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

DTYPE = np.float64


class NumericsError(RuntimeError):
    """Raised for invalid graph usage or non-finite values."""


class ConfigError(ValueError):
    """Raised when shapes or hyperparameters are inconsistent."""


# ---------------------------------------------------------------------------
# graph and tensors
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    param: str | None = None
    detached: bool = False
    op: str = ""


class Graph:
    """Topologically ordered record of differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: _Node) -> int:
        if self.consumed:
            raise NumericsError("graph already consumed by backward(); record a new one")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, store: "ParamStore", name: str) -> "Tensor":
        """Leaf tensor bound to ``store[name]``; backward accumulates into its gradient."""
        value = store.params[name]
        idx = self._push(_Node((), None, param=name, op="param"))
        return Tensor(value, self, idx)

    def leaf(self, value: np.ndarray) -> "Tensor":
        """A differentiable input that is not a parameter (used by tests and probes)."""
        idx = self._push(_Node((), None, op="leaf"))
        return Tensor(np.asarray(value, dtype=DTYPE), self, idx)


class Tensor:
    __slots__ = ("value", "graph", "index")

    def __init__(self, value, graph: Graph | None = None, index: int = -1) -> None:
        self.value = np.asarray(value, dtype=DTYPE)
        self.graph = graph
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.graph is not None and self.index >= 0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _record(
    value: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    graph = None
    for p in parents:
        if p.tracked:
            if graph is None:
                graph = p.graph
            elif p.graph is not graph:
                raise NumericsError("operands recorded on different graphs")
    if graph is None:
        return Tensor(value)
    idx = graph._push(_Node(tuple(parents), backward, op=op))
    return Tensor(value, graph, idx)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record(
        av * bv,
        (a, b),
        lambda g: (
            _unbroadcast(g * bv, av.shape) if a.tracked else None,
            _unbroadcast(g * av, bv.shape) if b.tracked else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, av.shape) if a.tracked else None,
            _unbroadcast(-g * out / bv, bv.shape) if b.tracked else None,
        ),
        "div",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ConfigError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    return _record(
        av @ bv,
        (a, b),
        lambda g: (g @ bv.T if a.tracked else None, av.T @ g if b.tracked else None),
        "matmul",
    )


def linear(x, w, b) -> Tensor:
    """Affine map ``x @ w + b`` for row-batched ``x``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xv, wv = x.value, w.value
    if xv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ConfigError(f"linear input width {xv.shape} does not match weight {wv.shape}")
    return _record(
        xv @ wv + b.value,
        (x, w, b),
        lambda g: (
            g @ wv.T if x.tracked else None,
            xv.T @ g if w.tracked else None,
            g.sum(axis=0) if b.tracked else None,
        ),
        "linear",
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _record(x.value * mask, (x,), lambda g: (g * mask,), "relu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _record(
        np.logaddexp(0.0, xv), (x,), lambda g: (g * _sigmoid(xv),), "softplus"
    )


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.value)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.value)
    return _record(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _record(np.log(xv), (x,), lambda g: (g / xv,), "log")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.value)
    return _record(np.abs(x.value), (x,), lambda g: (g * s,), "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _record(xv * xv, (x,), lambda g: (2.0 * g * xv,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    r = np.sqrt(x.value)
    return _record(r, (x,), lambda g: (0.5 * g / r,), "sqrt")


def sum_(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.value for t in ts], axis=axis), ts, back, "concat")


def columns(x, lo: int, hi: int) -> Tensor:
    """Column slice ``x[:, lo:hi]``."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[:, lo:hi] = g
        return (out,)

    return _record(x.value[:, lo:hi], (x,), back, "columns")


def take_rows(x, rows: np.ndarray) -> Tensor:
    """Gather ``x[rows]`` along axis 0; backward scatters with repeats summed in row order."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, rows, g)
        return (out,)

    return _record(x.value[rows], (x,), back, "take_rows")


def exclusive_cumsum(x, axis: int = -1) -> Tensor:
    """``out[..., i] = sum_{j<i} x[..., j]``."""
    x = as_tensor(x)
    c = np.cumsum(x.value, axis=axis)
    out = c - x.value

    def back(g):
        # d out_i / d x_j = 1 for j < i  ->  grad_j = sum_{i>j} g_i
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g,)

    return _record(out, (x,), back, "exclusive_cumsum")


def dot_rows(a, b) -> Tensor:
    """Row-wise dot product of two ``(n, c)`` tensors, giving ``(n,)``."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record(
        np.einsum("nc,nc->n", av, bv),
        (a, b),
        lambda g: (
            g[:, None] * bv if a.tracked else None,
            g[:, None] * av if b.tracked else None,
        ),
        "dot_rows",
    )


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    m = np.max(xv, axis=axis, keepdims=True)
    e = np.exp(xv - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s
    return _record(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Row-wise ``x / max(|x|, eps)``; exact for rows that are already unit length."""
    x = as_tensor(x)
    xv = x.value
    raw = np.sqrt(np.sum(xv * xv, axis=-1, keepdims=True))
    clamped = raw < eps
    norm = np.where(clamped, eps, raw)
    y = xv / norm

    def back(g):
        # clamped rows are a plain scaling by 1/eps
        proj = np.where(clamped, 0.0, np.sum(g * y, axis=-1, keepdims=True))
        return ((g - y * proj) / norm,)

    return _record(y, (x,), back, "l2_normalize")


def detach(x) -> Tensor:
    """Same value; the recorded node passes no gradient to its input."""
    x = as_tensor(x)
    if not x.tracked:
        return Tensor(x.value)
    idx = x.graph._push(_Node((x,), None, detached=True, op="detach"))
    return Tensor(x.value, x.graph, idx)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ParamStore:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray, group: str = "mlp") -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=DTYPE)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.groups[name] = group

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def size(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore(step=self.step)
        for n in self.params:
            out.params[n] = self.params[n].copy()
            out.grads[n] = self.grads[n].copy()
            out.m[n] = self.m[n].copy()
            out.v[n] = self.v[n].copy()
            out.groups[n] = self.groups[n]
        return out


def backward(graph: Graph, output: Tensor, store: ParamStore | None, seed=None) -> dict[int, np.ndarray]:
    """Reverse sweep from ``output`` accumulating parameter gradients into ``store``.

    Returns gradients of non-parameter leaves keyed by node index.
    """
    if graph.consumed:
        raise NumericsError("backward() called twice on the same graph")
    if output.graph is not graph or not output.tracked:
        raise NumericsError("output is not recorded on this graph")
    seed = np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=DTYPE)
    if seed.shape != output.shape:
        raise NumericsError(f"seed shape {seed.shape} != output shape {output.shape}")
    graph.consumed = True
    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[output.index] = seed
    leaves: dict[int, np.ndarray] = {}
    for i in range(output.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        grads[i] = None
        node = graph.nodes[i]
        if node.param is not None:
            if store is not None:
                store.grads[node.param] += g
            continue
        if node.op == "leaf":
            leaves[i] = g
            continue
        if node.detached:
            continue
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.tracked:
                continue
            if grads[p.index] is None:
                grads[p.index] = pg
            else:
                grads[p.index] = grads[p.index] + pg
    return leaves


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


def init_mlp(store: ParamStore, name: str, sizes: Sequence[int], rng: np.random.Generator) -> None:
    """He-uniform weights, zero biases, registered as ``{name}.w{i}`` / ``{name}.b{i}``."""
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / fan_in)
        store.add(f"{name}.w{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{name}.b{i}", np.zeros(fan_out))


def mlp_layers(store: ParamStore, name: str) -> int:
    n = 0
    while f"{name}.w{n}" in store:
        n += 1
    return n


def mlp_forward(store: ParamStore, name: str, x, graph: Graph | None) -> Tensor:
    """ReLU MLP with a linear last layer."""
    x = as_tensor(x)
    n = mlp_layers(store, name)
    if n == 0:
        raise ConfigError(f"no MLP named {name!r}")
    width = store[f"{name}.w0"].shape[0]
    if x.value.ndim != 2 or x.shape[1] != width:
        raise ConfigError(f"{name}: input width {x.shape} does not match first layer ({width})")
    h = x
    for i in range(n):
        if graph is not None:
            w, b = graph.param(store, f"{name}.w{i}"), graph.param(store, f"{name}.b{i}")
        else:
            w, b = Tensor(store[f"{name}.w{i}"]), Tensor(store[f"{name}.b{i}"])
        h = linear(h, w, b)
        if i < n - 1:
            h = relu(h)
    return h


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(
    store: ParamStore,
    lr: float | Mapping[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-15,
) -> None:
    """Bias-corrected Adam update; ``lr`` may map parameter groups to rates."""
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient in {name!r}; step aborted")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        rate = lr if isinstance(lr, (int, float)) else lr[store.groups[name]]
        p -= rate * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_difference_check(
    loss_fn: Callable[[ParamStore, Graph | None], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    samples: int = 32,
    rng_seed: int = 0,
    floor: float = 1e-7,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between backward() and central differences.

    ``loss_fn(store, graph)`` must return a scalar tensor and be deterministic.
    Half of the probed entries are drawn among entries with a nonzero analytic
    gradient, the rest uniformly over all entries. The error for one entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not eps > 0:
        raise ConfigError("finite difference step must be positive")
    names = list(names) if names is not None else store.names()
    store.zero_grad()
    graph = Graph()
    loss = loss_fn(store, graph)
    if not np.isfinite(loss.value).all():
        raise NumericsError("loss is not finite")
    backward(graph, loss, store)
    analytic = {n: store.grads[n].copy() for n in names}

    rng = np.random.default_rng(rng_seed)
    sizes = np.array([store[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat_grad = np.concatenate([analytic[n].ravel() for n in names])
    nonzero = np.flatnonzero(flat_grad)
    picks = list(rng.integers(0, offsets[-1], size=samples - samples // 2))
    if nonzero.size:
        picks += list(rng.choice(nonzero, size=samples // 2))

    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, j = names[k], int(flat - offsets[k])
        p = store[name].reshape(-1)
        orig = p[j]
        p[j] = orig + eps
        lp = float(loss_fn(store, None).value)
        p[j] = orig - eps
        lm = float(loss_fn(store, None).value)
        p[j] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericsError("loss became non-finite under perturbation")
        num = (lp - lm) / (2 * eps)
        a = analytic[name].reshape(-1)[j]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PVLF"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, store: ParamStore, header: Mapping[str, str] | None = None) -> None:
    """Write parameters as ``PVLF`` + u32 version + header text + tensors (little-endian)."""
    text = "".join(f"{k}={v}\n" for k, v in (header or {}).items()).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(text)), text]
    parts.append(struct.pack("<I", len(store.params)))
    for name, value in store.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise NumericsError(f"{path}: not a PVLF checkpoint")
    pos = 4
    version, hlen = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise NumericsError(f"{path}: unsupported checkpoint version {version}")
    header = {}
    for line in data[pos : pos + hlen].decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        header[k] = v
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(shape))
            if pos + 8 * n > len(data):
                raise NumericsError(f"{path}: truncated tensor {name!r}")
            params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
            pos += 8 * n
    except struct.error as exc:
        raise NumericsError(f"{path}: truncated checkpoint") from exc
    return params, header
