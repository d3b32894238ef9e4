"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records a node on the active :class:`Graph` when one of its
inputs requires gradients.  :func:`backward` walks the tape once, in reverse,
and deposits gradients on the leaf tensors.
"""

from __future__ import annotations

import builtins
import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import sparse

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Input shapes are invalid for a primitive."""


class UnknownPrimitiveError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


class NondeterminismError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        raise TypeError("use gather() for differentiable indexing")


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple]


class Graph:
    """Append-only tape of primitive applications."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._ids: dict[int, int] = {}
        self._tensors: dict[int, Tensor] = {}
        self._next = 0
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def node_id(self, t: Tensor) -> int | None:
        return self._ids.get(id(t))

    def tensor(self, nid: int) -> Tensor:
        return self._tensors[nid]

    def _register(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = self._next
            self._next += 1
            self._ids[id(t)] = nid
            self._tensors[nid] = t
        return nid

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, vjp) -> None:
        if self.consumed:
            raise BackwardError("graph already consumed by backward(); call reset_graph() first")
        in_ids = tuple(self._register(t) for t in inputs)
        self.nodes.append(Node(kind, in_ids, self._register(out), vjp))

    def relabel(self, mapping: dict[int, int]) -> "Graph":
        """Copy of this graph with node ids renamed through a bijection."""
        if sorted(mapping) != sorted(self._tensors) or len(set(mapping.values())) != len(mapping):
            raise ValueError("mapping must be a bijection over the graph's ids")
        g = Graph()
        g._tensors = {mapping[k]: t for k, t in self._tensors.items()}
        g._ids = {id(t): k for k, t in g._tensors.items()}
        g._next = builtins.max(mapping.values()) + 1 if mapping else 0
        g.nodes = [
            Node(n.kind, tuple(mapping[i] for i in n.inputs), mapping[n.output], n.vjp)
            for n in self.nodes
        ]
        return g

    def reset(self) -> None:
        self.nodes.clear()
        self._ids.clear()
        self._tensors.clear()
        self._next = 0
        self.consumed = False


class _State:
    graph = Graph()
    grad_enabled = True


def current_graph() -> Graph:
    return _State.graph


def reset_graph() -> None:
    _State.graph.reset()


@contextlib.contextmanager
def use_graph(graph: Graph | None = None) -> Iterator[Graph]:
    """Route primitive recording to ``graph`` (a fresh one by default)."""
    prev = _State.graph
    _State.graph = Graph() if graph is None else graph
    try:
        yield _State.graph
    finally:
        _State.graph = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _State.grad_enabled
    _State.grad_enabled = False
    try:
        yield
    finally:
        _State.grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    needs = _State.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    if needs:
        _State.graph.record(kind, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _norm_axis(kind: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{kind}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # one large GEMM instead of numpy's per-batch loop
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def vjp2(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", (a, b), out, vjp2)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), a.data * b.data, vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", (a, b), out, vjp)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit("scalar-mul", (x,), x.data * c, lambda g: (g * c,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = _norm_axis("concat", axis, ts[0].ndim)
    ref = list(ts[0].shape)
    for t in ts[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:ax] + s[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat(axis={axis}): mismatched shapes {[t.shape for t in ts]}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", ts, np.concatenate([t.data for t in ts], axis=ax), vjp)


def gather(x, index) -> Tensor:
    """Select rows along axis -2: ``(..., n, d)`` -> ``(..., *index.shape, d)``."""
    x = as_tensor(x)
    idx = np.asarray(index)
    if x.ndim < 2:
        raise ShapeError(f"gather: need rank >= 2, got shape {x.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather: integer index required, got {idx.dtype}")
    n = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather: index out of range for {n} rows (shape {x.shape})")
    lead = x.shape[:-2]
    d = x.shape[-1]
    out = x.data[..., idx, :]

    def vjp(g):
        # scatter-add as a sparse (n, |idx|) one-hot product; much faster than np.add.at
        flat = idx.reshape(-1)
        scatter = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size))
        lead_n = int(np.prod(lead, dtype=int))
        g2 = np.moveaxis(g.reshape(lead_n, flat.size, d), 1, 0).reshape(flat.size, lead_n * d)
        gx = np.asarray(scatter @ g2).reshape(n, lead_n, d)
        return (np.moveaxis(gx, 1, 0).reshape(x.shape),)

    return _emit("gather", (x,), out, vjp)


def _reduce_axes(kind, axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_norm_axis(kind, a, ndim) for a in axis))


def select(x, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""
    x = as_tensor(x)
    if x.ndim < 1 or not -x.shape[0] <= i < x.shape[0]:
        raise ShapeError(f"select: index {i} out of range for shape {x.shape}")

    def vjp(g):
        gx = np.zeros(x.shape)
        gx[i] = g
        return (gx,)

    return _emit("select", (x,), x.data[i], vjp)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _reduce_axes("reduce_sum", axis, x.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("reduce_sum", (x,), x.data.sum(axis=axes, keepdims=keepdims), vjp)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _reduce_axes("reduce_mean", axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=int))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit("reduce_mean", (x,), x.data.mean(axis=axes, keepdims=keepdims), vjp)


def max(x, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; tied maxima share the gradient equally."""
    x = as_tensor(x)
    ax = _norm_axis("max", axis, x.ndim)
    out = x.data.max(axis=ax, keepdims=keepdims)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        ok = out if keepdims else np.expand_dims(out, ax)
        hit = x.data == ok
        share = gk / hit.sum(axis=ax, keepdims=True)
        return (np.where(hit, share, 0.0),)

    return _emit("max", (x,), out, vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis("softmax", axis, x.ndim)
    e = np.exp(x.data - x.data.max(axis=ax, keepdims=True))
    s = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _emit("softmax", (x,), s, vjp)


def log(x) -> Tensor:
    """Natural log with the input clamped at ``LOG_FLOOR``."""
    x = as_tensor(x)
    live = x.data > LOG_FLOOR
    safe = np.where(live, x.data, LOG_FLOOR)
    return _emit("log", (x,), np.log(safe), lambda g: (np.where(live, g / safe, 0.0),))


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _emit("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def l2_norm(x, axis: int = -1, keepdims: bool = True, floor: float = 0.0) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis("l2_norm", axis, x.ndim)
    raw = np.sqrt((x.data * x.data).sum(axis=ax, keepdims=True))
    live = raw > floor
    n = np.where(live, raw, floor)
    out = n if keepdims else np.squeeze(n, ax)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = np.where(live, g * x.data / np.where(live, raw, 1.0), 0.0)
        return (gx,)

    return _emit("l2_norm", (x,), out, vjp)


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Standardize along ``axis`` (no affine part)."""
    x = as_tensor(x)
    ax = _norm_axis("layer_norm", axis, x.ndim)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=ax, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=ax, keepdims=True)
        gxm = (g * xhat).mean(axis=ax, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _emit("layer_norm", (x,), xhat, vjp)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: need rank >= 2, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid permutation {axes} for shape {x.shape}")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def broadcast(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from None
    return _emit("broadcast", (x,), out, lambda g: (_unbroadcast(g, x.shape),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar-mul": scale,
    "concat": concat,
    "gather": gather,
    "select": select,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "max": max,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "abs": abs,
    "l2_norm": l2_norm,
    "layer_norm": layer_norm,
    "transpose": transpose,
    "broadcast": broadcast,
    "reshape": reshape,
}


def primitive_forward(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Apply a primitive by name, e.g. ``primitive_forward("softmax", [x], {"axis": -1})``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive kind {kind!r}") from None
    attrs = dict(attrs or {})
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ------------------------------------------------------------ differentiation


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    g = current_graph() if graph is None else graph
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if g.consumed:
        raise BackwardError("backward already ran on this graph; call reset_graph() first")
    if not g.nodes:
        raise BackwardError("graph is empty")
    lid = g.node_id(loss)
    if lid is None:
        raise BackwardError("loss was not produced on this graph")
    grads: dict[int, np.ndarray] = {lid: np.ones_like(loss.data)}
    for node in reversed(g.nodes):
        gout = grads.pop(node.output, None)
        if gout is None:
            continue
        for nid, gin in zip(node.inputs, node.vjp(gout)):
            if gin is None or not g.tensor(nid).requires_grad:
                continue
            prev = grads.get(nid)
            grads[nid] = gin if prev is None else prev + gin
    for nid, gv in grads.items():
        t = g.tensor(nid)
        if t.requires_grad:
            t.grad = np.array(gv, dtype=np.float64) if t.grad is None else t.grad + gv
    g.consumed = True


def grad_of(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Evaluate ``f`` on a private graph and return gradients for ``params``."""
    for p in params:
        p.grad = None
    with use_graph():
        loss = f()
        backward(loss)
    return [np.zeros(p.shape) if p.grad is None else p.grad for p in params]


def finite_difference_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``x`` may be one tensor or several; ``f(x)`` must return a scalar tensor.
    With ``max_coords`` only a seeded random subset of coordinates per tensor
    is probed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
    analytic = grad_of(lambda: f(x), xs)

    def value() -> float:
        with no_grad():
            out = f(x)
        if out.data.size != 1:
            raise BackwardError("finite_difference_check needs a scalar-valued f")
        return float(out.data.reshape(-1)[0])

    if value() != value():
        raise NondeterminismError("f returned different values on identical inputs")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(xs, analytic):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        gflat = ga.reshape(-1)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + step
            hi = value()
            flat[k] = orig - step
            lo = value()
            flat[k] = orig
            num = (hi - lo) / (2.0 * step)
            a = gflat[k]
            worst = np.fmax(worst, np.abs(a - num) / np.fmax(1.0, np.abs(a)))
    return float(worst)
