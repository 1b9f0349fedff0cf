"""Small reverse-mode differentiation engine over float64 numpy arrays.

Every op is recorded on a :class:`Graph` in call order; ``Graph.backward``
walks the record in reverse exactly once. Shapes are never broadcast: each op
states its own shape rule and rejects anything else.

    g = Graph()
    w = g.leaf([1.0, 2.0])
    loss = sum_all(square(w))
    grads = g.backward(loss)
    grads[w]  # -> array([2., 4.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class Tensor:
    """A dense float64 value, optionally tracked by a graph."""

    __slots__ = ("data", "graph", "requires_grad", "_id")

    def __init__(self, data, graph: "Graph | None" = None, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError("non-finite value admitted into graph")
        self.data = arr
        self.graph = graph
        self.requires_grad = requires_grad
        self._id = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Gradients:
    """Map from differentiable leaf to its gradient array.

    Leaves that the loss does not depend on get a zero array of their shape.
    """

    _grads: dict[int, np.ndarray] = field(default_factory=dict)
    _leaves: dict[int, Tensor] = field(default_factory=dict)

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        if id(leaf) not in self._leaves:
            raise KeyError("tensor is not a differentiable leaf of this graph")
        g = self._grads.get(id(leaf))
        return np.zeros(leaf.shape) if g is None else g

    def __contains__(self, leaf: Tensor) -> bool:
        return id(leaf) in self._grads

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


class Graph:
    """Single-writer record of primitive ops."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        t = Tensor(value, self, requires_grad)
        if requires_grad:
            self._leaves[id(t)] = t
        return t

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def _record(self, op, inputs, out_data, vjp) -> Tensor:
        out = Tensor.__new__(Tensor)
        if not np.isfinite(out_data).all():
            raise NonFiniteError(f"{op}: produced non-finite output")
        # ascontiguousarray would promote 0-d results to 1-d
        out.data = np.require(np.asarray(out_data, dtype=np.float64), requirements="C")
        out.graph = self
        out.requires_grad = any(t.requires_grad for t in inputs)
        out._id = -1
        if out.requires_grad:
            out._id = len(self.nodes)
            self.nodes.append(_Node(op, tuple(inputs), out, vjp))
        return out

    def backward(self, loss: Tensor, retain_graph: bool = False) -> Gradients:
        """Reverse pass from a scalar loss.

        Unless ``retain_graph`` is set the recorded nodes are dropped afterwards;
        they form reference cycles with their outputs, and large intermediate
        arrays would otherwise wait for the cyclic collector.
        """
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if loss.graph is not self:
            raise ValueError("backward: loss was not recorded on this graph")
        grads = Gradients(_leaves=dict(self._leaves))
        if not loss.requires_grad:
            return grads
        if loss._id >= len(self.nodes):
            raise RuntimeError("backward: graph already released; pass retain_graph=True to reuse it")
        # adjoints keyed by tensor identity; nodes visited once in reverse order
        adj: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for node in reversed(self.nodes[: loss._id + 1]):
            g_out = adj.pop(id(node.output), None)
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.vjp(g_out)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in adj:
                    adj[key] = adj[key] + g
                else:
                    adj[key] = g
        for key in self._leaves:
            if key in adj:
                grads._grads[key] = adj[key]
        if not retain_graph:
            self.nodes.clear()
        return grads


def backward(loss: Tensor, retain_graph: bool = False) -> Gradients:
    if loss.graph is None:
        raise ValueError("backward: loss has no graph")
    return loss.graph.backward(loss, retain_graph)


def _graph_of(*ts: Tensor) -> Graph:
    # only tracked inputs must agree; untracked values can join any graph
    tracked = {id(t.graph): t.graph for t in ts if t.graph is not None and t.requires_grad}
    if len(tracked) > 1:
        raise ValueError("inputs belong to different graphs")
    if tracked:
        return next(iter(tracked.values()))
    for t in ts:
        if t.graph is not None:
            return t.graph
    return Graph()


def _as_tensor(x, graph: Graph) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return graph.constant(x)


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(*(t for t in (a, b) if isinstance(t, Tensor)))
    a, b = _as_tensor(a, g), _as_tensor(b, g)
    _same_shape("add", a, b)
    return g._record("add", (a, b), a.data + b.data, lambda go: (go, go))


def sub(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(*(t for t in (a, b) if isinstance(t, Tensor)))
    a, b = _as_tensor(a, g), _as_tensor(b, g)
    _same_shape("sub", a, b)
    return g._record("sub", (a, b), a.data - b.data, lambda go: (go, -go))


def mul(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(*(t for t in (a, b) if isinstance(t, Tensor)))
    a, b = _as_tensor(a, g), _as_tensor(b, g)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return g._record("mul", (a, b), ad * bd, lambda go: (go * bd, go * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale: non-finite factor")
    return _graph_of(a)._record("scale", (a,), a.data * c, lambda go: (go * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _graph_of(a)._record("square", (a,), ad * ad, lambda go: (2.0 * ad * go,))


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    on = a.data > 0
    return _graph_of(a)._record("relu", (a,), np.where(on, a.data, 0.0), lambda go: (go * on,))


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _graph_of(a)._record("sigmoid", (a,), s, lambda go: (go * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), used for logistic losses."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _stable_sigmoid(x)
    return _graph_of(a)._record("softplus", (a,), out, lambda go: (go * s,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _graph_of(a)._record(
        "sum", (a,), np.asarray(a.data.sum()), lambda go: (np.full(shape, float(go)),)
    )


def mean(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {a.shape}")
    axis = axis % a.data.ndim
    n = a.shape[axis]
    if n == 0:
        raise ShapeError(f"mean: empty axis {axis} in shape {a.shape}")

    def vjp(go):
        return (np.broadcast_to(np.expand_dims(go, axis) / n, a.shape).copy(),)

    return _graph_of(a)._record("mean", (a,), a.data.mean(axis=axis), vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(*(t for t in (a, b) if isinstance(t, Tensor)))
    a, b = _as_tensor(a, g), _as_tensor(b, g)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return g._record("matmul", (a, b), ad @ bd, lambda go: (go @ bd.T, ad.T @ go))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-F vector to every row of x (shape (..., F))."""
    g = _graph_of(x, b)
    if b.data.ndim != 1 or x.data.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: shape mismatch {x.shape} + {b.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return g._record("bias_add", (x, b), x.data + b.data, lambda go: (go, go.sum(axis=lead)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _graph_of(a)._record("reshape", (a,), a.data.reshape(shape), lambda go: (go.reshape(old),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    if not ts:
        raise ShapeError("concat: no inputs")
    g = _graph_of(*ts)
    nd = ts[0].data.ndim
    axis = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or any(
            t.shape[i] != ts[0].shape[i] for i in range(nd) if i != axis
        ):
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape}")
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(go):
        return tuple(np.split(go, bounds, axis=axis))

    return g._record("concat", tuple(ts), np.concatenate([t.data for t in ts], axis=axis), vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or a.data.ndim < 1:
        raise ShapeError(f"gather_rows: bad index shape {idx.shape} for {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape}")
    shape = a.shape

    def vjp(go):
        out = np.zeros(shape)
        np.add.at(out, idx, go)
        return (out,)

    return _graph_of(a)._record("gather_rows", (a,), a.data[idx], vjp)


# ---------------------------------------------------------------- convolution


def conv_output_size(n: int, stride: int) -> int:
    return -(-n // stride)


def _same_pad(n: int, k: int, stride: int) -> tuple[int, int]:
    out = conv_output_size(n, stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """'Same' zero-padded 2-D convolution (cross-correlation).

    x: (N, H, W, Cin); w: (kh, kw, Cin, Cout) -> (N, ceil(H/s), ceil(W/s), Cout).
    """
    g = _graph_of(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} * {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = _same_pad(h, kh, stride), _same_pad(wd, kw, stride)
    oh, ow = conv_output_size(h, stride), conv_output_size(wd, stride)
    xp = np.pad(x.data, ((0, 0), ph, pw, (0, 0)))
    wdat = w.data
    out = np.zeros((n, oh, ow, cout))
    for i in range(kh):
        for j in range(kw):
            win = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
            out += win @ wdat[i, j]

    def vjp(go):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wdat)
        flat_go = go.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(i, i + stride * oh, stride), slice(j, j + stride * ow, stride))
                win = xp[sl]
                gw[i, j] = win.reshape(-1, cin).T @ flat_go
                gxp[sl] += go @ wdat[i, j].T
        gx = gxp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + wd, :]
        return gx, gw

    return g._record("conv2d", (x, w), out, vjp)


# ---------------------------------------------------------------- sampling


def bilinear_sample(src: Tensor, grid) -> Tensor:
    """Sample an (H, W, C) source at fractional (row, col) coordinates.

    ``grid`` is a constant array of shape (..., 2). Coordinates are clamped to
    the source extent (clamp-to-edge). Returns shape (..., C).
    """
    grid = np.asarray(grid, dtype=np.float64)
    if src.data.ndim != 3 or grid.ndim < 1 or grid.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample: shape mismatch {src.shape} with grid {grid.shape}")
    if not np.isfinite(grid).all():
        raise NonFiniteError("bilinear_sample: non-finite grid")
    h, w, c = src.shape
    r = np.clip(grid[..., 0], 0.0, h - 1)
    q = np.clip(grid[..., 1], 0.0, w - 1)
    r0 = np.floor(r).astype(np.intp)
    q0 = np.floor(q).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    q1 = np.minimum(q0 + 1, w - 1)
    fr = (r - r0)[..., None]
    fq = (q - q0)[..., None]
    d = src.data
    w00, w01, w10, w11 = (1 - fr) * (1 - fq), (1 - fr) * fq, fr * (1 - fq), fr * fq
    out = w00 * d[r0, q0] + w01 * d[r0, q1] + w10 * d[r1, q0] + w11 * d[r1, q1]

    def vjp(go):
        gs = np.zeros((h * w, c))
        for rr, qq, ww in ((r0, q0, w00), (r0, q1, w01), (r1, q0, w10), (r1, q1, w11)):
            np.add.at(gs, (rr * w + qq).ravel(), (ww * go).reshape(-1, c))
        return (gs.reshape(h, w, c),)

    return _graph_of(src)._record("bilinear_sample", (src,), out, vjp)


def masked_blend(mask, base: Tensor, overlay: Tensor) -> Tensor:
    """base where mask == 0, overlay where mask == 1; mask is constant."""
    g = _graph_of(*(t for t in (base, overlay) if isinstance(t, Tensor)))
    base, overlay = _as_tensor(base, g), _as_tensor(overlay, g)
    mask = np.asarray(mask, dtype=np.float64)
    _same_shape("masked_blend", base, overlay)
    if mask.shape != base.shape:
        raise ShapeError(f"masked_blend: mask shape {mask.shape} vs {base.shape}")
    inv = 1.0 - mask
    out = base.data * inv + overlay.data * mask
    return g._record("masked_blend", (base, overlay), out, lambda go: (go * inv, go * mask))
