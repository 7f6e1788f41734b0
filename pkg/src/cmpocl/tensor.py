"""Dense 2-D float64 arrays with a small reverse-mode autodiff tape.

Every value is a 2-D ``float64`` array. Nodes are appended to their
:class:`Graph` as they are created, so insertion order is already a
topological order and :func:`backward` simply walks it in reverse.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-12


class ContractError(ValueError):
    """Raised when an operation is called with arguments violating its contract."""


class NumericError(ArithmeticError):
    """Raised when a computation produces or receives non-finite values."""


def as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ContractError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Node:
    __slots__ = ("graph", "value", "parents", "backward_fn", "op", "stop", "requires_grad", "_grad", "name")

    def __init__(self, graph, value, parents=(), backward_fn=None, op="leaf",
                 requires_grad=False, stop=False, name=None):
        self.graph = graph
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.stop = stop
        self.requires_grad = requires_grad
        self.name = name
        self._grad = None
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a scalar node, got shape {self.value.shape}")
        return float(self.value.reshape(()))

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Append-only tape of nodes.

    A graph supports a single backward pass; call :meth:`reset` to clear
    the accumulated gradients before differentiating again.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.backward_done = False

    def leaf(self, value, requires_grad=True, name=None) -> Node:
        return Node(self, as_matrix(value), requires_grad=requires_grad, name=name)

    def constant(self, value, name=None) -> Node:
        return Node(self, as_matrix(value), op="const", requires_grad=False, name=name)

    def reset(self):
        for node in self.nodes:
            node._grad = None
        self.backward_done = False

    def __len__(self):
        return len(self.nodes)


def _graph_of(*nodes: Node) -> Graph:
    graph = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not graph:
            raise ContractError("operands belong to different graphs")
    return graph


def _make(op, value, parents, backward_fn) -> Node:
    graph = _graph_of(*parents)
    req = any(p.requires_grad for p in parents)
    return Node(graph, value, parents, backward_fn if req else None, op=op, requires_grad=req)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(graph: Graph, loss: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(loss)/d(node) for every node, returning the leaf gradients."""
    if loss.graph is not graph:
        raise ContractError("loss node is not part of this graph")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if graph.backward_done:
        raise ContractError("backward already ran on this graph; call reset() first")
    graph.backward_done = True
    loss._grad = np.ones_like(loss.value)
    for node in reversed(graph.nodes):
        if node._grad is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(node._grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad or parent.stop:
                continue
            if parent._grad is None:
                parent._grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent._grad += g
    return {n: n.grad for n in graph.nodes if n.op == "leaf" and n.requires_grad}


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def _check_broadcast(a: Node, b: Node):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b)
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b)
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Node, b: Node) -> Node:
    _check_broadcast(a, b)
    return _make("mul", a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def scale(a: Node, s: float) -> Node:
    return _make("scale", a.value * s, (a,), lambda g: (g * s,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def square(a: Node) -> Node:
    return mul(a, a)


def total(a: Node) -> Node:
    """Sum of all elements as a 1x1 node."""
    return _make("sum", a.value.sum().reshape(1, 1), (a,),
                 lambda g: (np.broadcast_to(g, a.shape),))


def mean(a: Node) -> Node:
    n = a.value.size
    return _make("mean", a.value.mean().reshape(1, 1), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape),))


def row_sum(a: Node) -> Node:
    return _make("row_sum", a.value.sum(axis=1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, a.shape),))


def row_mean(a: Node) -> Node:
    n = a.shape[1]
    return _make("row_mean", a.value.mean(axis=1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape),))


def standardize_rows(a: Node, eps: float = 1e-5) -> Node:
    """Per-row zero mean / unit variance, no learned affine."""
    mu = a.value.mean(axis=1, keepdims=True)
    sigma = np.sqrt(a.value.var(axis=1, keepdims=True) + eps)
    y = (a.value - mu) / sigma

    def back(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return ((g - gm - y * gy) / sigma,)

    return _make("standardize_rows", y, (a,), back)


def transpose(a: Node) -> Node:
    return _make("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def row_slice(a: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= a.shape[0]:
        raise ContractError(f"row slice [{start}:{stop}] out of range for {a.shape[0]} rows")

    def back(g):
        out = np.zeros_like(a.value)
        out[start:stop] = g
        return (out,)

    return _make("row_slice", a.value[start:stop].copy(), (a,), back)


def vstack(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ContractError("vstack needs at least one node")
    cols = {n.shape[1] for n in nodes}
    if len(cols) != 1:
        raise ContractError(f"vstack column mismatch: {sorted(cols)}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])
    return _make("vstack", np.vstack([n.value for n in nodes]), tuple(nodes),
                 lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(nodes))))


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return _make("matmul", a.value @ b.value, (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g))


def stop_gradient(a: Node) -> Node:
    """Identity forward; no gradient ever reaches ``a`` through this node."""
    graph = a.graph
    return Node(graph, a.value.copy(), (a,), None, op="stop_gradient", requires_grad=False, stop=True)


def add_all(nodes: Sequence[Node]) -> Node:
    """Sum of equally shaped nodes, accumulated left to right."""
    if len(nodes) == 0:
        raise ContractError("add_all needs a non-empty sequence")
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ContractError(f"add_all shape mismatch: {sorted(shapes)}")
    value = nodes[0].value.copy()
    for n in nodes[1:]:
        value = value + n.value
    return _make("add_all", value, tuple(nodes), lambda g: tuple(g for _ in nodes))


def mean_stack(nodes: Sequence[Node]) -> Node:
    """Coordinate-wise mean of equally shaped nodes."""
    if len(nodes) == 0:
        raise ContractError("mean_stack needs a non-empty sequence")
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ContractError(f"mean_stack shape mismatch: {sorted(shapes)}")
    k = len(nodes)
    value = np.mean(np.stack([n.value for n in nodes]), axis=0)
    return _make("mean_stack", value, tuple(nodes), lambda g: tuple(g / k for _ in range(k)))


# ---------------------------------------------------------------------------
# normalisation and similarity
# ---------------------------------------------------------------------------


def l2_normalize_rows(m: Node, eps: float = EPS) -> Node:
    if eps <= 0:
        raise ContractError("eps must be positive")
    norms = np.sqrt(np.sum(m.value * m.value, axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = m.value / denom
    clipped = norms < eps

    def back(g):
        proj = np.sum(y * g, axis=1, keepdims=True)
        dx = (g - y * proj) / denom
        return (np.where(clipped, g / eps, dx),)

    return _make("l2_normalize_rows", y, (m,), back)


def cosine_rows(a: Node, b: Node, eps: float = EPS) -> Node:
    """Row-wise cosine similarity, shape (n, 1)."""
    if a.shape != b.shape:
        raise ContractError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[1] == 0:
        raise ContractError("cosine of empty vectors")
    return row_sum(mul(l2_normalize_rows(a, eps), l2_normalize_rows(b, eps)))


def cosine_similarity(a: Node, b: Node, eps: float = EPS) -> Node:
    if a.shape[0] != 1 or b.shape[0] != 1:
        raise ContractError("cosine_similarity takes single row vectors; use cosine_rows for batches")
    return cosine_rows(a, b, eps)


def mse_rows(a: Node, b: Node) -> Node:
    """Per-row mean of squared differences, shape (n, 1)."""
    if a.shape != b.shape:
        raise ContractError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    return row_mean(square(sub(a, b)))


def mse_sum_rows(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ContractError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    return row_sum(square(sub(a, b)))


def mse(a: Node, b: Node) -> Node:
    return mean(mse_rows(a, b))


def mse_sum(a: Node, b: Node) -> Node:
    return mean(mse_sum_rows(a, b))


# ---------------------------------------------------------------------------
# log-determinant of the regularised Gram matrix
# ---------------------------------------------------------------------------


def logdet_gram(z: Node, c: float) -> Node:
    """``0.5 * log det(I + c Z Z^T)`` for ``Z`` of shape (d, m), via Cholesky."""
    if not c > 0:
        raise ContractError(f"c must be positive, got {c}")
    zv = z.value
    if not np.all(np.isfinite(zv)):
        raise NumericError("logdet_gram received non-finite input")
    d = zv.shape[0]
    gram = np.eye(d) + c * (zv @ zv.T)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise NumericError("Cholesky failed on I + cZZ^T; input is corrupted") from exc
    value = np.sum(np.log(np.diag(chol)))

    def back(g):
        return (g.item() * c * cho_solve((chol, True), zv),)

    return _make("logdet_gram", np.array([[value]]), (z,), back)


# ---------------------------------------------------------------------------
# small convolution path (images at <= 32x32)
# ---------------------------------------------------------------------------


def conv2d(x: Node, w: Node, b: Node, in_shape: tuple[int, int, int], stride: int = 1, pad: int = 1):
    """2-D convolution on flattened images.

    ``x`` is (batch, C*H*W); ``w`` is (C_out, C*k*k) for a square kernel;
    ``b`` is (1, C_out). Returns the node (batch, C_out*H_out*W_out) and the
    output image shape.
    """
    c_in, h, wd = in_shape
    n = x.shape[0]
    c_out, fan_in = w.shape
    k = int(round(np.sqrt(fan_in / c_in)))
    if c_in * k * k != fan_in or x.shape[1] != c_in * h * wd:
        raise ContractError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}, in_shape {in_shape}")
    imgs = np.pad(x.value.reshape(n, c_in, h, wd), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(imgs, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, fan_in)
    out = cols @ w.value.T + b.value
    value = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2).reshape(n, -1)

    def back(g):
        gm = g.reshape(n, c_out, ho, wo).transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = gm.T @ cols
        db = gm.sum(axis=0, keepdims=True)
        dcols = (gm @ w.value).reshape(n, ho, wo, c_in, k, k)
        dpad = np.zeros_like(imgs)
        for i in range(k):
            for j in range(k):
                dpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dpad[:, :, pad:pad + h, pad:pad + wd].reshape(n, -1)
        return dx, dw, db

    return _make("conv2d", value, (x, w, b), back), (c_out, ho, wo)


def global_avg_pool(x: Node, shape: tuple[int, int, int]) -> Node:
    c, h, wd = shape
    n = x.shape[0]
    value = x.value.reshape(n, c, h * wd).mean(axis=2)

    def back(g):
        return (np.repeat(g[:, :, None] / (h * wd), h * wd, axis=2).reshape(n, -1),)

    return _make("global_avg_pool", value, (x,), back)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def analytic_gradient(f: Callable[[Node], Node], x0) -> np.ndarray:
    graph = Graph()
    x = graph.leaf(as_matrix(x0))
    out = f(x)
    backward(graph, out)
    return x.grad


def evaluate(f: Callable[[Node], Node], x0) -> float:
    graph = Graph()
    value = f(graph.constant(as_matrix(x0))).item()
    if not np.isfinite(value):
        raise NumericError(f"function returned non-finite value {value}")
    return value


def numeric_gradient(f: Callable[[Node], Node], x0, h: Optional[float] = None) -> np.ndarray:
    """Central differences, step ``h`` or ``1e-5 * max(1, |x_i|)`` per coordinate."""
    x0 = as_matrix(x0)
    grad = np.zeros_like(x0)
    for idx in np.ndindex(*x0.shape):
        step = h if h is not None else 1e-5 * max(1.0, abs(x0[idx]))
        xp = x0.copy()
        xm = x0.copy()
        xp[idx] += step
        xm[idx] -= step
        grad[idx] = (evaluate(f, xp) - evaluate(f, xm)) / (2 * step)
    return grad


def grad_check(f: Callable[[Node], Node], x0, h: Optional[float] = None) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    Only meaningful for fully differentiable ``f``: a stop-gradient on the
    checked variable shows up as a large mismatch.
    """
    evaluate(f, x0)
    ana = analytic_gradient(f, x0)
    num = numeric_gradient(f, x0, h)
    return float(np.max(np.abs(ana - num) / np.maximum(1.0, np.abs(ana))))
