"""Tape-based reverse-mode automatic differentiation.

Every value lives on a :class:`Graph` as a :class:`Node`. Backward rules are
written in terms of the same ops, so a gradient computed with
``create_graph=True`` is itself an ordinary differentiable node. That single
mechanism gives second-order MAML terms and lets the conditioning loss
backpropagate through eigenvalues of a Jacobian product.

Broadcasting is limited to scalar (shape ``()``) against tensor. Row/column
broadcasts are spelled out with ``matmul`` against ones vectors.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class DomainError(AutodiffError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class Node:
    """One immutable value on a graph tape."""

    __slots__ = ("graph", "id", "value", "op", "parents", "requires_grad", "attrs")

    def __init__(self, graph, value, op, parents, requires_grad, attrs):
        self.graph = graph
        self.value = value
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.attrs = attrs
        value.flags.writeable = False
        self.id = graph._append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Graph:
    """Append-only node store; node ids are dense and topologically ordered."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value, differentiable: bool = False) -> Node:
        arr = np.array(value, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("leaf: non-finite input value")
        return Node(self, arr, "leaf", (), differentiable, None)

    def const(self, value) -> Node:
        return self.leaf(value, differentiable=False)


def _as_node(graph: Graph, x) -> Node:
    if isinstance(x, Node):
        if x.graph is not graph:
            raise AutodiffError("nodes belong to different graphs")
        return x
    return graph.const(x)


def _graph_of(inputs) -> Graph:
    for x in inputs:
        if isinstance(x, Node):
            return x.graph
    raise AutodiffError("at least one input must be a Node")


# op tag -> (forward(values, attrs) -> array, backward(out, inputs, grad, attrs) -> grads)
_OPS: dict[str, tuple[Callable, Callable]] = {}


def register_op(tag: str, forward: Callable, backward: Callable) -> None:
    """Register a custom op. ``backward`` must build its result from graph ops."""
    _OPS[tag] = (forward, backward)


def apply(op: str, inputs: Sequence, attrs: dict | None = None) -> Node:
    if op not in _OPS:
        raise AutodiffError(f"unknown op {op!r}")
    graph = _graph_of(inputs)
    nodes = tuple(_as_node(graph, x) for x in inputs)
    forward, _ = _OPS[op]
    value = np.asarray(forward([n.value for n in nodes], attrs), dtype=np.float64)
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    requires_grad = any(n.requires_grad for n in nodes)
    # Constant subgraphs keep no parents; the tape only records what can carry gradient.
    return Node(graph, value, op, nodes if requires_grad else (), requires_grad, attrs)


def _scalar_or_equal(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: Node, shape: tuple[int, ...]) -> Node:
    if g.shape == shape:
        return g
    # only scalar broadcast exists, so the target must be a scalar
    return sum_(g)


def _fwd_binary(fn, tag):
    def forward(vals, attrs):
        _scalar_or_equal(tag, vals[0], vals[1])
        return fn(vals[0], vals[1])

    return forward


def _bwd_add(out, ins, g, attrs):
    return [_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)]


def _bwd_sub(out, ins, g, attrs):
    return [_unbroadcast(g, ins[0].shape), _unbroadcast(scale(g, -1.0), ins[1].shape)]


def _bwd_mul(out, ins, g, attrs):
    a, b = ins
    return [_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)]


def _fwd_div(vals, attrs):
    _scalar_or_equal("div", vals[0], vals[1])
    if np.any(vals[1] == 0.0):
        raise DomainError("div: division by zero")
    return vals[0] / vals[1]


def _bwd_div(out, ins, g, attrs):
    a, b = ins
    ga = div(g, b)
    gb = scale(div(mul(g, out), b), -1.0)
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        return a @ b


def _bwd_matmul(out, ins, g, attrs):
    a, b = ins
    return [matmul(g, transpose(b)), matmul(transpose(a), g)]


def _bwd_relu(out, ins, g, attrs):
    mask = (ins[0].value > 0.0).astype(np.float64)
    return [mul(g, g.graph.const(mask))]


def _fwd_exp(vals, attrs):
    with np.errstate(over="ignore"):
        return np.exp(vals[0])


def _bwd_exp(out, ins, g, attrs):
    return [mul(g, out)]


def _fwd_log(vals, attrs):
    if np.any(vals[0] <= 0.0):
        raise DomainError("log: input must be positive")
    return np.log(vals[0])


def _bwd_log(out, ins, g, attrs):
    return [div(g, ins[0])]


def _fwd_sqrt(vals, attrs):
    if np.any(vals[0] < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    return np.sqrt(vals[0])


def _bwd_sqrt(out, ins, g, attrs):
    return [div(scale(g, 0.5), out)]


def _bwd_sum(out, ins, g, attrs):
    return [mul(g, g.graph.const(np.ones(ins[0].shape)))]


def _bwd_mean(out, ins, g, attrs):
    n = ins[0].value.size
    return [mul(scale(g, 1.0 / n), g.graph.const(np.ones(ins[0].shape)))]


def _softmax_rows(z: Tensor) -> Tensor:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _row_broadcast(col: Node, n_cols: int) -> Node:
    """[B,1] -> [B,n_cols] by repeating each row value."""
    return matmul(col, col.graph.const(np.ones((1, n_cols))))


def _bwd_softmax(out, ins, g, attrs):
    gs = mul(g, out)
    if out.value.ndim == 1:
        return [mul(out, sub(g, sum_(gs)))]
    c = out.shape[1]
    rowsum = matmul(gs, g.graph.const(np.ones((c, 1))))
    return [mul(out, sub(g, _row_broadcast(rowsum, c)))]


def _fwd_sce(vals, attrs):
    z = vals[0]
    labels = attrs["labels"]
    if z.ndim not in (1, 2):
        raise ShapeError(f"softmax-cross-entropy: logits must be 1-D or 2-D, got {z.shape}")
    z2 = z.reshape(1, -1) if z.ndim == 1 else z
    if len(labels) != z2.shape[0]:
        raise ShapeError(
            f"softmax-cross-entropy: {len(labels)} labels for logits of shape {z.shape}"
        )
    m = z2.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z2 - m).sum(axis=1, keepdims=True)))[:, 0]
    loss = lse - z2[np.arange(z2.shape[0]), labels]
    return loss.reshape(()) if z.ndim == 1 else loss


def _bwd_sce(out, ins, g, attrs):
    z = ins[0]
    graph = g.graph
    onehot = np.zeros(z.shape)
    if z.value.ndim == 1:
        onehot[attrs["labels"][0]] = 1.0
        return [mul(g, sub(softmax(z), graph.const(onehot)))]
    onehot[np.arange(z.shape[0]), attrs["labels"]] = 1.0
    gcol = _row_broadcast(reshape(g, (z.shape[0], 1)), z.shape[1])
    return [mul(gcol, sub(softmax(z), graph.const(onehot)))]


def _bwd_clamp(out, ins, g, attrs):
    mask = (ins[0].value > attrs["floor"]).astype(np.float64)
    return [mul(g, g.graph.const(mask))]


def _fwd_variance(vals, attrs):
    x = vals[0]
    if x.size < 1:
        raise ShapeError("variance: empty input")
    return np.mean((x - x.mean()) ** 2)


def _bwd_variance(out, ins, g, attrs):
    x = ins[0]
    centered = sub(x, mean(x))
    return [scale(mul(g, centered), 2.0 / x.value.size)]


def _fwd_reshape(vals, attrs):
    shape = attrs["shape"]
    if int(np.prod(shape)) != vals[0].size:
        raise ShapeError(f"reshape: cannot reshape {vals[0].shape} to {shape}")
    return vals[0].reshape(shape)


def _fwd_transpose(vals, attrs):
    if vals[0].ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got {vals[0].shape}")
    return vals[0].T.copy()


def _bwd_concat(out, ins, g, attrs):
    grads, offset = [], 0
    for x in ins:
        n = x.value.size
        grads.append(reshape(slice_(g, offset, offset + n), x.shape))
        offset += n
    return grads


def _fwd_slice(vals, attrs):
    x = vals[0]
    start, stop = attrs["start"], attrs["stop"]
    if x.ndim != 1 or not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"slice: [{start}:{stop}] invalid for shape {x.shape}")
    return x[start:stop].copy()


def _fwd_embed(vals, attrs):
    out = np.zeros(attrs["total"])
    out[attrs["start"] : attrs["start"] + vals[0].size] = vals[0]
    return out


_OPS.update(
    {
        "add": (_fwd_binary(np.add, "add"), _bwd_add),
        "sub": (_fwd_binary(np.subtract, "sub"), _bwd_sub),
        "mul": (_fwd_binary(np.multiply, "mul"), _bwd_mul),
        "div": (_fwd_div, _bwd_div),
        "matmul": (_fwd_matmul, _bwd_matmul),
        "relu": (lambda v, a: np.maximum(v[0], 0.0), _bwd_relu),
        "exp": (_fwd_exp, _bwd_exp),
        "log": (_fwd_log, _bwd_log),
        "sqrt": (_fwd_sqrt, _bwd_sqrt),
        "sum": (lambda v, a: np.sum(v[0]), _bwd_sum),
        "mean": (lambda v, a: np.mean(v[0]), _bwd_mean),
        "softmax": (lambda v, a: _softmax_rows(v[0]), _bwd_softmax),
        "softmax-cross-entropy": (_fwd_sce, _bwd_sce),
        "clamp-floor": (lambda v, a: np.maximum(v[0], a["floor"]), _bwd_clamp),
        "variance": (_fwd_variance, _bwd_variance),
        "scale": (lambda v, a: v[0] * a["c"], lambda o, i, g, a: [scale(g, a["c"])]),
        "reshape": (_fwd_reshape, lambda o, i, g, a: [reshape(g, i[0].shape)]),
        "transpose": (_fwd_transpose, lambda o, i, g, a: [transpose(g)]),
        "concat": (lambda v, a: np.concatenate([x.ravel() for x in v]), _bwd_concat),
        "slice": (
            _fwd_slice,
            lambda o, i, g, a: [embed(g, a["start"], i[0].value.size)],
        ),
        "embed": (
            _fwd_embed,
            lambda o, i, g, a: [slice_(g, a["start"], a["start"] + i[0].value.size)],
        ),
    }
)


def add(a, b) -> Node:
    return apply("add", [a, b])


def sub(a, b) -> Node:
    return apply("sub", [a, b])


def mul(a, b) -> Node:
    return apply("mul", [a, b])


def div(a, b) -> Node:
    return apply("div", [a, b])


def matmul(a, b) -> Node:
    return apply("matmul", [a, b])


def relu(x) -> Node:
    return apply("relu", [x])


def exp(x) -> Node:
    return apply("exp", [x])


def log(x) -> Node:
    return apply("log", [x])


def sqrt(x) -> Node:
    return apply("sqrt", [x])


def sum_(x) -> Node:
    return apply("sum", [x])


def mean(x) -> Node:
    return apply("mean", [x])


def softmax(x) -> Node:
    return apply("softmax", [x])


def softmax_cross_entropy(logits, labels) -> Node:
    """Per-row cross-entropy. 2-D logits give shape [B]; 1-D logits give a scalar."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_classes = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise AutodiffError(f"softmax-cross-entropy: labels must lie in [0, {n_classes})")
    return apply("softmax-cross-entropy", [logits], {"labels": labels})


def clamp_floor(x, floor: float) -> Node:
    return apply("clamp-floor", [x], {"floor": float(floor)})


def variance(x) -> Node:
    """Population variance over all elements."""
    return apply("variance", [x])


def scale(x, c: float) -> Node:
    return apply("scale", [x], {"c": float(c)})


def reshape(x, shape) -> Node:
    return apply("reshape", [x], {"shape": tuple(int(s) for s in shape)})


def transpose(x) -> Node:
    return apply("transpose", [x])


def concat(xs: Sequence[Node]) -> Node:
    """Flatten and concatenate into one 1-D node."""
    return apply("concat", list(xs))


def slice_(x, start: int, stop: int) -> Node:
    return apply("slice", [x], {"start": int(start), "stop": int(stop)})


def embed(x, start: int, total: int) -> Node:
    return apply("embed", [x], {"start": int(start), "total": int(total)})


def index(x: Node, i: int) -> Node:
    """Element ``i`` of a 1-D node, as a scalar node."""
    return reshape(slice_(x, i, i + 1), ())


def detach(x: Node) -> Node:
    return x.graph.const(x.value)


def gradient(output: Node, wrt: Sequence[Node], create_graph: bool = False) -> list[Node]:
    """Reverse-mode gradient of a scalar ``output`` w.r.t. each node in ``wrt``.

    With ``create_graph`` the returned nodes stay connected to the tape and can
    be differentiated again. Without it they are constants. A ``wrt`` node that
    ``output`` does not depend on gets a zero tensor.
    """
    if output.value.size != 1:
        raise AutodiffError(f"gradient: output must be scalar, got shape {output.shape}")
    graph = output.graph
    for w in wrt:
        if w.graph is not graph:
            raise AutodiffError("gradient: wrt node belongs to another graph")
        if not w.requires_grad:
            raise AutodiffError(f"gradient: wrt node {w.id} is not differentiable")
    wrt_ids = {w.id for w in wrt}
    # ancestors of every wrt node have smaller ids, so nothing below this can matter
    lowest = min(wrt_ids, default=output.id + 1)

    # nodes reachable backwards from output through differentiable edges
    reach: set[int] = set()
    stack = [output] if output.requires_grad and output.id >= lowest else []
    while stack:
        n = stack.pop()
        if n.id in reach:
            continue
        reach.add(n.id)
        stack.extend(
            p for p in n.parents if p.requires_grad and p.id >= lowest and p.id not in reach
        )

    # keep only those with a path down to some wrt node
    leads: set[int] = set()
    for nid in sorted(reach):
        n = graph.nodes[nid]
        if nid in wrt_ids or any(p.id in leads for p in n.parents):
            leads.add(nid)

    grads: dict[int, Node] = {output.id: graph.const(np.ones(output.shape))}
    detached: dict[int, Node] = {}

    def view(n: Node) -> Node:
        if create_graph:
            return n
        d = detached.get(n.id)
        if d is None:
            d = detached[n.id] = graph.const(n.value)
        return d

    for nid in sorted(leads, reverse=True):
        node = graph.nodes[nid]
        g = grads.get(nid)
        if g is None or not node.parents:
            continue
        targets = [p.id in leads for p in node.parents]
        if not any(targets):
            continue
        _, backward = _OPS[node.op]
        parent_grads = backward(view(node), [view(p) for p in node.parents], g, node.attrs)
        for p, wanted, pg in zip(node.parents, targets, parent_grads):
            if not wanted or pg is None:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else add(prev, pg)

    out = []
    for w in wrt:
        g = grads.get(w.id)
        out.append(graph.const(np.zeros(w.shape)) if g is None else g)
    return out
