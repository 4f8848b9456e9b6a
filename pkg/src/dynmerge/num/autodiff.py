"""Tape-based reverse-mode differentiation for the agent networks.

A ``Graph`` records every node that depends on a trainable parameter, in
execution order. Constants are never recorded, so running a network on a
graph without trainable parameters is plain forward evaluation.

Only the ops the actor and critic need are provided. Leading (batch) axes
broadcast the numpy way; gradients are reduced back onto the operand shape.
"""
from __future__ import annotations

import numpy as np

from . import kernels as K


class GraphError(RuntimeError):
    pass


class Node:
    __slots__ = ("data", "graph", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, graph, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.data = data
        self.graph = graph
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def __repr__(self):
        tag = self.name or "node"
        return f"<{tag} shape={self.data.shape} grad={self.requires_grad}>"


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def param(self, name: str, value, trainable: bool = True) -> Node:
        if name in self.params:
            raise GraphError(f"duplicate parameter {name!r}")
        node = Node(K.asarray(value), self, requires_grad=trainable, name=name)
        if trainable:
            self.params[name] = node
        return node

    def const(self, value) -> Node:
        return Node(K.asarray(value), self)


def _lift(x, graph):
    if isinstance(x, Node):
        if x.graph is not graph:
            raise GraphError("node from a different graph referenced (detached node)")
        return x
    return Node(K.asarray(x), graph)


def _graph_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise GraphError("op needs at least one graph node")


def _make(data, parents, backward_fn):
    graph = parents[0].graph
    req = any(p.requires_grad for p in parents)
    node = Node(data, graph, tuple(parents), backward_fn if req else None, req)
    if req:
        graph.nodes.append(node)
    return node


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(x):
    return np.swapaxes(x, -1, -2)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    g = _graph_of(a, b)
    a, b = _lift(a, g), _lift(b, g)
    return _make(K.asarray(a.data + b.data), (a, b),
                 lambda gr: (_unbroadcast(gr, a.shape), _unbroadcast(gr, b.shape)))


def sub(a, b):
    g = _graph_of(a, b)
    a, b = _lift(a, g), _lift(b, g)
    return _make(K.asarray(a.data - b.data), (a, b),
                 lambda gr: (_unbroadcast(gr, a.shape), -_unbroadcast(gr, b.shape)))


def mul(a, b):
    g = _graph_of(a, b)
    a, b = _lift(a, g), _lift(b, g)
    return _make(K.asarray(a.data * b.data), (a, b),
                 lambda gr: (_unbroadcast(gr * b.data, a.shape), _unbroadcast(gr * a.data, b.shape)))


def scale(a, c: float):
    return _make(K.asarray(a.data * c), (a,), lambda gr: (gr * c,))


def square(a):
    return _make(K.asarray(a.data * a.data), (a,), lambda gr: (2.0 * gr * a.data,))


def exp(a):
    out = K.asarray(np.exp(a.data.astype(np.float64)))
    return _make(out, (a,), lambda gr: (gr * out,))


def log(a):
    return _make(K.asarray(np.log(a.data.astype(np.float64))), (a,), lambda gr: (gr / a.data,))


def sigmoid(a):
    out = K.sigmoid(a.data)
    return _make(out, (a,), lambda gr: (gr * out * (1.0 - out),))


def log_sigmoid(a):
    # d/dx log(sigmoid(x)) = sigmoid(-x)
    return _make(K.log_sigmoid(a.data), (a,), lambda gr: (gr * K.sigmoid(-a.data),))


def gelu(a):
    x = a.data.astype(np.float64)
    x2 = x * x
    t = np.tanh(K.GELU_C * (x + K.GELU_A * x2 * x))
    out = K.asarray(0.5 * x * (1.0 + t))

    def bw(gr):
        du = K.GELU_C * (1.0 + 3.0 * K.GELU_A * x2)
        return (gr * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), bw)


def clip(a, lo: float, hi: float):
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(K.asarray(np.clip(a.data, lo, hi)), (a,), lambda gr: (gr * inside,))


def minimum(a, b):
    g = _graph_of(a, b)
    a, b = _lift(a, g), _lift(b, g)
    pick_a = a.data <= b.data
    return _make(K.asarray(np.minimum(a.data, b.data)), (a, b),
                 lambda gr: (_unbroadcast(gr * pick_a, a.shape), _unbroadcast(gr * ~pick_a, b.shape)))


# -- reductions and structure ----------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = K.asarray(a.data.astype(np.float64).sum(axis=axis, keepdims=keepdims))

    def bw(gr):
        if axis is not None and not keepdims:
            gr = np.expand_dims(gr, axis)
        return (np.broadcast_to(gr, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / float(n))


def index(a, key):
    def bw(gr):
        out = np.zeros(a.shape, dtype=np.float64)
        np.add.at(out, key, gr)
        return (out,)

    return _make(K.asarray(a.data[key]), (a,), bw)


def concat(xs, axis=-1):
    g = _graph_of(*xs)
    xs = [_lift(x, g) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(K.asarray(np.concatenate([x.data for x in xs], axis=axis)), tuple(xs),
                 lambda gr: tuple(np.split(gr, cuts, axis=axis)))


def transpose(a):
    return _make(_swap(a.data).copy(), (a,), lambda gr: (_swap(gr),))


# -- dense kernels ----------------------------------------------------------

def matmul(a, b):
    g = _graph_of(a, b)
    a, b = _lift(a, g), _lift(b, g)

    def bw(gr):
        ad_, bd = a.data.astype(np.float64), b.data.astype(np.float64)
        if bd.ndim == 2 and ad_.ndim > 2:
            # shared weight: fold batch axes into rows
            g2 = gr.reshape(-1, gr.shape[-1])
            ga = (g2 @ bd.T).reshape(ad_.shape)
            gb = ad_.reshape(-1, ad_.shape[-1]).T @ g2
        else:
            ga = np.matmul(gr, _swap(bd))
            gb = np.matmul(_swap(ad_), gr)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(K.matmul(a.data, b.data), (a, b), bw)


def layernorm(x, gamma, beta, eps=1e-6):
    g = _graph_of(x, gamma, beta)
    x, gamma, beta = _lift(x, g), _lift(gamma, g), _lift(beta, g)
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(((xd - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (xd - mu) * inv

    def bw(gr):
        gg = gr * gamma.data
        n = xd.shape[-1]
        gx = inv / n * (n * gg - gg.sum(axis=-1, keepdims=True)
                        - xhat * (gg * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(gr * xhat, gamma.shape), _unbroadcast(gr, beta.shape)

    return _make(K.layernorm(x.data, gamma.data, beta.data, eps), (x, gamma, beta), bw)


def softmax(x):
    out = K.softmax_rows(x.data)

    def bw(gr):
        s = out.astype(np.float64)
        return (s * (gr - (gr * s).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw)


# -- driver -----------------------------------------------------------------

def backward(graph: Graph, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable parameter of ``graph``."""
    if not isinstance(loss, Node) or loss.graph is not graph:
        raise GraphError("loss is not a node of this graph (detached node)")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape, dtype=np.float64)
    for node in reversed(graph.nodes):
        gr = grads.pop(id(node), None)
        if gr is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(gr)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return {name: grads.get(id(p), np.zeros(p.shape, dtype=np.float64)).reshape(p.shape)
            for name, p in graph.params.items()}
