"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` is a recorded program (a Wengert list).  Nodes are appended
while the graph is built; :meth:`Graph.forward` evaluates the whole list for a
given binding of the input slots, and :meth:`Graph.backward` walks the list in
exact reverse order accumulating cotangents.  Arrays are plain ``numpy``
float64 arrays throughout.

Custom differentiable nodes (the QP layer, the soft-top-k surrogate) are
registered once with :func:`register_custom_node` and then used like built-ins.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

FORMAT_VERSION = 1

Tensor = np.ndarray


class GraphError(Exception):
    pass


class ShapeError(GraphError, ValueError):
    pass


class NonFiniteError(GraphError, FloatingPointError):
    def __init__(self, node_id: int, op: str):
        super().__init__(f"non-finite value produced by node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


class BackwardBeforeForward(GraphError, RuntimeError):
    pass


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# custom node registry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CustomKind:
    kind_id: int
    name: str
    forward_fn: Callable
    backward_fn: Callable


_CUSTOM: dict[str, CustomKind] = {}


def register_custom_node(name: str, forward_fn: Callable, backward_fn: Callable) -> int:
    """Register a differentiable node kind.

    ``forward_fn(*input_arrays, **attrs)`` returns ``(value, ctx)``;
    ``backward_fn(ctx, grad_out)`` returns one cotangent per input (``None``
    means zero).  Returns the kind id.
    """
    if name in _CUSTOM:
        raise ValueError(f"custom node {name!r} already registered")
    kind = CustomKind(len(_CUSTOM) + 1, name, forward_fn, backward_fn)
    _CUSTOM[name] = kind
    return kind.kind_id


def custom_kind(name: str) -> CustomKind:
    return _CUSTOM[name]


# --------------------------------------------------------------------------
# built-in ops: forward(vals, attrs) -> value ; backward(g, vals, out, attrs) -> grads
# --------------------------------------------------------------------------

def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _softmax(x: Tensor, axis: int) -> Tensor:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_bwd(g: Tensor, y: Tensor, axis: int) -> Tensor:
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def _matmul_bwd(g, a, b):
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _attention_fwd(vals, attrs):
    q, k, v = vals
    scale = 1.0 / np.sqrt(q.shape[-1])
    a = _softmax((q @ k.T) * scale, axis=-1)
    return a @ v, a


def _attention_bwd(g, vals, out, attrs, a):
    q, k, v = vals
    scale = 1.0 / np.sqrt(q.shape[-1])
    gv = a.T @ g
    ga = g @ v.T
    gs = _softmax_bwd(ga, a, -1) * scale
    return gs @ k, gs.T @ q, gv


def _slice_bwd(g, vals, out, attrs):
    full = np.zeros_like(vals[0])
    np.add.at(full, attrs["index"], g) if attrs.get("fancy") else full.__setitem__(attrs["index"], g)
    return (full,)


def _concat_bwd(g, vals, out, attrs):
    axis = attrs["axis"]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


def _reduce_bwd(g, x, axis, mean):
    if axis is None:
        gx = np.broadcast_to(g, x.shape).copy()
        return gx / x.size if mean else gx
    gx = np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()
    return gx / x.shape[axis] if mean else gx


def _smooth_sign(x, eps):
    return x / np.sqrt(x * x + eps * eps)


_BUILTINS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda v, a: v[0] + v[1],
            lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape))),
    "sub": (lambda v, a: v[0] - v[1],
            lambda g, v, o, a: (_unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape))),
    "mul": (lambda v, a: v[0] * v[1],
            lambda g, v, o, a: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape))),
    "scale": (lambda v, a: v[0] * a["c"], lambda g, v, o, a: (g * a["c"],)),
    "matmul": (lambda v, a: v[0] @ v[1], lambda g, v, o, a: _matmul_bwd(g, v[0], v[1])),
    "affine": (lambda v, a: v[0] @ v[1] + v[2],
               lambda g, v, o, a: (*_matmul_bwd(g, v[0], v[1]), _unbroadcast(g, v[2].shape))),
    "tanh": (lambda v, a: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),)),
    "relu": (lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: (g * (v[0] > 0),)),
    "exp": (lambda v, a: np.exp(v[0]), lambda g, v, o, a: (g * o,)),
    "log": (lambda v, a: np.log(v[0]), lambda g, v, o, a: (g / v[0],)),
    "abs": (lambda v, a: np.abs(v[0]), lambda g, v, o, a: (g * np.sign(v[0]),)),
    "smooth_sign": (lambda v, a: _smooth_sign(v[0], a["eps"]),
                    lambda g, v, o, a: (g * a["eps"] ** 2 / (v[0] ** 2 + a["eps"] ** 2) ** 1.5,)),
    "softmax": (lambda v, a: _softmax(v[0], a["axis"]),
                lambda g, v, o, a: (_softmax_bwd(g, o, a["axis"]),)),
    "concat": (lambda v, a: np.concatenate(v, axis=a["axis"]), _concat_bwd),
    "slice": (lambda v, a: np.array(v[0][a["index"]], dtype=np.float64), _slice_bwd),
    "reshape": (lambda v, a: v[0].reshape(a["shape"]), lambda g, v, o, a: (g.reshape(v[0].shape),)),
    "sum": (lambda v, a: np.asarray(v[0].sum(axis=a["axis"])),
            lambda g, v, o, a: (_reduce_bwd(g, v[0], a["axis"], False),)),
    "mean": (lambda v, a: np.asarray(v[0].mean(axis=a["axis"])),
             lambda g, v, o, a: (_reduce_bwd(g, v[0], a["axis"], True),)),
}

# ops whose forward returns (value, ctx)
_WITH_CTX = {"attention": (_attention_fwd, _attention_bwd)}

_LEAVES = ("input", "param", "const")


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------

@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None


@dataclass(frozen=True, eq=False)
class Ref:
    """Handle to a node; supports arithmetic operators for graph building."""

    graph: "Graph"
    id: int

    def _lift(self, other) -> "Ref":
        return other if isinstance(other, Ref) else self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.graph.scale(self, float(other))
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))

    def __getitem__(self, index):
        return self.graph.slice(self, index)

    @property
    def value(self) -> Tensor:
        return self.graph.value(self)


class Graph:
    """A recorded computation; nodes are kept in topological order."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}
        self._param_nodes: dict[str, int] = {}
        self._input_nodes: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.check_finite = check_finite
        self._values: list | None = None
        self._ctx: list | None = None

    # -- building ---------------------------------------------------------
    def _add(self, op: str, inputs=(), attrs=None, name=None) -> Ref:
        ids = tuple(r.id for r in inputs)
        for r in inputs:
            if r.graph is not self:
                raise GraphError("node belongs to another graph")
        self.nodes.append(_Node(op, ids, attrs or {}, name))
        self._values = None
        return Ref(self, len(self.nodes) - 1)

    def input(self, name: str) -> Ref:
        if name in self._input_nodes:
            return Ref(self, self._input_nodes[name])
        ref = self._add("input", name=name)
        self._input_nodes[name] = ref.id
        return ref

    def param(self, name: str, value=None) -> Ref:
        if name in self._param_nodes:
            return Ref(self, self._param_nodes[name])
        if value is None:
            raise GraphError(f"parameter {name!r} needs an initial value")
        self.params[name] = value if isinstance(value, np.ndarray) and value.dtype == np.float64 else as_tensor(value)
        ref = self._add("param", name=name)
        self._param_nodes[name] = ref.id
        return ref

    def const(self, value) -> Ref:
        return self._add("const", attrs={"value": as_tensor(value)})

    def output(self, name: str, ref: Ref) -> Ref:
        self.outputs[name] = ref.id
        return ref

    def add(self, a, b):
        return self._add("add", (a, b))

    def sub(self, a, b):
        return self._add("sub", (a, b))

    def mul(self, a, b):
        return self._add("mul", (a, b))

    def scale(self, a, c: float):
        return self._add("scale", (a,), {"c": float(c)})

    def matmul(self, a, b):
        return self._add("matmul", (a, b))

    def affine(self, x, w, b):
        return self._add("affine", (x, w, b))

    def tanh(self, x):
        return self._add("tanh", (x,))

    def relu(self, x):
        return self._add("relu", (x,))

    def exp(self, x):
        return self._add("exp", (x,))

    def log(self, x):
        return self._add("log", (x,))

    def abs(self, x):
        return self._add("abs", (x,))

    def smooth_sign(self, x, eps: float = 1e-3):
        return self._add("smooth_sign", (x,), {"eps": float(eps)})

    def softmax(self, x, axis: int = -1):
        return self._add("softmax", (x,), {"axis": axis})

    def concat(self, xs, axis: int = 0):
        return self._add("concat", tuple(xs), {"axis": axis})

    def slice(self, x, index):
        fancy = not isinstance(index, (int, slice, tuple)) or (
            isinstance(index, tuple) and any(isinstance(i, (list, np.ndarray)) for i in index))
        return self._add("slice", (x,), {"index": index, "fancy": fancy})

    def reshape(self, x, shape):
        return self._add("reshape", (x,), {"shape": tuple(shape)})

    def sum(self, x, axis=None):
        return self._add("sum", (x,), {"axis": axis})

    def mean(self, x, axis=None):
        return self._add("mean", (x,), {"axis": axis})

    def attention(self, q, k, v):
        """Single-head scaled dot-product attention softmax(q k^T / sqrt(d)) v."""
        return self._add("attention", (q, k, v))

    def custom(self, kind: str, *inputs, **attrs):
        if kind not in _CUSTOM:
            raise GraphError(f"unknown custom node {kind!r}")
        return self._add("custom:" + kind, inputs, attrs)

    # -- evaluation ---------------------------------------------------------
    def forward(self, inputs: dict[str, Any] | None = None, outputs=None) -> dict[str, Tensor]:
        inputs = inputs or {}
        missing = [n for n in self._input_nodes if n not in inputs]
        if missing:
            raise GraphError(f"unbound input slots: {missing}")
        vals: list = [None] * len(self.nodes)
        ctxs: list = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            op = node.op
            if op == "input":
                v = as_tensor(inputs[node.name])
            elif op == "param":
                v = self.params[node.name]
            elif op == "const":
                v = node.attrs["value"]
            else:
                args = [vals[j] for j in node.inputs]
                try:
                    if op in _BUILTINS:
                        v = _BUILTINS[op][0](args, node.attrs)
                    elif op in _WITH_CTX:
                        v, ctxs[i] = _WITH_CTX[op][0](args, node.attrs)
                    else:
                        v, ctxs[i] = _CUSTOM[op[7:]].forward_fn(*args, **node.attrs)
                except ValueError as exc:
                    raise ShapeError(f"node {i} ({op}): {exc}") from exc
                v = np.asarray(v, dtype=np.float64)
            if self.check_finite and op != "const" and not np.all(np.isfinite(v)):
                raise NonFiniteError(i, op)
            vals[i] = v
        self._values = vals
        self._ctx = ctxs
        names = self.outputs if outputs is None else {k: self.outputs[k] for k in outputs}
        return {k: vals[i] for k, i in names.items()}

    def value(self, ref: Ref | str) -> Tensor:
        if self._values is None:
            raise BackwardBeforeForward("graph has not been evaluated")
        idx = self.outputs[ref] if isinstance(ref, str) else ref.id
        return self._values[idx]

    def _resolve(self, ref) -> int:
        return self.outputs[ref] if isinstance(ref, str) else ref.id

    def vjp(self, ref, cotangent, wrt_inputs: bool = False):
        """Pull ``cotangent`` (shaped like the node value) back to parameters."""
        if self._values is None:
            raise BackwardBeforeForward("backward called before forward")
        root = self._resolve(ref)
        vals = self._values
        grads: list = [None] * (root + 1)
        grads[root] = np.broadcast_to(as_tensor(cotangent), vals[root].shape).astype(np.float64)
        for i in range(root, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.op in _LEAVES:
                continue
            args = [vals[j] for j in node.inputs]
            op = node.op
            if op in _BUILTINS:
                gin = _BUILTINS[op][1](g, args, vals[i], node.attrs)
            elif op in _WITH_CTX:
                gin = _WITH_CTX[op][1](g, args, vals[i], node.attrs, self._ctx[i])
            else:
                gin = _CUSTOM[op[7:]].backward_fn(self._ctx[i], g)
                if len(gin) != len(node.inputs):
                    raise GraphError(f"custom node {op} returned {len(gin)} cotangents "
                                     f"for {len(node.inputs)} inputs")
            for j, gj in zip(node.inputs, gin):
                if gj is None:
                    continue
                gj = np.asarray(gj, dtype=np.float64)
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for name, i in self._param_nodes.items():
            g = grads[i] if i <= root else None
            out[name] = np.zeros_like(self.params[name]) if g is None else g.reshape(self.params[name].shape)
        if wrt_inputs:
            ins = {}
            for name, i in self._input_nodes.items():
                g = grads[i] if i <= root else None
                ins[name] = np.zeros_like(vals[i]) if g is None else g
            return out, ins
        return out

    def backward(self, loss, seed: float = 1.0, wrt_inputs: bool = False):
        if self._values is None:
            raise BackwardBeforeForward("backward called before forward")
        if self._values[self._resolve(loss)].size != 1:
            raise GraphError("backward needs a scalar loss node")
        return self.vjp(loss, float(seed), wrt_inputs=wrt_inputs)


# functional aliases
def forward(graph: Graph, inputs: dict[str, Any]) -> dict[str, Tensor]:
    return graph.forward(inputs)


def backward(graph: Graph, loss, seed: float = 1.0) -> dict[str, Tensor]:
    return graph.backward(loss, seed)


# --------------------------------------------------------------------------
# checks and checkpoints
# --------------------------------------------------------------------------

def finite_difference_check(graph: Graph, loss, inputs: dict, h: float = 1e-5,
                            names=None, max_entries: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backward and central differences.

    Relative error is ``|a - n| / max(1, |a|, |n|)`` per entry.
    """
    graph.forward(inputs)
    grads = graph.backward(loss)
    worst = 0.0
    for name in names or list(graph.params):
        p = graph.params[name]
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(p.size, max_entries, replace=False)
        for k in flat_idx:
            idx = np.unravel_index(k, p.shape)
            old = p[idx]
            p[idx] = old + h
            graph.forward(inputs)
            fp = float(graph.value(loss))
            p[idx] = old - h
            graph.forward(inputs)
            fm = float(graph.value(loss))
            p[idx] = old
            num = (fp - fm) / (2 * h)
            ana = float(grads[name][idx])
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    graph.forward(inputs)
    return worst


def save_params(params: dict[str, Tensor], path, extra: dict | None = None) -> None:
    doc = {"format_version": FORMAT_VERSION,
           "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.items()}}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def params_from_json(doc: dict) -> dict[str, Tensor]:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}


def load_params(path) -> dict[str, Tensor]:
    return params_from_json(json.loads(Path(path).read_text()))
