"""Dense float64 tensors with define-by-run reverse-mode differentiation.

The op set is deliberately small: just enough to express the dual-stream
encoders, the fusion encoder and every training objective in this package.
Each op's analytic gradient is checked against central finite differences in
the test suite, and :func:`finite_difference_check` is the oracle that every
loss function is verified with.

Shapes are strict.  There is no implicit broadcasting except bias addition
over the last axis in ``add``; everything else must match exactly, which
catches wiring mistakes at the op boundary instead of three layers later.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "LOG_CLAMP",
    "ShapeError",
    "Tensor",
    "Graph",
    "apply",
    "backward",
    "finite_difference_check",
    "constant",
    "parameter",
    "matmul",
    "add",
    "mul",
    "concat",
    "slice_",
    "reduce_mean",
    "reduce_sum",
    "softmax",
    "log",
    "exp",
    "sigmoid",
    "relu",
    "layer_norm",
    "embedding_lookup",
    "transpose",
    "scale",
]

# Arguments of `log` are clamped here so losses stay finite on degenerate
# probabilities; well below every gradient-check epsilon in use.
LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Operands do not fit an op's shape contract."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    Values are treated as immutable once created (safe to share read-only);
    the optimizer and the finite-difference oracle are the only writers, and
    they own their parameters.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: "Node" | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Node:
    """One recorded operation: kind, inputs, output and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_GRAPH_STACK: list["Graph"] = []


class Graph:
    """An ordered tape of nodes; topological by construction."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _GRAPH_STACK.pop()
        assert popped is self, "unbalanced graph nesting"

    def __len__(self) -> int:
        return len(self.nodes)


def _active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _fail(op: str, msg: str) -> None:
    raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# op implementations: each returns (output array, backward closure)
# ---------------------------------------------------------------------------


def _op_matmul(inputs, attrs):
    a, b = inputs
    A, B = a.data, b.data
    if A.ndim == 2 and B.ndim == 2:
        if A.shape[1] != B.shape[0]:
            _fail("matmul", f"inner dims differ: {A.shape} @ {B.shape}")
    elif A.ndim == 3 and B.ndim == 2:
        if A.shape[2] != B.shape[0]:
            _fail("matmul", f"inner dims differ: {A.shape} @ {B.shape}")
    elif A.ndim == 3 and B.ndim == 3:
        if A.shape[0] != B.shape[0] or A.shape[2] != B.shape[1]:
            _fail("matmul", f"batch/inner dims differ: {A.shape} @ {B.shape}")
    else:
        _fail("matmul", f"unsupported ranks: {A.shape} @ {B.shape}")
    out = A @ B

    def bw(g):
        if B.ndim == 2:
            ga = g @ B.T
            if A.ndim == 2:
                gb = A.T @ g
            else:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ B.swapaxes(-1, -2)
            gb = A.swapaxes(-1, -2) @ g
        return [ga, gb]

    return out, bw


def _op_add(inputs, attrs):
    a, b = inputs
    A, B = a.data, b.data
    bias = False
    if A.shape == B.shape:
        pass
    elif B.ndim == 1 and A.ndim >= 1 and B.shape[0] == A.shape[-1]:
        bias = True  # bias over the last axis, the one permitted broadcast
    else:
        _fail("add", f"shapes {A.shape} + {B.shape} (only equal or last-axis bias)")
    out = A + B

    def bw(g):
        if bias:
            gb = g.reshape(-1, B.shape[0]).sum(axis=0)
        else:
            gb = g
        return [g, gb]

    return out, bw


def _op_mul(inputs, attrs):
    a, b = inputs
    A, B = a.data, b.data
    if A.shape != B.shape:
        _fail("mul", f"shapes differ: {A.shape} * {B.shape}")
    out = A * B

    def bw(g):
        return [g * B, g * A]

    return out, bw


def _op_concat(inputs, attrs):
    axis = attrs["axis"]
    arrays = [t.data for t in inputs]
    if not arrays:
        _fail("concat", "empty input list")
    ref = list(arrays[0].shape)
    for arr in arrays[1:]:
        other = list(arr.shape)
        if len(other) != len(ref):
            _fail("concat", f"rank mismatch: {arrays[0].shape} vs {arr.shape}")
        for ax, (u, v) in enumerate(zip(ref, other)):
            if ax != axis and u != v:
                _fail("concat", f"axis {ax} differs: {arrays[0].shape} vs {arr.shape}")
    out = np.concatenate(arrays, axis=axis)
    sizes = [arr.shape[axis] for arr in arrays]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return list(np.split(g, bounds, axis=axis))

    return out, bw


def _op_slice(inputs, attrs):
    (a,) = inputs
    key = attrs["key"]
    if not isinstance(key, tuple):
        key = (key,)
    norm = []
    for k in key:
        if isinstance(k, (int, np.integer)):
            norm.append(int(k))
        elif isinstance(k, slice):
            if k.step not in (None, 1):
                _fail("slice", "step slicing is not supported")
            norm.append(k)
        else:
            _fail("slice", f"unsupported index component {k!r}")
    key = tuple(norm)
    if len(key) > a.data.ndim:
        _fail("slice", f"key has {len(key)} axes for shape {a.data.shape}")
    out = a.data[key]
    in_shape = a.data.shape

    def bw(g):
        ga = np.zeros(in_shape, dtype=np.float64)
        ga[key] = g
        return [ga]

    return out, bw


def _reduce(op_name, fn, inputs, attrs):
    (a,) = inputs
    axis = attrs.get("axis")
    keepdims = bool(attrs.get("keepdims", False))
    A = a.data
    if axis is not None and not (-A.ndim <= axis < A.ndim):
        _fail(op_name, f"axis {axis} out of range for shape {A.shape}")
    out = fn(A, axis=axis, keepdims=keepdims)
    if axis is None:
        count = A.size
    else:
        count = A.shape[axis]

    def bw(g):
        if axis is None:
            expanded = np.asarray(g).reshape((1,) * A.ndim)
        elif keepdims:
            expanded = g
        else:
            expanded = np.expand_dims(g, axis)
        ga = np.broadcast_to(expanded, A.shape)
        if op_name == "mean":
            ga = ga / count
        return [np.ascontiguousarray(ga)]

    return out, bw


def _op_mean(inputs, attrs):
    return _reduce("mean", np.mean, inputs, attrs)


def _op_sum(inputs, attrs):
    return _reduce("sum", np.sum, inputs, attrs)


def _op_softmax(inputs, attrs):
    (a,) = inputs
    axis = attrs.get("axis", -1)
    A = a.data
    shifted = A - A.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [out * (g - dot)]

    return out, bw


def _op_log(inputs, attrs):
    (a,) = inputs
    A = a.data
    clamped = np.maximum(A, LOG_CLAMP)
    out = np.log(clamped)

    def bw(g):
        return [np.where(A > LOG_CLAMP, g / clamped, 0.0)]

    return out, bw


def _op_exp(inputs, attrs):
    (a,) = inputs
    out = np.exp(a.data)

    def bw(g):
        return [g * out]

    return out, bw


def _op_sigmoid(inputs, attrs):
    (a,) = inputs
    A = a.data
    out = np.empty_like(A)
    pos = A >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-A[pos]))
    ez = np.exp(A[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        return [g * out * (1.0 - out)]

    return out, bw


def _op_relu(inputs, attrs):
    (a,) = inputs
    A = a.data
    out = np.maximum(A, 0.0)

    def bw(g):
        return [g * (A > 0.0)]

    return out, bw


def _op_layer_norm(inputs, attrs):
    x, gamma, beta = inputs
    eps = attrs.get("eps", 1e-5)
    X, G, B = x.data, gamma.data, beta.data
    d = X.shape[-1]
    if G.shape != (d,) or B.shape != (d,):
        _fail("layer_norm", f"affine shapes {G.shape}/{B.shape} for feature dim {d}")
    mu = X.mean(axis=-1, keepdims=True)
    var = ((X - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (X - mu) / sigma
    out = xhat * G + B

    def bw(g):
        ghat = g * G
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        gx = (ghat - m1 - xhat * m2) / sigma
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        return [gx, ggamma, gbeta]

    return out, bw


def _op_embedding_lookup(inputs, attrs):
    (table,) = inputs
    ids = np.asarray(attrs["ids"])
    T = table.data
    if T.ndim != 2:
        _fail("embedding_lookup", f"table must be 2-D, got {T.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= T.shape[0]):
        _fail("embedding_lookup", f"ids outside [0, {T.shape[0]}) for table {T.shape}")
    out = T[ids]

    def bw(g):
        gt = np.zeros_like(T)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, T.shape[1]))
        return [gt]

    return out, bw


def _op_transpose(inputs, attrs):
    (a,) = inputs
    axes = tuple(attrs.get("axes") or reversed(range(a.data.ndim)))
    if sorted(axes) != list(range(a.data.ndim)):
        _fail("transpose", f"axes {axes} invalid for shape {a.data.shape}")
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return [np.transpose(g, inverse)]

    return out, bw


def _op_scale(inputs, attrs):
    (a,) = inputs
    c = float(attrs["c"])
    out = a.data * c

    def bw(g):
        return [g * c]

    return out, bw


_OPS = {
    "matmul": _op_matmul,
    "add": _op_add,
    "mul": _op_mul,
    "concat": _op_concat,
    "slice": _op_slice,
    "mean": _op_mean,
    "sum": _op_sum,
    "softmax": _op_softmax,
    "log": _op_log,
    "exp": _op_exp,
    "sigmoid": _op_sigmoid,
    "relu": _op_relu,
    "layer_norm": _op_layer_norm,
    "embedding_lookup": _op_embedding_lookup,
    "transpose": _op_transpose,
    "scale": _op_scale,
}


def apply(op_kind: str, inputs: list[Tensor], attrs: dict | None = None) -> Tensor:
    """Run one op and, when any input requires grad, record it on the tape.

    Pure: identical inputs give bitwise-identical outputs, and inputs are
    never written to.
    """
    impl = _OPS.get(op_kind)
    if impl is None:
        raise ValueError(f"unknown op kind {op_kind!r}")
    out_data, backward_fn = impl(inputs, attrs or {})
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op_kind, tuple(inputs), out, backward_fn)
        out.node = node
        graph.nodes.append(node)
    return out


def backward(graph: Graph, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep: accumulate d loss / d leaf for every requires_grad leaf.

    Returns the leaf gradient map and also stores each gradient on the
    leaf's ``.grad`` (overwriting whatever a previous sweep left there).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    produced = {node.output for node in graph.nodes}
    for node in reversed(graph.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        for tensor, piece in zip(node.inputs, node.backward_fn(g)):
            if piece is None or not tensor.requires_grad:
                continue
            held = grads.get(tensor)
            grads[tensor] = piece if held is None else held + piece
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for tensor, g in grads.items():
        if tensor.requires_grad and tensor not in produced:
            tensor.grad = g
            leaf_grads[tensor] = g
    return leaf_grads


def finite_difference_check(f, params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic function of ``params`` (requires_grad
    Tensors) returning a scalar Tensor; it is re-invoked for each probe, so
    it must rebuild its forward pass from the current parameter values.
    Parameter data is perturbed in place and restored.  The relative error
    for a coordinate is ``|analytic - numeric| / max(1, |analytic|,
    |numeric|)``.

    Raises ``FloatingPointError`` naming the parameter and flat coordinate
    if a probe produces a non-finite value.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    graph = Graph()
    with graph:
        loss = f(params)
    if loss.data.size != 1:
        raise ShapeError(f"finite_difference_check: f returned shape {loss.data.shape}")
    if not math.isfinite(float(loss.data.reshape(-1)[0])):
        raise FloatingPointError("finite_difference_check: f is non-finite at the base point")
    analytic = backward(graph, loss)
    worst = 0.0
    for pi, p in enumerate(params):
        ag = analytic.get(p)
        aflat = (np.zeros_like(p.data) if ag is None else ag).reshape(-1)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(f(params).data.reshape(-1)[0])
            flat[j] = orig - eps
            lo = float(f(params).data.reshape(-1)[0])
            flat[j] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise FloatingPointError(
                    f"finite_difference_check: non-finite f at param {pi}, coordinate {j}"
                )
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(aflat[j] - numeric) / max(1.0, abs(aflat[j]), abs(numeric))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# thin wrappers so call sites read like expressions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply("mul", [a, b])


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    return apply("concat", list(tensors), {"axis": axis})


def slice_(a: Tensor, key) -> Tensor:
    return apply("slice", [a], {"key": key})


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return apply("mean", [a], {"axis": axis, "keepdims": keepdims})


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return apply("sum", [a], {"axis": axis, "keepdims": keepdims})


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return apply("softmax", [a], {"axis": axis})


def log(a: Tensor) -> Tensor:
    return apply("log", [a])


def exp(a: Tensor) -> Tensor:
    return apply("exp", [a])


def sigmoid(a: Tensor) -> Tensor:
    return apply("sigmoid", [a])


def relu(a: Tensor) -> Tensor:
    return apply("relu", [a])


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return apply("layer_norm", [x, gamma, beta], {"eps": eps})


def embedding_lookup(table: Tensor, ids) -> Tensor:
    return apply("embedding_lookup", [table], {"ids": np.asarray(ids, dtype=np.int64)})


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    return apply("transpose", [a], {"axes": axes})


def scale(a: Tensor, c: float) -> Tensor:
    return apply("scale", [a], {"c": c})
