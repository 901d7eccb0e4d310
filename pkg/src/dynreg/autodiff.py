"""Tape-based reverse-mode automatic differentiation over float64 arrays.

A :class:`Graph` records operations in execution order. Each node keeps its
output array, the inputs it consumed and whatever context its backward rule
needs. Because the op attributes (including any sampled perturbation scales)
are stored on the node, a graph can be replayed with substituted parameter
values, which is how :func:`grad_check` runs finite differences.

Op kinds::

    matmul, conv2d, add, scalar_mul, relu, batchnorm,
    global_avg_pool, concat, softmax_cross_entropy

``scalar_mul`` carries two scales: ``scale`` used in the forward pass and
``backward_scale`` used when propagating gradients. They coincide for an
ordinary scaling and differ for shake-style perturbations.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

Gradients = Dict[int, np.ndarray]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Parameter:
    """A trainable array that persists across graphs."""

    def __init__(self, data, name=""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


@dataclass
class Node:
    id: int
    kind: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    attrs: Dict[str, Any] = field(default_factory=dict)
    ctx: Any = None
    param: Optional[Parameter] = None


# ---------------------------------------------------------------------------
# op rules: forward(values, attrs) -> (out, ctx); backward(g, values, out, ctx, attrs) -> grads


def _shape_fail(kind, *shapes, why=""):
    shown = ", ".join(str(tuple(s)) for s in shapes)
    msg = f"{kind}: incompatible input shapes {shown}"
    raise ShapeError(f"{msg} ({why})" if why else msg)


def _matmul_fwd(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        _shape_fail("matmul", a.shape, b.shape)
    return a @ b, None


def _matmul_bwd(g, vals, out, ctx, attrs):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _conv_slices(k, stride, h_out, w_out):
    for i in range(k):
        for j in range(k):
            yield i, j, (slice(i, i + stride * (h_out - 1) + 1, stride),
                         slice(j, j + stride * (w_out - 1) + 1, stride))


def _conv2d_fwd(vals, attrs):
    x, w = vals
    stride = attrs.get("stride", 1)
    if x.ndim != 4 or w.ndim != 4:
        _shape_fail("conv2d", x.shape, w.shape, why="expected NCHW input and OIkk kernel")
    k = w.shape[2]
    if k not in (1, 3) or w.shape[3] != k:
        _shape_fail("conv2d", x.shape, w.shape, why="kernel must be 1x1 or 3x3")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.shape[1] != w.shape[1]:
        _shape_fail("conv2d", x.shape, w.shape, why="channel mismatch")
    pad = k // 2
    n, c, h, wd = x.shape
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        xp[:, :, pad:pad + h, pad:pad + wd] = x
    else:
        xp = x
    # (n, c, h_out, w_out, k, k) view of every receptive field
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return out, (xp, pad)


def _conv2d_bwd(g, vals, out, ctx, attrs):
    x, w = vals
    xp, pad = ctx
    stride = attrs.get("stride", 1)
    k = w.shape[2]
    h_out, w_out = g.shape[2], g.shape[3]
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for i, j, (si, sj) in _conv_slices(k, stride, h_out, w_out):
        dw[:, :, i, j] = np.tensordot(g, xp[:, :, si, sj], axes=([0, 2, 3], [0, 2, 3]))
        dxp[:, :, si, sj] += np.tensordot(w[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
    dx = dxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]] if pad else dxp
    return [dx, dw]


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _add_fwd(vals, attrs):
    a, b = vals
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        shape = None
    if shape != a.shape:
        _shape_fail("add", a.shape, b.shape, why="second operand must broadcast to the first")
    return a + b, None


def _add_bwd(g, vals, out, ctx, attrs):
    return [g, _unbroadcast(g, vals[1].shape)]


def _scale_array(scale, x):
    s = np.asarray(scale, dtype=np.float64)
    if s.ndim == 0:
        return s
    if s.shape != (x.shape[0],):
        _shape_fail("scalar_mul", x.shape, s.shape, why="per-sample scale must have one entry per row")
    return s.reshape((-1,) + (1,) * (x.ndim - 1))


def _scalar_mul_fwd(vals, attrs):
    (x,) = vals
    out = x * _scale_array(attrs["scale"], x)
    if attrs.get("offset") is not None:
        out = out + attrs["offset"]
    return out, None


def _scalar_mul_bwd(g, vals, out, ctx, attrs):
    scale = attrs.get("backward_scale", attrs["scale"])
    return [g * _scale_array(scale, vals[0])]


def _relu_fwd(vals, attrs):
    return np.maximum(vals[0], 0.0), None


def _relu_bwd(g, vals, out, ctx, attrs):
    return [g * (vals[0] > 0)]


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, x):
    return v.reshape((1, -1) + (1,) * (x.ndim - 2))


def _batchnorm_fwd(vals, attrs):
    x, gamma, beta = vals
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        _shape_fail("batchnorm", x.shape, gamma.shape, beta.shape)
    eps = attrs.get("eps", BN_EPS)
    if attrs.get("training", True):
        axes = _bn_axes(x)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean = np.asarray(attrs["running_mean"])
        var = np.asarray(attrs["running_var"])
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_view(mean, x)) * _bn_view(inv_std, x)
    out = _bn_view(gamma, x) * xhat + _bn_view(beta, x)
    return out, {"xhat": xhat, "inv_std": inv_std, "mean": mean, "var": var}


def _batchnorm_bwd(g, vals, out, ctx, attrs):
    x, gamma, _ = vals
    axes = _bn_axes(x)
    xhat, inv_std = ctx["xhat"], ctx["inv_std"]
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    dxhat = g * _bn_view(gamma, x)
    if attrs.get("training", True):
        m = x.size // x.shape[1]
        dx = (_bn_view(inv_std, x) / m) * (
            m * dxhat
            - _bn_view(dxhat.sum(axis=axes), x)
            - xhat * _bn_view((dxhat * xhat).sum(axis=axes), x)
        )
    else:
        dx = dxhat * _bn_view(inv_std, x)
    return [dx, dgamma, dbeta]


def _gap_fwd(vals, attrs):
    (x,) = vals
    if x.ndim != 4:
        _shape_fail("global_avg_pool", x.shape, why="expected NCHW")
    return x.mean(axis=(2, 3)), None


def _gap_bwd(g, vals, out, ctx, attrs):
    x = vals[0]
    hw = x.shape[2] * x.shape[3]
    return [np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy()]


def _concat_fwd(vals, attrs):
    first = vals[0]
    for v in vals[1:]:
        if v.ndim != first.ndim or v.shape[0] != first.shape[0] or v.shape[2:] != first.shape[2:]:
            _shape_fail("concat", *(u.shape for u in vals), why="only the channel axis may differ")
    return np.concatenate(vals, axis=1), None


def _concat_bwd(g, vals, out, ctx, attrs):
    bounds = np.cumsum([v.shape[1] for v in vals])[:-1]
    return list(np.split(g, bounds, axis=1))


def _softmax_ce_fwd(vals, attrs):
    (logits,) = vals
    labels = np.asarray(attrs["labels"], dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        _shape_fail("softmax_cross_entropy", logits.shape, labels.shape)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - log_z[:, None]
    loss = -logp[np.arange(len(labels)), labels].mean()
    return np.asarray(loss), np.exp(logp)


def _softmax_ce_bwd(g, vals, out, ctx, attrs):
    labels = np.asarray(attrs["labels"], dtype=np.int64)
    probs = ctx.copy()
    probs[np.arange(len(labels)), labels] -= 1.0
    return [probs * (g / len(labels))]


OpRule = Tuple[Callable, Callable]

OPS: Dict[str, OpRule] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "add": (_add_fwd, _add_bwd),
    "scalar_mul": (_scalar_mul_fwd, _scalar_mul_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "batchnorm": (_batchnorm_fwd, _batchnorm_bwd),
    "global_avg_pool": (_gap_fwd, _gap_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "softmax_cross_entropy": (_softmax_ce_fwd, _softmax_ce_bwd),
}

_ARITY = {"matmul": 2, "conv2d": 2, "add": 2, "scalar_mul": 1, "relu": 1,
          "batchnorm": 3, "global_avg_pool": 1, "softmax_cross_entropy": 1}


class Graph:
    """An append-only tape of operations.

    Leaves are created with :meth:`param` (trainable) and :meth:`const`.
    Everything else goes through :meth:`forward_op` or its shorthands.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.parameters: List[int] = []
        self._param_nodes: Dict[int, int] = {}

    def __len__(self):
        return len(self.nodes)

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def _append(self, kind, inputs, value, attrs=None, ctx=None, param=None):
        node = Node(len(self.nodes), kind, tuple(inputs), value, attrs or {}, ctx, param)
        self.nodes.append(node)
        return node.id

    def param(self, p) -> int:
        """Leaf for a trainable array; a Parameter maps to one node per graph."""
        if not isinstance(p, Parameter):
            p = Parameter(p)
        key = id(p)
        if key in self._param_nodes:
            return self._param_nodes[key]
        nid = self._append("param", (), p.data, param=p)
        self.parameters.append(nid)
        self._param_nodes[key] = nid
        return nid

    def const(self, value) -> int:
        return self._append("const", (), np.asarray(value, dtype=np.float64))

    def forward_op(self, kind: str, inputs: Sequence[int], attrs: Optional[dict] = None) -> int:
        if kind not in OPS:
            raise ValueError(f"unknown op kind {kind!r}")
        inputs = tuple(inputs)
        arity = _ARITY.get(kind)
        if arity is not None and len(inputs) != arity:
            raise ShapeError(f"{kind}: expected {arity} inputs, got {len(inputs)}")
        if kind == "concat" and len(inputs) < 1:
            raise ShapeError("concat: needs at least one input")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{kind}: input {i} does not name an earlier node")
        attrs = dict(attrs or {})
        out, ctx = OPS[kind][0]([self.nodes[i].value for i in inputs], attrs)
        return self._append(kind, inputs, out, attrs, ctx)

    # shorthands
    def matmul(self, a, b):
        return self.forward_op("matmul", (a, b))

    def conv2d(self, x, w, stride=1):
        return self.forward_op("conv2d", (x, w), {"stride": stride})

    def add(self, a, b):
        return self.forward_op("add", (a, b))

    def scalar_mul(self, x, scale, backward_scale=None, stochastic=False):
        attrs = {"scale": scale,
                 "backward_scale": scale if backward_scale is None else backward_scale,
                 "stochastic": stochastic}
        return self.forward_op("scalar_mul", (x,), attrs)

    def relu(self, x):
        return self.forward_op("relu", (x,))

    def batchnorm(self, x, gamma, beta, training=True, running_mean=None, running_var=None):
        attrs = {"training": training}
        if not training:
            attrs["running_mean"] = running_mean
            attrs["running_var"] = running_var
        return self.forward_op("batchnorm", (x, gamma, beta), attrs)

    def global_avg_pool(self, x):
        return self.forward_op("global_avg_pool", (x,))

    def concat(self, *xs):
        return self.forward_op("concat", xs)

    def softmax_cross_entropy(self, logits, labels):
        return self.forward_op("softmax_cross_entropy", (logits,), {"labels": np.asarray(labels)})

    def backward(self, loss_node: int) -> Gradients:
        return backward(self, loss_node)

    def replay(self, overrides: Optional[Dict[int, np.ndarray]] = None, full: bool = False) -> List[np.ndarray]:
        """Re-execute the tape, substituting leaf values given in ``overrides``.

        Only nodes downstream of an override are recomputed and the rest keep
        their recorded values, unless ``full`` is set.
        """
        overrides = overrides or {}
        values: List[np.ndarray] = []
        dirty = set()
        for node in self.nodes:
            if node.id in overrides:
                values.append(np.asarray(overrides[node.id], dtype=np.float64))
                dirty.add(node.id)
            elif node.kind in ("param", "const") or not (full or dirty.intersection(node.inputs)):
                values.append(node.value)
            else:
                out, _ = OPS[node.kind][0]([values[i] for i in node.inputs], node.attrs)
                values.append(out)
                dirty.add(node.id)
        return values

    def frozen(self) -> "Graph":
        """Copy whose stochastic scales use the forward value in backward too."""
        g = Graph()
        g.parameters = list(self.parameters)
        g._param_nodes = dict(self._param_nodes)
        for node in self.nodes:
            attrs = dict(node.attrs)
            if node.kind == "scalar_mul":
                attrs["backward_scale"] = attrs["scale"]
            g.nodes.append(Node(node.id, node.kind, node.inputs, node.value, attrs, node.ctx, node.param))
        return g

    def anchored(self) -> "Graph":
        """Copy in which each decoupled scale node computes ``mu*b + (theta - mu)*b0``.

        ``b0`` is the branch value recorded on this tape, so the copy has the
        same forward values, while its true derivative uses ``mu``: the function
        whose gradient ``backward`` returns on a whole network.
        """
        g = self.frozen()
        for node, orig in zip(g.nodes, self.nodes):
            if node.kind == "scalar_mul":
                fwd, bwd = orig.attrs["scale"], orig.attrs.get("backward_scale", orig.attrs["scale"])
                b0 = self.nodes[node.inputs[0]].value
                node.attrs["scale"] = bwd
                node.attrs["backward_scale"] = bwd
                node.attrs["offset"] = b0 * _scale_array(np.asarray(fwd) - np.asarray(bwd), b0)
        return g

    def surrogate(self) -> "Graph":
        """Copy of the graph with every forward scale replaced by its backward scale.

        The result is the function whose exact gradient ``backward`` computes
        on the original graph.
        """
        g = Graph()
        g.parameters = list(self.parameters)
        g._param_nodes = dict(self._param_nodes)
        for node in self.nodes:
            attrs = dict(node.attrs)
            if node.kind == "scalar_mul":
                attrs["scale"] = attrs.get("backward_scale", attrs["scale"])
            g.nodes.append(Node(node.id, node.kind, node.inputs, node.value, attrs, node.ctx, node.param))
        values = g.replay(full=True)
        for node, v in zip(g.nodes, values):
            if node.kind not in ("param", "const"):
                node.value = v
                node.ctx = OPS[node.kind][0]([values[i] for i in node.inputs], node.attrs)[1]
        return g


def backward(graph: Graph, loss_node: int) -> Gradients:
    """Gradients of a scalar node with respect to every parameter node."""
    loss = graph.nodes[loss_node].value
    if np.size(loss) != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {np.shape(loss)}")
    grads: Dict[int, np.ndarray] = {loss_node: np.ones_like(loss)}
    for node in reversed(graph.nodes[: loss_node + 1]):
        g = grads.get(node.id)
        if g is None or not node.inputs:
            continue
        vals = [graph.nodes[i].value for i in node.inputs]
        for i, gi in zip(node.inputs, OPS[node.kind][1](g, vals, node.value, node.ctx, node.attrs)):
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    return {p: grads.get(p, np.zeros_like(graph.nodes[p].value)) for p in graph.parameters}


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    per_parameter: Dict[str, float]
    checked: int

    def passed(self, tol):
        return self.max_rel_error < tol


def relative_error(a, b, floor=1e-6):
    """Elementwise |a-b| / max(|a|, |b|, floor).

    ``floor`` keeps gradients that are zero up to rounding from producing
    meaningless ratios.
    """
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradients(graph: Graph, loss_node: int, step: float = 1e-5,
                      max_entries: Optional[int] = None, rng=None) -> Dict[int, Tuple[list, np.ndarray]]:
    """Central differences of the loss for each parameter entry, by tape replay.

    Returns ``{param node: (entry indices, derivatives)}``. ``max_entries``
    subsamples the entries of large parameters.
    """
    if step <= 0:
        raise ValueError("numeric_gradients: step must be positive")
    rng = rng or np.random.default_rng(0)
    out = {}
    for pid in graph.parameters:
        base = graph.nodes[pid].value
        entries = list(np.ndindex(base.shape))
        if max_entries is not None and len(entries) > max_entries:
            pick = rng.choice(len(entries), size=max_entries, replace=False)
            entries = [entries[i] for i in sorted(pick)]
        numeric = np.empty(len(entries))
        for j, idx in enumerate(entries):
            bumped = base.copy()
            bumped[idx] += step
            up = graph.replay({pid: bumped})[loss_node].item()
            bumped[idx] -= 2 * step
            down = graph.replay({pid: bumped})[loss_node].item()
            numeric[j] = (up - down) / (2 * step)
        out[pid] = (entries, numeric)
    return out


def _report(graph, analytic, numeric, floor):
    errors, per = [], {}
    for pid, (entries, num) in numeric.items():
        a = np.array([analytic[pid][idx] for idx in entries])
        err = relative_error(a, num, floor)
        param = graph.nodes[pid].param
        name = param.name if param is not None and param.name else f"node{pid}"
        per[name] = float(err.max()) if err.size else 0.0
        errors.append(err)
    flat = np.concatenate(errors) if errors else np.zeros(1)
    return GradCheckReport(float(flat.max()), float(flat.mean()), per, int(flat.size))


def grad_check(graph: Graph, loss_node: int, step: float = 1e-5, floor: float = 1e-6,
               max_entries: Optional[int] = None, rng=None) -> GradCheckReport:
    """Compare ``backward`` against central differences on every parameter entry.

    Stochastic ``scalar_mul`` nodes must be frozen (backward scale equal to
    forward scale), otherwise the two sides measure different functions.
    """
    for node in graph.nodes:
        if node.kind == "scalar_mul" and node.attrs.get("stochastic"):
            if not np.array_equal(np.asarray(node.attrs["scale"]), np.asarray(node.attrs["backward_scale"])):
                raise ValueError(f"grad_check: node {node.id} is an unfrozen stochastic scale")
    if np.size(graph.nodes[loss_node].value) != 1:
        raise ShapeError("grad_check: loss must be a scalar")
    analytic = backward(graph, loss_node)
    numeric = numeric_gradients(graph, loss_node, step, max_entries, rng)
    return _report(graph, analytic, numeric, floor)


def surrogate_check(graph: Graph, loss_node: int, step: float = 1e-5, floor: float = 1e-6,
                    max_entries: Optional[int] = None, rng=None) -> GradCheckReport:
    """Compare ``backward`` on a graph with decoupled scales against central
    differences of its surrogate (every forward scale replaced by its backward one).

    The two agree when everything downstream of each scale node is linear in
    it, e.g. a single block under a linear read-out. For whole networks use
    :func:`anchored_check`.
    """
    analytic = backward(graph, loss_node)
    numeric = numeric_gradients(graph.surrogate(), loss_node, step, max_entries, rng)
    return _report(graph, analytic, numeric, floor)


def anchored_check(graph: Graph, loss_node: int, step: float = 1e-5, floor: float = 1e-6,
                   max_entries: Optional[int] = None, rng=None) -> GradCheckReport:
    """Compare ``backward`` against central differences of :meth:`Graph.anchored`."""
    analytic = backward(graph, loss_node)
    numeric = numeric_gradients(graph.anchored(), loss_node, step, max_entries, rng)
    return _report(graph, analytic, numeric, floor)
