#==========================================================
# ComputeNode, backward, grad_check, spike surrogate
#==========================================================

from __future__ import annotations

#------------------Standard Library-------------------
import contextvars
import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

#------------------Third-Party-------------------
import numpy as np

#------------------Local-------------------
from .errors import ArgumentError, StructuralError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_node_ids = itertools.count()
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "hebbmem_grad_enabled", default=True
)


#------------------Recording switch-------------------
@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward code without recording a graph (rollouts, evaluation)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


#------------------ComputeNode-------------------
class ComputeNode:
    """A value in the unrolled computation graph together with its backward rule.

    Node ids come from one process-wide counter, so creation order is a valid
    topological order: every parent has a smaller id than its child.
    """

    __slots__ = ("id", "values", "grad", "op_tag", "parents", "requires_grad", "name", "_backward")

    def __init__(
        self,
        values: ArrayLike,
        parents: Sequence["ComputeNode"] = (),
        op_tag: str = "const",
        backward: Optional[BackwardFn] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.id = next(_node_ids)
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.op_tag = op_tag
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.name = name
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def parent_ids(self) -> tuple[int, ...]:
        return tuple(p.id for p in self.parents)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def detach(self) -> "ComputeNode":
        # values are never written in place, sharing the buffer is safe
        return ComputeNode(self.values, op_tag="detach")

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def backward(self, retain_graph: bool = False) -> dict[int, np.ndarray]:
        return backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"ComputeNode#{self.id}{label}(op={self.op_tag}, shape={self.shape})"

    def __add__(self, other):
        if isinstance(other, ComputeNode):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, ComputeNode):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, ComputeNode):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


#------------------Node construction-------------------
def constant(values: ArrayLike, name: Optional[str] = None) -> ComputeNode:
    return ComputeNode(values, op_tag="const", name=name)


def parameter(values: ArrayLike, name: Optional[str] = None) -> ComputeNode:
    """Trainable leaf. The array is copied so optimizer updates never alias caller data."""
    return ComputeNode(np.array(values, dtype=np.float64, copy=True), op_tag="param", requires_grad=True, name=name)


def as_node(x: Union[ComputeNode, ArrayLike]) -> ComputeNode:
    return x if isinstance(x, ComputeNode) else constant(x)


def make_node(
    values: np.ndarray,
    parents: Sequence[ComputeNode],
    op_tag: str,
    backward: BackwardFn,
) -> ComputeNode:
    """Record an op result. Returns a constant when nothing upstream needs a gradient."""
    parents = tuple(parents)
    if not _grad_enabled.get() or not any(p.requires_grad for p in parents):
        return ComputeNode(values, op_tag=op_tag)
    return ComputeNode(values, parents, op_tag, backward, requires_grad=True)


def _check_same_shape(a: ComputeNode, b: ComputeNode, op: str) -> None:
    if a.shape != b.shape:
        raise ArgumentError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


#------------------Elementwise ops-------------------
def add(a, b) -> ComputeNode:
    a, b = as_node(a), as_node(b)
    _check_same_shape(a, b, "add")
    return make_node(a.values + b.values, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> ComputeNode:
    a, b = as_node(a), as_node(b)
    _check_same_shape(a, b, "sub")
    return make_node(a.values - b.values, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> ComputeNode:
    a, b = as_node(a), as_node(b)
    _check_same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return make_node(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))


def scale(a, k: float) -> ComputeNode:
    a = as_node(a)
    return make_node(a.values * k, (a,), "scale", lambda g: (g * k,))


def shift(a, k: float) -> ComputeNode:
    a = as_node(a)
    return make_node(a.values + k, (a,), "shift", lambda g: (g,))


def add_n(nodes: Sequence[ComputeNode]) -> ComputeNode:
    """Sum of equally shaped nodes in one graph node."""
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ArgumentError("add_n: empty input")
    for n in nodes[1:]:
        _check_same_shape(nodes[0], n, "add_n")
    total = np.zeros_like(nodes[0].values)
    for n in nodes:
        total = total + n.values
    count = len(nodes)
    return make_node(total, nodes, "add_n", lambda g: (g,) * count)


def relu(a) -> ComputeNode:
    a = as_node(a)
    mask = a.values > 0
    return make_node(np.where(mask, a.values, 0.0), (a,), "relu", lambda g: (g * mask,))


def tanh(a) -> ComputeNode:
    a = as_node(a)
    t = np.tanh(a.values)
    return make_node(t, (a,), "tanh", lambda g: (g * (1.0 - t * t),))


def exp(a) -> ComputeNode:
    a = as_node(a)
    e = np.exp(a.values)
    return make_node(e, (a,), "exp", lambda g: (g * e,))


def log(a) -> ComputeNode:
    a = as_node(a)
    av = a.values
    return make_node(np.log(av), (a,), "log", lambda g: (g / av,))


def square(a) -> ComputeNode:
    a = as_node(a)
    av = a.values
    return make_node(av * av, (a,), "square", lambda g: (2.0 * av * g,))


def minimum(a, b) -> ComputeNode:
    a, b = as_node(a), as_node(b)
    _check_same_shape(a, b, "minimum")
    take_a = a.values <= b.values
    return make_node(
        np.where(take_a, a.values, b.values), (a, b), "minimum", lambda g: (g * take_a, g * ~take_a)
    )


def clip(a, lo: float, hi: float) -> ComputeNode:
    a = as_node(a)
    inside = (a.values >= lo) & (a.values <= hi)
    return make_node(np.clip(a.values, lo, hi), (a,), "clip", lambda g: (g * inside,))


def row_mask(a, keep: np.ndarray) -> ComputeNode:
    """Zero the leading-axis rows where `keep` is false (per-environment resets)."""
    a = as_node(a)
    keep = np.asarray(keep, dtype=np.float64)
    if keep.shape != a.shape[:1]:
        raise ArgumentError(f"row_mask: mask shape {keep.shape} does not match rows of {a.shape}")
    k = keep.reshape(keep.shape + (1,) * (a.values.ndim - 1))
    return make_node(a.values * k, (a,), "row_mask", lambda g: (g * k,))


#------------------Reductions-------------------
def sum(a, axis: Optional[int] = None) -> ComputeNode:  # noqa: A001 - mirrors numpy naming
    a = as_node(a)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_node(a.values.sum(axis=axis), (a,), "sum", backward)


def mean(a, axis: Optional[int] = None) -> ComputeNode:
    a = as_node(a)
    count = a.values.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


#------------------Linear algebra-------------------
def matmul(x, w) -> ComputeNode:
    """x @ w.T for x of shape (..., in) and a weight matrix w of shape (out, in)."""
    x, w = as_node(x), as_node(w)
    xv, wv = x.values, w.values
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
        raise ArgumentError(f"matmul: cannot apply weights {wv.shape} to input {xv.shape}")

    def backward(g):
        gx = g @ wv
        gw = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        return gx, gw

    return make_node(xv @ wv.T, (x, w), "matmul", backward)


def add_bias(x, b) -> ComputeNode:
    x, b = as_node(x), as_node(b)
    if b.values.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ArgumentError(f"add_bias: bias {b.shape} does not fit input {x.shape}")
    n = b.shape[0]
    return make_node(x.values + b.values, (x, b), "add_bias", lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def bmatvec(w, z) -> ComputeNode:
    """Batched matrix-vector product: w (B, k, j) applied to z (B, j) gives (B, k)."""
    w, z = as_node(w), as_node(z)
    wv, zv = w.values, z.values
    if wv.ndim != 3 or zv.ndim != 2 or wv.shape[0] != zv.shape[0] or wv.shape[2] != zv.shape[1]:
        raise ArgumentError(f"bmatvec: cannot apply {wv.shape} to {zv.shape}")

    def backward(g):
        gw = g[:, :, None] * zv[:, None, :]
        gz = (g[:, None, :] @ wv)[:, 0, :]
        return gw, gz

    return make_node((wv @ zv[:, :, None])[:, :, 0], (w, z), "bmatvec", backward)


#------------------Shape ops-------------------
def reshape(a, shape: tuple[int, ...]) -> ComputeNode:
    a = as_node(a)
    original = a.shape
    return make_node(a.values.reshape(shape), (a,), "reshape", lambda g: (g.reshape(original),))


def take_steps(a, start: int, stop: int) -> ComputeNode:
    """Rows start:stop of the leading (time) axis."""
    a = as_node(a)
    shape = a.shape
    if not 0 <= start <= stop <= shape[0]:
        raise ArgumentError(f"take_steps: {start}:{stop} outside {shape[0]} steps")

    def backward(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return make_node(a.values[start:stop], (a,), "take_steps", backward)


def packed_op(
    outputs: Sequence[np.ndarray],
    parents: Sequence[ComputeNode],
    op_tag: str,
    backward: Callable[[list[np.ndarray]], Sequence[Optional[np.ndarray]]],
) -> list[ComputeNode]:
    """Record one op with several results.

    The results sit back to back in one flat core node and each returned node is a
    view of its slot. `backward` receives one gradient per result, zeros for the
    results nothing downstream used.
    """
    shapes = [np.shape(o) for o in outputs]
    bounds = np.cumsum([0] + [int(np.prod(s)) for s in shapes])
    flat = np.concatenate([np.ravel(o) for o in outputs]) if outputs else np.zeros(0)

    def core_backward(g):
        return backward([g[bounds[i]:bounds[i + 1]].reshape(s) for i, s in enumerate(shapes)])

    core = make_node(flat, parents, op_tag, core_backward)
    return [_slot(core, int(bounds[i]), int(bounds[i + 1]), s) for i, s in enumerate(shapes)]


def _slot(core: ComputeNode, start: int, stop: int, shape: tuple[int, ...]) -> ComputeNode:
    size = core.values.size

    def backward(g):
        out = np.zeros(size)
        out[start:stop] = g.reshape(-1)
        return (out,)

    return make_node(core.values[start:stop].reshape(shape), (core,), "slot", backward)


def concat(nodes: Sequence[ComputeNode], axis: int = -1) -> ComputeNode:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return make_node(
        np.concatenate([n.values for n in nodes], axis=axis),
        nodes,
        "concat",
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


#------------------Softmax family-------------------
def log_softmax(x) -> ComputeNode:
    x = as_node(x)
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return make_node(out, (x,), "log_softmax", lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def gather(x, index: np.ndarray) -> ComputeNode:
    """Pick x[b, index[b]] for every row b of a (B, K) node."""
    x = as_node(x)
    index = np.asarray(index, dtype=np.int64)
    if x.values.ndim != 2 or index.shape != (x.shape[0],):
        raise ArgumentError(f"gather: index {index.shape} does not fit {x.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return make_node(x.values[rows, index], (x,), "gather", backward)


#------------------Spike function-------------------
@dataclass(frozen=True)
class SurrogateParams:
    """Triangular pseudo-derivative: dz/dv = beta * max(0, 1 - |v|)."""

    beta: float = 1.0
    theta: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ArgumentError(f"beta must lie in (0, 1], got {self.beta}")
        if self.theta <= 0.0:
            raise ArgumentError(f"theta must be positive, got {self.theta}")


def normalized_potential(membrane: np.ndarray, theta: float) -> np.ndarray:
    return (np.asarray(membrane, dtype=np.float64) - theta) / theta


def spike_threshold(membrane: np.ndarray, theta: float) -> np.ndarray:
    """Binary spikes, 1 where the membrane strictly exceeds theta."""
    return (np.asarray(membrane) > theta).astype(np.float64)


def spike_backward(v_norm: np.ndarray, upstream: np.ndarray, params: SurrogateParams) -> np.ndarray:
    return upstream * params.beta * np.maximum(0.0, 1.0 - np.abs(v_norm))


def surrogate_slope(membrane: np.ndarray, params: SurrogateParams, allowed: Optional[np.ndarray] = None) -> np.ndarray:
    """dz/dV of the spike node as one array: beta * max(0, 1 - |v|) / theta, masked."""
    slope = params.beta * np.maximum(0.0, 1.0 - np.abs(normalized_potential(membrane, params.theta)))
    if allowed is not None:
        slope = slope * allowed
    return slope / params.theta


def spike(membrane: ComputeNode, params: SurrogateParams, allowed: Optional[np.ndarray] = None) -> ComputeNode:
    """Threshold node. `allowed` masks neurons that may not fire (refractory) in both passes.

    The surrogate is the derivative with respect to v = (V - theta)/theta, so the
    gradient reaching V carries the extra 1/theta of the normalization.
    """
    membrane = as_node(membrane)
    v_norm = normalized_potential(membrane.values, params.theta)
    z = spike_threshold(membrane.values, params.theta)
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=np.float64)
        z = z * allowed

    def backward(g):
        gv = spike_backward(v_norm, g, params)
        if allowed is not None:
            gv = gv * allowed
        return (gv / params.theta,)

    return make_node(z, (membrane,), "spike", backward)


#------------------Backward pass-------------------
def _collect(root: ComputeNode) -> list[ComputeNode]:
    """All nodes reachable from root through gradient-carrying edges (iterative DFS)."""
    seen: dict[int, ComputeNode] = {root.id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for parent in node.parents:
            if parent.id >= node.id:
                raise StructuralError(
                    f"cycle detected: node {node.id} ({node.op_tag}) lists parent {parent.id}"
                )
            if parent.id not in seen and parent.requires_grad:
                seen[parent.id] = parent
                stack.append(parent)
    return list(seen.values())


def backward(loss: ComputeNode, *, retain_graph: bool = False) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Parameter leaves accumulate into `.grad`; the returned map goes from leaf id to
    that accumulated gradient. Interior gradients are dropped as soon as they have
    been pushed to the parents, and unless `retain_graph` is set the backward rules
    (and the forward values they close over) are released too.
    """
    if loss.values.size != 1:
        raise StructuralError(f"loss must be a scalar, got shape {loss.shape}")
    nodes = _collect(loss)
    nodes.sort(key=lambda n: n.id, reverse=True)

    pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.values)}
    gradients: dict[int, np.ndarray] = {}
    for node in nodes:
        g = pending.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
                gradients[node.id] = node.grad
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                raise StructuralError(
                    f"gradient shape {pg.shape} from {node.op_tag} node {node.id} "
                    f"does not match parent {parent.id} of shape {parent.shape}"
                )
            prev = pending.get(parent.id)
            pending[parent.id] = pg if prev is None else prev + pg
        if not retain_graph:
            node._backward = None
            node.parents = ()
            node.requires_grad = False
    return gradients


#------------------Gradient check-------------------
def grad_check(
    function: Callable[..., ComputeNode],
    params: Union[np.ndarray, Sequence[np.ndarray]],
    eps: float = 1e-5,
) -> float:
    """Max over parameters of |analytic - central difference| / max(1, |analytic|).

    `function` receives one node per parameter array and returns a scalar node. The
    graph it builds must be smooth: spike nodes are rejected because finite
    differences across the hard threshold are meaningless.
    """
    if eps <= 0:
        raise ArgumentError(f"eps must be positive, got {eps}")
    arrays = [np.array(p, dtype=np.float64) for p in params] if isinstance(params, (list, tuple)) else [
        np.array(params, dtype=np.float64)
    ]

    nodes = [parameter(a, name=f"p{i}") for i, a in enumerate(arrays)]
    loss = function(*nodes)
    if any(n.op_tag == "spike" for n in _collect(loss)):
        raise ArgumentError("grad_check: graph contains spike nodes")
    backward(loss)

    def evaluate(values: list[np.ndarray]) -> float:
        with no_grad():
            return function(*[constant(v) for v in values]).item()

    worst = 0.0
    for i, node in enumerate(nodes):
        analytic = node.grad if node.grad is not None else np.zeros_like(arrays[i])
        for idx in np.ndindex(arrays[i].shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
            err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
            worst = max(worst, err)
    logger.debug("grad_check: %d parameter arrays, worst relative error %.3e", len(arrays), worst)
    return worst
