"""Dense float64 tensors with reverse-mode automatic differentiation.

Graphs are built from a small fixed set of operations. Construction only
records structure and infers shapes; :func:`forward` materializes values
and :func:`backward` accumulates gradients in reverse construction order.
The ``grad-reverse`` op is the adversarial piece: identity on the way
forward, gradient scaled by a negative coefficient on the way back.
"""

from __future__ import annotations

import itertools
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, GraphStateError, NumericError, ShapeError

OP_KINDS = frozenset(
    {
        "input",
        "matmul",
        "add-bias",
        "relu",
        "softmax-cross-entropy",
        "grad-reverse",
        "scale",
        "sum",
        "mean",
    }
)

_SEQ = itertools.count()


def tensor(data) -> np.ndarray:
    """Coerce ``data`` to a float64 array, rejecting non-finite entries."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite values")
    return arr


class Node:
    """One vertex of a computation graph.

    ``value`` is populated by :func:`forward` (input nodes carry theirs
    from construction), ``grad`` by :func:`backward`. ``coeff`` holds the
    scalar of scale/grad-reverse ops; ``labels``/``weights`` belong to the
    fused softmax-cross-entropy op.
    """

    __slots__ = ("op", "parents", "shape", "value", "grad", "name", "coeff", "labels", "weights", "_seq")

    def __init__(self, op: str, parents: tuple["Node", ...], shape: tuple[int, ...], value=None, name=None):
        self.op = op
        self.parents = parents
        self.shape = shape
        self.value: Optional[np.ndarray] = value
        self.grad: Optional[np.ndarray] = None
        self.name: Optional[str] = name
        self.coeff: float = 0.0
        self.labels: Optional[np.ndarray] = None
        self.weights: Optional[np.ndarray] = None
        self._seq = next(_SEQ)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        label = self.name or hex(id(self))
        return f"Node({self.op}, shape={self.shape}, {label})"


def input_node(value, name: str | None = None) -> Node:
    val = tensor(value)
    return Node("input", (), val.shape, value=val, name=name)


def matmul(a: Node, b: Node) -> Node:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul requires (m,k)x(k,n), got {a.shape} and {b.shape}")
    return Node("matmul", (a, b), (a.shape[0], b.shape[1]))


def add_bias(x: Node, b: Node) -> Node:
    """Add ``b`` to ``x``: same-shape elementwise, or per-row when ``b`` is a vector."""
    if x.shape == b.shape:
        return Node("add-bias", (x, b), x.shape)
    if len(x.shape) == 2 and b.shape == (x.shape[1],):
        return Node("add-bias", (x, b), x.shape)
    raise ShapeError(f"add-bias cannot combine {x.shape} and {b.shape}")


def relu(x: Node) -> Node:
    return Node("relu", (x,), x.shape)


def scale(x: Node, c: float) -> Node:
    node = Node("scale", (x,), x.shape)
    node.coeff = float(c)
    return node


def grad_reverse(x: Node, lam: float) -> Node:
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0.0:
        raise ContractError(f"grad-reverse coefficient must be finite and >= 0, got {lam}")
    node = Node("grad-reverse", (x,), x.shape)
    node.coeff = lam
    return node


def sum_all(x: Node) -> Node:
    return Node("sum", (x,), ())


def mean_all(x: Node) -> Node:
    return Node("mean", (x,), ())


def softmax_cross_entropy(logits: Node, labels: Sequence[int], class_weights=None) -> Node:
    """Fused softmax + weighted cross-entropy, reduced by mean over the batch.

    ``labels`` are class indices into the last axis of ``logits``;
    ``class_weights`` (optional, one per class) multiply each example's
    loss term. Log-probabilities are computed with max subtraction, so the
    loss stays finite for any finite logits.
    """
    if len(logits.shape) != 2:
        raise ShapeError(f"softmax-cross-entropy expects a 2-d logits batch, got {logits.shape}")
    n, c = logits.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (n,):
        raise ShapeError(f"labels shape {lab.shape} does not match batch size {n}")
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= c:
        raise ContractError(f"labels must lie in [0, {c})")
    node = Node("softmax-cross-entropy", (logits,), ())
    node.labels = lab
    if class_weights is not None:
        w = tensor(class_weights)
        if w.shape != (c,):
            raise ShapeError(f"class weights shape {w.shape} does not match {c} classes")
        node.weights = w
    return node


def _topo_order(root: Node) -> list[Node]:
    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.parents)
    # Parents are always created before children, so construction order is
    # a valid topological order.
    nodes.sort(key=lambda n: n._seq)
    return nodes


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _compute(node: Node) -> np.ndarray:
    p = node.parents
    if node.op == "matmul":
        return p[0].value @ p[1].value
    if node.op == "add-bias":
        return p[0].value + p[1].value
    if node.op == "relu":
        return np.maximum(p[0].value, 0.0)
    if node.op == "scale":
        return p[0].value * node.coeff
    if node.op == "grad-reverse":
        return p[0].value.copy()
    if node.op == "sum":
        return np.asarray(p[0].value.sum())
    if node.op == "mean":
        return np.asarray(p[0].value.mean())
    if node.op == "softmax-cross-entropy":
        logp = _log_softmax(p[0].value)
        picked = logp[np.arange(len(node.labels)), node.labels]
        if node.weights is not None:
            picked = picked * node.weights[node.labels]
        return np.asarray(-picked.sum() / len(node.labels))
    raise GraphStateError(f"cannot compute op kind {node.op!r}")


def forward(root: Node) -> np.ndarray:
    """Materialize values bottom-up and return the root value."""
    for node in _topo_order(root):
        if node.op == "input":
            if node.value is None:
                raise GraphStateError("input node has no assigned value")
            continue
        node.value = _compute(node)
    return root.value


def _accumulate(node: Node, grads: dict[int, np.ndarray]) -> None:
    g = grads[id(node)]
    p = node.parents
    if node.op == "matmul":
        _add_grad(grads, p[0], g @ p[1].value.T)
        _add_grad(grads, p[1], p[0].value.T @ g)
    elif node.op == "add-bias":
        _add_grad(grads, p[0], g)
        _add_grad(grads, p[1], g if p[1].shape == node.shape else g.sum(axis=0))
    elif node.op == "relu":
        _add_grad(grads, p[0], g * (p[0].value > 0.0))
    elif node.op == "scale":
        _add_grad(grads, p[0], g * node.coeff)
    elif node.op == "grad-reverse":
        _add_grad(grads, p[0], g * (-node.coeff))
    elif node.op == "sum":
        _add_grad(grads, p[0], np.full(p[0].shape, float(g)))
    elif node.op == "mean":
        _add_grad(grads, p[0], np.full(p[0].shape, float(g) / p[0].value.size))
    elif node.op == "softmax-cross-entropy":
        z = p[0].value
        probs = np.exp(_log_softmax(z))
        onehot = np.zeros_like(z)
        onehot[np.arange(len(node.labels)), node.labels] = 1.0
        wvec = np.ones(len(node.labels)) if node.weights is None else node.weights[node.labels]
        _add_grad(grads, p[0], float(g) / len(node.labels) * wvec[:, None] * (probs - onehot))


def _add_grad(grads: dict[int, np.ndarray], node: Node, g: np.ndarray) -> None:
    key = id(node)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = np.asarray(g, dtype=np.float64)


def backward(root: Node) -> dict[str, np.ndarray]:
    """Populate ``grad`` on every reachable node; return gradients of named leaves.

    Requires a prior :func:`forward` pass on this root and a scalar root.
    """
    if root.value is None:
        raise GraphStateError("backward called before forward")
    if root.shape != ():
        raise ContractError(f"backward requires a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    for node in order:
        if node.op != "input" and node.value is None:
            raise GraphStateError("backward called before forward")
        node.grad = None
    grads: dict[int, np.ndarray] = {id(root): np.asarray(1.0)}
    for node in reversed(order):
        if id(node) not in grads:
            continue  # not on a path to the root
        if node.op != "input":
            _accumulate(node, grads)
    named: dict[str, np.ndarray] = {}
    for node in order:
        node.grad = grads.get(id(node), np.zeros(node.shape))
        if node.op == "input" and node.name is not None:
            named[node.name] = node.grad
    return named
