"""Minimal dense reverse-mode differentiation on float64 numpy arrays.

Every operation returns a :class:`Node` carrying the forward value, the
parent nodes and a closure that routes upstream gradients to the parents.
``backward`` walks the graph once in reverse topological order. The op set
is exactly what the cascade model needs; broadcasting is limited to the
documented cases.

Masks are additive constants with "off" entries at :data:`MASK_OFF`, a
large negative sentinel whose softmax weight underflows to exactly 0.0, so
masked positions cannot leak into values or gradients.
"""

from __future__ import annotations

import numpy as np

MASK_OFF = -1e9


class ShapeError(ValueError):
    """Operands with incompatible shapes for an op."""


class NumericsError(FloatingPointError):
    """A non-finite value appeared where finite math was required."""


class Node:
    """One value in the differentiation graph.

    ``grad`` stays ``None`` until the backward pass reaches the node.
    Leaf nodes (no parents) double as trainable parameters.
    """

    __slots__ = ("value", "grad", "parents", "op", "_backward")

    def __init__(self, value, parents=(), op="leaf"):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericsError(f"non-finite values produced by op {op!r}")
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def _accumulate(node, grad):
    if node.grad is None:
        node.grad = np.array(grad, dtype=np.float64)
    else:
        node.grad += grad


def _require(cond, op, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {' and '.join(map(str, shapes))}")


def _topological_order(root):
    """Iterative post-order DFS; each node appears once, parents first."""
    order = []
    seen = {id(root)}
    stack = [(root, iter(root.parents))]
    while stack:
        node, parents = stack[-1]
        pushed = False
        for parent in parents:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent.parents)))
                pushed = True
                break
        if not pushed:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Node, params=()):
    """Populate ``grad`` on all ancestors of ``loss``.

    ``loss`` must be scalar. Any node listed in ``params`` that the loss
    does not reach gets an explicit zero gradient.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.value)


def zero_grads(params):
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    _require(a.value.ndim == 2 and b.value.ndim == 2
             and a.value.shape[1] == b.value.shape[0],
             "matmul", a.value.shape, b.value.shape)
    out = Node(a.value @ b.value, (a, b), op="matmul")

    def bw(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    out._backward = bw
    return out


def sparse_matmul(matrix, x: Node) -> Node:
    """Multiply a constant sparse matrix (scipy CSR) by a dense node."""
    _require(x.value.ndim == 2 and matrix.shape[1] == x.value.shape[0],
             "sparse_matmul", matrix.shape, x.value.shape)
    out = Node(matrix @ x.value, (x,), op="sparse_matmul")

    def bw(g):
        _accumulate(x, matrix.T @ g)

    out._backward = bw
    return out


def _broadcast_row_ok(shape, row_shape):
    if len(row_shape) == 1:
        return len(shape) == 2 and shape[1] == row_shape[0]
    return len(row_shape) == 2 and row_shape[0] == 1 and len(shape) == 2 \
        and shape[1] == row_shape[1]


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; one side may be a broadcast row of shape (d,) or (1, d)."""
    if a.value.shape == b.value.shape:
        mode = "same"
    elif _broadcast_row_ok(a.value.shape, b.value.shape):
        mode = "row_b"
    elif _broadcast_row_ok(b.value.shape, a.value.shape):
        mode = "row_a"
    else:
        raise ShapeError(f"add: incompatible shapes {a.value.shape} and {b.value.shape}")
    out = Node(a.value + b.value, (a, b), op="add")

    def bw(g):
        if mode == "row_a":
            _accumulate(a, g.sum(axis=0).reshape(a.value.shape))
        else:
            _accumulate(a, g)
        if mode == "row_b":
            _accumulate(b, g.sum(axis=0).reshape(b.value.shape))
        else:
            _accumulate(b, g)

    out._backward = bw
    return out


def add_n(nodes) -> Node:
    """Sum of equally shaped nodes."""
    nodes = list(nodes)
    if not nodes:
        raise ValueError("add_n needs at least one node")
    total = nodes[0]
    for node in nodes[1:]:
        total = add(total, node)
    return total


def sub(a: Node, b: Node) -> Node:
    _require(a.value.shape == b.value.shape, "sub", a.value.shape, b.value.shape)
    out = Node(a.value - b.value, (a, b), op="sub")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    out._backward = bw
    return out


def _broadcast_col_ok(col_shape, shape):
    return len(col_shape) == 2 and len(shape) == 2 and col_shape[1] == 1 \
        and col_shape[0] == shape[0]


def mul(a: Node, b: Node) -> Node:
    """Elementwise product; one side may be a broadcast column of shape (m, 1)."""
    if a.value.shape == b.value.shape:
        mode = "same"
    elif _broadcast_col_ok(a.value.shape, b.value.shape):
        mode = "col_a"
    elif _broadcast_col_ok(b.value.shape, a.value.shape):
        mode = "col_b"
    else:
        raise ShapeError(f"mul: incompatible shapes {a.value.shape} and {b.value.shape}")
    out = Node(a.value * b.value, (a, b), op="mul")

    def bw(g):
        ga = g * b.value
        gb = g * a.value
        _accumulate(a, ga.sum(axis=1, keepdims=True) if mode == "col_a" else ga)
        _accumulate(b, gb.sum(axis=1, keepdims=True) if mode == "col_b" else gb)

    out._backward = bw
    return out


def relu(x: Node) -> Node:
    out = Node(np.maximum(x.value, 0.0), (x,), op="relu")

    def bw(g):
        _accumulate(x, g * (x.value > 0.0))  # subgradient at 0 is 0

    out._backward = bw
    return out


def scale(x: Node, factor: float) -> Node:
    out = Node(x.value * factor, (x,), op="scale")

    def bw(g):
        _accumulate(x, g * factor)

    out._backward = bw
    return out


def transpose(x: Node) -> Node:
    _require(x.value.ndim == 2, "transpose", x.value.shape)
    out = Node(x.value.T, (x,), op="transpose")

    def bw(g):
        _accumulate(x, g.T)

    out._backward = bw
    return out


def concat_cols(nodes) -> Node:
    """Concatenate 2-d nodes along the feature (last) axis."""
    nodes = list(nodes)
    rows = nodes[0].value.shape[0]
    for node in nodes:
        _require(node.value.ndim == 2 and node.value.shape[0] == rows,
                 "concat_cols", node.value.shape, (rows, "*"))
    out = Node(np.concatenate([n.value for n in nodes], axis=1), tuple(nodes),
               op="concat_cols")
    widths = [n.value.shape[1] for n in nodes]

    def bw(g):
        offset = 0
        for node, width in zip(nodes, widths):
            _accumulate(node, g[:, offset:offset + width])
            offset += width

    out._backward = bw
    return out


def slice_rows(x: Node, start: int, stop: int) -> Node:
    _require(x.value.ndim == 2 and 0 <= start < stop <= x.value.shape[0],
             "slice_rows", x.value.shape, (start, stop))
    out = Node(x.value[start:stop], (x,), op="slice_rows")

    def bw(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        _accumulate(x, full)

    out._backward = bw
    return out


def slice_cols(x: Node, start: int, stop: int) -> Node:
    _require(x.value.ndim == 2 and 0 <= start < stop <= x.value.shape[1],
             "slice_cols", x.value.shape, (start, stop))
    out = Node(x.value[:, start:stop], (x,), op="slice_cols")

    def bw(g):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        _accumulate(x, full)

    out._backward = bw
    return out


def row_sum(x: Node) -> Node:
    """Sum each row, keeping a (m, 1) column shape."""
    _require(x.value.ndim == 2, "row_sum", x.value.shape)
    out = Node(x.value.sum(axis=1, keepdims=True), (x,), op="row_sum")

    def bw(g):
        _accumulate(x, np.broadcast_to(g, x.value.shape))

    out._backward = bw
    return out


def sum_all(x: Node) -> Node:
    out = Node(x.value.sum(), (x,), op="sum_all")

    def bw(g):
        _accumulate(x, np.full_like(x.value, float(g)))

    out._backward = bw
    return out


def embedding_lookup(table: Node, indices) -> Node:
    """Gather rows of a (rows, d) table; repeated indices accumulate grads."""
    indices = np.asarray(indices, dtype=np.int64)
    _require(table.value.ndim == 2 and indices.ndim == 1,
             "embedding_lookup", table.value.shape, indices.shape)
    if indices.size and (indices.min() < 0 or indices.max() >= table.value.shape[0]):
        raise ShapeError(
            f"embedding_lookup: index out of range for table {table.value.shape}"
        )
    out = Node(table.value[indices], (table,), op="embedding_lookup")

    def bw(g):
        full = np.zeros_like(table.value)
        np.add.at(full, indices, g)
        _accumulate(table, full)

    out._backward = bw
    return out


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """``x @ weight`` with an optional broadcast-row bias."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def softmax_rows(x: Node, mask=None) -> Node:
    """Row-wise softmax with an optional additive mask.

    Mask entries are 0 (keep) or :data:`MASK_OFF` (drop); the mask must match
    the input shape. Rows whose entries are all dropped are defined to come
    out as all zeros rather than NaN.
    """
    _require(x.value.ndim == 2, "softmax_rows", x.value.shape)
    z = x.value
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        _require(mask.shape == x.value.shape, "softmax_rows(mask)",
                 x.value.shape, mask.shape)
        z = z + mask
    zmax = z.max(axis=1, keepdims=True)
    exp = np.exp(z - zmax)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    if mask is not None:
        dead = (mask <= MASK_OFF / 2).all(axis=1)
        if dead.any():
            probs = probs.copy()
            probs[dead] = 0.0
    out = Node(probs, (x,), op="softmax_rows")

    def bw(g):
        inner = (g * probs).sum(axis=1, keepdims=True)
        _accumulate(x, probs * (g - inner))

    out._backward = bw
    return out


def softmax_nll(scores: Node, targets) -> Node:
    """Summed negative log-likelihood of target columns under row softmax.

    Computed through log-sum-exp, so confidently wrong rows stay finite.
    """
    targets = np.asarray(targets, dtype=np.int64)
    _require(scores.value.ndim == 2 and targets.ndim == 1
             and targets.shape[0] == scores.value.shape[0],
             "softmax_nll", scores.value.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= scores.value.shape[1]):
        raise ShapeError(
            f"softmax_nll: target id out of range for {scores.value.shape[1]} classes"
        )
    z = scores.value
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    rows = np.arange(len(targets))
    losses = lse.ravel() - z[rows, targets]
    out = Node(losses.sum(), (scores,), op="softmax_nll")

    def bw(g):
        probs = np.exp(z - lse)
        probs[rows, targets] -= 1.0
        _accumulate(scores, float(g) * probs)

    out._backward = bw
    return out


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

class Adam:
    """Adam with bias correction over a name -> Node parameter mapping."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        zero_grads(self.params.values())

    def state_arrays(self):
        """Flat view of the moment estimates, for checkpointing."""
        return self.m, self.v
