"""Minimal reverse-mode differentiation over a fixed operation vocabulary.

The graph is define-by-run: every forward pass builds fresh ``Node`` objects
and ``backward`` walks them once in reverse topological order. Trainable
tensors live in a ``ParameterStore`` that both Siamese branches of a pair
read, so weight sharing is a property of construction rather than a copy
discipline.

Gradient arrays are never mutated in place after assignment; accumulation
always allocates. The store's own gradient buffer is the only in-place sink.
"""

from __future__ import annotations

import json
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .numeric import tensor_from_json, tensor_to_json

CHECKPOINT_FORMAT_VERSION = 1


class Node:
    """One value in the computation graph.

    ``name`` is set only on parameter leaves and routes the accumulated
    gradient back into the owning store.
    """

    __slots__ = ("value", "parents", "_backward", "grad", "name", "op")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        name: Optional[str] = None,
        op: Optional[str] = None,
    ):
        self.value = value
        self.parents = parents
        self._backward = backward
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = op


def accumulate(node: Node, g: np.ndarray) -> None:
    """Add a gradient contribution to a node (allocating, never in place)."""
    node.grad = g if node.grad is None else node.grad + g


class ParameterStore:
    """Named trainable tensors plus their gradients, in one flat buffer.

    The flat layout lets the optimizer update every parameter with a handful
    of vectorized calls. Per-name views alias the buffer, so nodes handed out
    by :meth:`node` always see current values.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        if not params:
            raise ConfigError("parameter store cannot be empty")
        self._names = list(params.keys())
        total = sum(int(np.prod(a.shape)) if a.shape else 1 for a in params.values())
        self.flat_values = np.empty(total, dtype=np.float64)
        self.flat_grads = np.zeros(total, dtype=np.float64)
        self._views: dict[str, np.ndarray] = {}
        self._grad_views: dict[str, np.ndarray] = {}
        self.grads_ready = False  # set by backward(), consumed by the optimizer
        offset = 0
        for name, arr in params.items():
            arr = np.asarray(arr, dtype=np.float64)
            size = arr.size
            self.flat_values[offset : offset + size] = arr.ravel(order="C")
            self._views[name] = self.flat_values[offset : offset + size].reshape(
                arr.shape
            )
            self._grad_views[name] = self.flat_grads[offset : offset + size].reshape(
                arr.shape
            )
            offset += size

    def names(self) -> list[str]:
        return list(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._views

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        view = self._views[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != view.shape:
            raise ShapeError(
                f"parameter {name} has shape {view.shape}, got {value.shape}"
            )
        view[...] = value

    def grad(self, name: str) -> np.ndarray:
        return self._grad_views[name]

    def node(self, name: str) -> Node:
        """Fresh parameter leaf; repeated calls share the underlying values."""
        return Node(self._views[name], name=name)

    def zero_grads(self) -> None:
        self.flat_grads[:] = 0.0

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        self._grad_views[name] += g

    def save(self, path) -> None:
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "params": {name: tensor_to_json(self._views[name]) for name in self._names},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path) as fh:
            payload = json.load(fh)
        version = payload.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format version {version!r}")
        params = {
            name: tensor_from_json(obj) for name, obj in payload["params"].items()
        }
        return cls(params)


def topo_order(root: Node) -> list[Node]:
    """Ancestors of root, parents before children, each exactly once."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node, store: ParameterStore) -> None:
    """Populate store gradients with d(loss)/d(parameter).

    Accumulators are zeroed at the start of every call, so repeated calls on
    the same graph are idempotent.
    """
    if np.ndim(loss.value) != 0:
        raise ShapeError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    store.zero_grads()
    order = topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    for node in order:
        if node.name is not None and node.grad is not None:
            store.accumulate_grad(node.name, node.grad)
    store.grads_ready = True


# ---------------------------------------------------------------------------
# Operation vocabulary
# ---------------------------------------------------------------------------


def constant(value) -> Node:
    """Leaf with no gradient flow."""
    return Node(np.asarray(value, dtype=np.float64))


def _require_same_shape(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(
            f"{op} needs equal shapes, got {a.value.shape} and {b.value.shape}"
        )


def add(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "add")
    out = Node(a.value + b.value, (a, b))

    def _bk(g):
        accumulate(a, g)
        accumulate(b, g)

    out._backward = _bk
    return out


def sub(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "sub")
    out = Node(a.value - b.value, (a, b))

    def _bk(g):
        accumulate(a, g)
        accumulate(b, -g)

    out._backward = _bk
    return out


def scale(x: Node, k: float) -> Node:
    out = Node(x.value * k, (x,))
    out._backward = lambda g: accumulate(x, g * k)
    return out


def add_scalar(x: Node, k: float) -> Node:
    out = Node(x.value + k, (x,))
    out._backward = lambda g: accumulate(x, g)
    return out


def square(x: Node) -> Node:
    out = Node(x.value * x.value, (x,))
    out._backward = lambda g: accumulate(x, 2.0 * x.value * g)
    return out


def elementwise_mul(a: Node, b: Node) -> Node:
    """a * b; b may be a per-feature vector broadcast over the rows of a."""
    broadcast = (
        a.value.ndim == 2 and b.value.ndim == 1 and b.value.shape[0] == a.value.shape[1]
    )
    if not broadcast:
        _require_same_shape(a, b, "elementwise_mul")
    out = Node(a.value * b.value, (a, b))

    def _bk(g):
        accumulate(a, g * b.value)
        gb = g * a.value
        accumulate(b, gb.sum(axis=0) if broadcast else gb)

    out._backward = _bk
    return out


def relu(x: Node) -> Node:
    out = Node(np.maximum(x.value, 0.0), (x,), op="relu")
    out._backward = lambda g: accumulate(x, g * (x.value > 0.0))
    return out


def sigmoid(x: Node) -> Node:
    # tanh form is overflow-free and hits 0.5 exactly at 0
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    out = Node(s, (x,))
    out._backward = lambda g: accumulate(x, g * s * (1.0 - s))
    return out


def softplus(x: Node) -> Node:
    out = Node(np.logaddexp(0.0, x.value), (x,))

    def _bk(g):
        accumulate(x, g * 0.5 * (1.0 + np.tanh(0.5 * x.value)))

    out._backward = _bk
    return out


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"cannot multiply shapes {a.value.shape} and {b.value.shape}"
        )
    out = Node(a.value @ b.value, (a, b))

    def _bk(g):
        accumulate(a, g @ b.value.T)
        accumulate(b, a.value.T @ g)

    out._backward = _bk
    return out


def linear(x: Node, w: Node, b: Node) -> Node:
    """Affine map x @ w + b with the bias broadcast over the batch."""
    if (
        x.value.ndim != 2
        or w.value.ndim != 2
        or x.value.shape[1] != w.value.shape[0]
        or b.value.shape != (w.value.shape[1],)
    ):
        raise ShapeError(
            f"linear got x {x.value.shape}, w {w.value.shape}, b {b.value.shape}"
        )
    out = Node(x.value @ w.value + b.value, (x, w, b))

    def _bk(g):
        accumulate(x, g @ w.value.T)
        accumulate(w, x.value.T @ g)
        accumulate(b, g.sum(axis=0))

    out._backward = _bk
    return out


def reshape(x: Node, shape: tuple[int, ...]) -> Node:
    out = Node(x.value.reshape(shape), (x,))
    out._backward = lambda g: accumulate(x, g.reshape(x.value.shape))
    return out


def concat_cols(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[0] != b.value.shape[0]:
        raise ShapeError(
            f"concat_cols needs matching rows, got {a.value.shape} and {b.value.shape}"
        )
    na = a.value.shape[1]
    out = Node(np.concatenate([a.value, b.value], axis=1), (a, b))

    def _bk(g):
        accumulate(a, g[:, :na])
        accumulate(b, g[:, na:])

    out._backward = _bk
    return out


def slice_rows(x: Node, start: int, stop: int) -> Node:
    out = Node(x.value[start:stop], (x,))

    def _bk(g):
        gx = np.zeros_like(x.value)
        gx[start:stop] = g
        accumulate(x, gx)

    out._backward = _bk
    return out


def sum_all(x: Node) -> Node:
    out = Node(np.asarray(x.value.sum()), (x,))
    out._backward = lambda g: accumulate(x, np.broadcast_to(g, x.value.shape).copy())
    return out


def mean_all(x: Node) -> Node:
    size = x.value.size
    out = Node(np.asarray(x.value.mean()), (x,))
    out._backward = lambda g: accumulate(
        x, np.broadcast_to(g / size, x.value.shape).copy()
    )
    return out


def rowwise_dot(a: Node, b: Node) -> Node:
    """Per-row inner product of two [batch, d] matrices -> [batch]."""
    _require_same_shape(a, b, "rowwise_dot")
    out = Node((a.value * b.value).sum(axis=1), (a, b))

    def _bk(g):
        accumulate(a, g[:, None] * b.value)
        accumulate(b, g[:, None] * a.value)

    out._backward = _bk
    return out


def frobenius_distance(a: Node, b: Node) -> Node:
    """sqrt(sum((a - b)**2)) over all entries -> scalar.

    The gradient at a == b is defined as 0 (subgradient at the kink).
    """
    _require_same_shape(a, b, "frobenius_distance")
    diff = a.value - b.value
    dist = float(np.sqrt((diff * diff).sum()))
    out = Node(np.asarray(dist), (a, b), op="frobenius")

    def _bk(g):
        if dist == 0.0:
            ga = np.zeros_like(a.value)
        else:
            ga = (g / dist) * diff
        accumulate(a, ga)
        accumulate(b, -ga)

    out._backward = _bk
    return out


def rowwise_frobenius(a: Node, b: Node) -> Node:
    """Per-row Frobenius distance of two [batch, d] matrices -> [batch]."""
    _require_same_shape(a, b, "rowwise_frobenius")
    diff = a.value - b.value
    dist = np.sqrt((diff * diff).sum(axis=1))
    out = Node(dist, (a, b), op="frobenius")

    def _bk(g):
        safe = np.where(dist == 0.0, 1.0, dist)
        coeff = np.where(dist == 0.0, 0.0, g / safe)
        ga = coeff[:, None] * diff
        accumulate(a, ga)
        accumulate(b, -ga)

    out._backward = _bk
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b, oh * ow, c * kh * kw
    )
    return cols, oh, ow


def conv2d(x: Node, k: Node, stride: int = 2) -> Node:
    """Valid (no padding) cross-correlation, NCHW layout."""
    if x.value.ndim != 4 or k.value.ndim != 4:
        raise ShapeError(
            f"conv2d needs 4-d input and kernel, got {x.value.shape} and {k.value.shape}"
        )
    b, cin, h, w = x.value.shape
    cout, kcin, kh, kw = k.value.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} channels, input has {cin}")
    if kh > h or kw > w:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than input {h}x{w}"
        )
    cols, oh, ow = _im2col(x.value, kh, kw, stride)
    kmat = k.value.reshape(cout, cin * kh * kw)
    val = (cols @ kmat.T).transpose(0, 2, 1).reshape(b, cout, oh, ow)
    out = Node(val, (x, k))

    def _bk(g):
        g2 = g.reshape(b, cout, oh * ow)
        dk = np.einsum("bop,bpk->ok", g2, cols).reshape(k.value.shape)
        accumulate(k, dk)
        dx = np.zeros_like(x.value)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, k.value[:, :, i, j], axes=([1], [0]))
                dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        accumulate(x, dx)

    out._backward = _bk
    return out


def avg_pool(x: Node) -> Node:
    """Global spatial mean per channel: [b, c, h, w] -> [b, c]."""
    if x.value.ndim != 4:
        raise ShapeError(f"avg_pool needs 4-d input, got {x.value.shape}")
    _, _, h, w = x.value.shape
    out = Node(x.value.mean(axis=(2, 3)), (x,))

    def _bk(g):
        accumulate(
            x,
            np.broadcast_to((g / (h * w))[:, :, None, None], x.value.shape).copy(),
        )

    out._backward = _bk
    return out
