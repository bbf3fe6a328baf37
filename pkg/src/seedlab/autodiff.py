"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what a conditional MLP velocity
field needs (matmul, add, multiply, relu / tanh-gelu, layer normalization,
embedding lookup, concatenate, sum/mean reduction, squared error). Graphs
are tapes: nodes are appended in creation order, which is a topological
order by construction, and ``backward`` walks the tape once in reverse.

Everything is float64. 32-bit floats appear only in checkpoint payloads and
in the quantization simulator, so finite-difference gradient checks stay
tight.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class Tensor:
    """Immutable dense array: a shape plus a row-major float64 payload."""

    __slots__ = ("_a",)

    def __init__(self, array):
        a = np.asarray(array, dtype=np.float64, order="C")
        if a is array and a.flags.writeable:
            a = a.copy()  # never freeze a buffer the caller still owns
        a.flags.writeable = False
        self._a = a

    @property
    def shape(self) -> tuple:
        return self._a.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the payload."""
        return self._a.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view."""
        return self._a

    @property
    def size(self) -> int:
        return self._a.size

    def __array__(self, dtype=None, copy=None):
        a = self._a
        if dtype is not None and a.dtype != dtype:
            return a.astype(dtype)
        return a.copy() if copy else a

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape})"


def _check_finite(a: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{op} produced non-finite entries")


class Node:
    """One tape entry: operation id, input nodes, output tensor, local vjp."""

    __slots__ = ("nid", "op", "inputs", "tensor", "_vjp")

    def __init__(self, nid, op, inputs, tensor, vjp):
        self.nid = nid
        self.op = op
        self.inputs = inputs
        self.tensor = tensor
        self._vjp = vjp

    @property
    def value(self) -> np.ndarray:
        return self.tensor.array

    @property
    def shape(self) -> tuple:
        return self.tensor.shape


class Graph:
    """A build-once, consume-once tape of tensor operations.

    Nodes are recorded in creation order; every input precedes its consumer,
    so the list itself is the topological order ``backward`` relies on.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_nodes: dict[str, Node] = {}

    def _emit(self, op: str, inputs: Sequence[Node], value,
              vjp: Callable | None) -> Node:
        tensor = value if isinstance(value, Tensor) else Tensor(value)
        _check_finite(tensor.array, op)
        node = Node(len(self.nodes), op, list(inputs), tensor, vjp)
        self.nodes.append(node)
        return node

    # -- leaves ---------------------------------------------------------

    def leaf(self, value) -> Node:
        """A differentiable input (parameter). Gradients accumulate here."""
        return self._emit("leaf", [], value, None)

    def constant(self, value) -> Node:
        """A non-parameter input; gradients flow through but are discarded."""
        return self._emit("const", [], value, None)

    def param(self, name: str, value) -> Node:
        """A named parameter leaf, created once per graph and then reused.

        Reuse guarantees a parameter consumed in several places accumulates
        one combined gradient, retrievable by name via ``param_nodes``.
        """
        node = self.param_nodes.get(name)
        if node is None:
            node = self.leaf(value)
            self.param_nodes[name] = node
        return node

    # -- arithmetic -----------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2:
            raise ShapeError(f"matmul needs 2-D operands, got {av.shape} @ {bv.shape}")
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul inner dimensions disagree: {av.shape} @ {bv.shape}")

        def vjp(g):
            return g @ bv.T, av.T @ g

        return self._emit("matmul", [a, b], av @ bv, vjp)

    def add(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.shape == bv.shape:
            vjp = lambda g: (g, g)
        elif av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
            # row-broadcast bias
            vjp = lambda g: (g, g.sum(axis=0))
        elif bv.ndim == 0:
            vjp = lambda g: (g, g.sum())
        else:
            raise ShapeError(f"add cannot combine shapes {av.shape} and {bv.shape}")
        return self._emit("add", [a, b], av + bv, vjp)

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.shape == bv.shape:
            vjp = lambda g: (g * bv, g * av)
        elif bv.ndim == 0:
            vjp = lambda g: (g * bv, (g * av).sum())
        elif av.ndim == 2 and bv.shape == (av.shape[0], 1):
            # column-broadcast per-row weights
            vjp = lambda g: (g * bv, (g * av).sum(axis=1, keepdims=True))
        else:
            raise ShapeError(f"mul cannot combine shapes {av.shape} and {bv.shape}")
        return self._emit("mul", [a, b], av * bv, vjp)

    def relu(self, a: Node) -> Node:
        av = a.value
        mask = av > 0.0
        return self._emit("relu", [a], np.where(mask, av, 0.0), lambda g: (g * mask,))

    def gelu(self, a: Node) -> Node:
        """tanh-approximated gelu: 0.5 x (1 + tanh(c (x + a x^3)))."""
        x = a.value
        x2 = x * x
        th = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
        out = 0.5 * x * (1.0 + th)

        def vjp(g):
            sech2 = 1.0 - th * th
            d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
            return (g * d,)

        return self._emit("gelu", [a], out, vjp)

    def layer_norm(self, x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
        """Normalize the last axis to zero mean / unit variance, then affine."""
        xv, gv, bv = x.value, gain.value, bias.value
        if xv.ndim != 2 or gv.shape != (xv.shape[1],) or bv.shape != (xv.shape[1],):
            raise ShapeError(f"layer_norm shapes: x {xv.shape}, gain {gv.shape}, bias {bv.shape}")
        n = xv.shape[1]
        mu = xv.mean(axis=1, keepdims=True)
        var = ((xv - mu) ** 2).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv
        out = xhat * gv + bv

        def vjp(g):
            gx_hat = g * gv
            m1 = gx_hat.mean(axis=1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=1, keepdims=True)
            gx = inv * (gx_hat - m1 - xhat * m2)
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

        del n
        return self._emit("layer_norm", [x, gain, bias], out, vjp)

    def embed(self, table: Node, idx: np.ndarray) -> Node:
        """Row gather: table (V, E) indexed by an int vector (B,)."""
        tv = table.value
        idx = np.asarray(idx, dtype=np.int64)
        if tv.ndim != 2 or idx.ndim != 1:
            raise ShapeError(f"embed needs a 2-D table and 1-D indices, got {tv.shape}, {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
            raise ContractError("embedding index out of range")

        def vjp(g):
            gt = np.zeros_like(tv)
            np.add.at(gt, idx, g)
            return (gt,)

        return self._emit("embed", [table], tv[idx], vjp)

    def concat(self, parts: Sequence[Node], axis: int = 1) -> Node:
        vals = [p.value for p in parts]
        sizes = [v.shape[axis] for v in vals]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                         for i in range(len(vals)))

        return self._emit("concat", list(parts), np.concatenate(vals, axis=axis), vjp)

    def reduce_sum(self, a: Node) -> Node:
        av = a.value
        return self._emit("sum", [a], np.asarray(av.sum()), lambda g: (np.full_like(av, float(g)),))

    def reduce_mean(self, a: Node) -> Node:
        av = a.value
        scale = 1.0 / av.size
        return self._emit("mean", [a], np.asarray(av.mean()),
                          lambda g: (np.full_like(av, float(g) * scale),))

    def sq_err(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.shape != bv.shape:
            raise ShapeError(f"sq_err needs equal shapes, got {av.shape} and {bv.shape}")
        d = av - bv
        return self._emit("sq_err", [a, b], d * d, lambda g: (2.0 * g * d, -2.0 * g * d))


def backward(graph: Graph, loss: Node) -> dict[int, np.ndarray]:
    """Reverse-accumulate gradients of a scalar loss over the whole tape.

    Returns a map node-id -> gradient for every node on a path to the loss.
    Leaves that never influenced the loss are simply absent; callers treat
    absence as a zero gradient (see :func:`grad_for`).
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.nid: np.ones_like(loss.value)}
    for node in reversed(graph.nodes):
        g = grads.get(node.nid)
        if g is None or node._vjp is None:
            continue
        for inp, gi in zip(node.inputs, node._vjp(g)):
            acc = grads.get(inp.nid)
            grads[inp.nid] = gi if acc is None else acc + gi
    return grads


def grad_for(grads: dict[int, np.ndarray], node: Node) -> np.ndarray:
    """Gradient of a node, zero-filled when the node did not reach the loss."""
    g = grads.get(node.nid)
    return np.zeros(node.shape) if g is None else g
