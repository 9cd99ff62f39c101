"""Reverse-mode automatic differentiation on a flat numpy tape.

A :class:`Tape` records every operation as a node holding the op kind, the
parent node ids, and the cached forward value; construction order is the
topological order, so the backward sweep is a single reversed pass.  Nodes
carry whole arrays (not scalars): the per-step graph of the sequence model
is a few dozen nodes whose cost is dominated by the underlying BLAS calls.

Only the operations the equalizer model needs are provided.  Each op
attaches a vector-Jacobian closure at build time; gradients accumulate on
the nodes and named leaves report them back through :meth:`Tape.backward`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

__all__ = ["Tape", "Node", "GraphNumericsError"]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class GraphNumericsError(RuntimeError):
    """A graph node produced a non-finite value; the message names it."""


class Node:
    __slots__ = ("op", "parents", "value", "grad", "needs_grad", "nid", "name", "_vjp")

    def __init__(self, op, parents, value, needs_grad, nid, name=None, vjp=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad
        self.nid = nid
        self.name = name
        self._vjp = vjp

    def __repr__(self):
        shape = getattr(self.value, "shape", ())
        return f"Node({self.nid}:{self.op}{'/' + self.name if self.name else ''}, shape={shape})"


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


class Tape:
    """Computation graph: node list in construction (= topological) order."""

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    # -- node creation ------------------------------------------------------

    def _push(self, op, parents, value, vjp, name=None, needs_grad=None):
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise GraphNumericsError(
                f"non-finite value in node {len(self.nodes)} (op={op}"
                + (f", name={name}" if name else "")
                + ")"
            )
        node = Node(op, parents, value, needs_grad, len(self.nodes), name, vjp)
        self.nodes.append(node)
        return node

    def leaf(self, value: np.ndarray, name: str) -> Node:
        """Trainable leaf; its gradient is reported by :meth:`backward`."""
        return self._push("leaf", (), np.asarray(value, float), None, name, True)

    def constant(self, value: np.ndarray) -> Node:
        """Input data or fixed tables; no gradient flows into it."""
        return self._push("const", (), np.asarray(value, float), None, None, False)

    # -- arithmetic ---------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        out = a.value + b.value

        def vjp(g):
            return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

        return self._push("add", (a, b), out, vjp)

    def sub(self, a: Node, b: Node) -> Node:
        out = a.value - b.value

        def vjp(g):
            return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

        return self._push("sub", (a, b), out, vjp)

    def mul(self, a: Node, b: Node) -> Node:
        out = a.value * b.value

        def vjp(g):
            return (
                _unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape),
            )

        return self._push("mul", (a, b), out, vjp)

    def scale(self, a: Node, c: float) -> Node:
        out = a.value * c

        def vjp(g):
            return (g * c,)

        return self._push("scale", (a,), out, vjp)

    def square(self, a: Node) -> Node:
        out = a.value * a.value

        def vjp(g):
            return (2.0 * a.value * g,)

        return self._push("square", (a,), out, vjp)

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim < 2 or b.value.ndim < 2:
            raise ValueError("matmul operands must have ndim >= 2")
        out = a.value @ b.value

        def vjp(g):
            ga = _unbroadcast(g @ _swap_last(b.value), a.value.shape)
            gb = _unbroadcast(_swap_last(a.value) @ g, b.value.shape)
            return (ga, gb)

        return self._push("matmul", (a, b), out, vjp)

    # -- shape ---------------------------------------------------------------

    def reshape(self, a: Node, shape: tuple) -> Node:
        out = a.value.reshape(shape)

        def vjp(g):
            return (g.reshape(a.value.shape),)

        return self._push("reshape", (a,), out, vjp)

    def transpose(self, a: Node, axes: tuple) -> Node:
        out = np.ascontiguousarray(a.value.transpose(axes))
        inv = np.argsort(axes)

        def vjp(g):
            return (g.transpose(inv),)

        return self._push("transpose", (a,), out, vjp)

    def index_last(self, a: Node, idx: np.ndarray) -> Node:
        """Select columns of the last axis; indices must be unique."""
        idx = np.asarray(idx, dtype=int)
        assert len(np.unique(idx)) == idx.size
        out = a.value[..., idx]

        def vjp(g):
            z = np.zeros(a.value.shape)
            z[..., idx] = g
            return (z,)

        return self._push("index_last", (a,), out, vjp)

    def slice_last(self, a: Node, n: int) -> Node:
        out = a.value[..., :n]

        def vjp(g):
            z = np.zeros(a.value.shape)
            z[..., :n] = g
            return (z,)

        return self._push("slice_last", (a,), out, vjp)

    # -- nonlinearities -----------------------------------------------------

    def gelu(self, a: Node) -> Node:
        """Exact Gaussian error linear unit x * Phi(x)."""
        x = a.value
        phi = ndtr(x)
        out = x * phi

        def vjp(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            return (g * (phi + x * pdf),)

        return self._push("gelu", (a,), out, vjp)

    def layer_norm(self, a: Node, gain: Node, bias: Node, axis: int, eps: float = 1e-5) -> Node:
        """Normalize over ``axis`` (per token), then affine gain/bias.

        ``gain`` and ``bias`` must already be shaped to broadcast against
        ``a`` (callers reshape the 1-D parameters).
        """
        x = a.value
        mu = x.mean(axis=axis, keepdims=True)
        var = x.var(axis=axis, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv
        out = gain.value * xhat + bias.value

        def vjp(g):
            dgain = _unbroadcast(g * xhat, gain.value.shape)
            dbias = _unbroadcast(g, bias.value.shape)
            dxhat = g * gain.value
            m1 = dxhat.mean(axis=axis, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
            dx = (dxhat - m1 - xhat * m2) * inv
            return (dx, dgain, dbias)

        return self._push("layer_norm", (a, gain, bias), out, vjp)

    def softmax(self, a: Node, axis: int, mask_add: np.ndarray | None = None) -> Node:
        """Softmax over ``axis`` after adding an optional constant mask.

        Mask entries are 0 (allowed) or a large negative constant; after the
        max shift those logits underflow to exactly 0 probability, which
        keeps masked positions exactly out of the mixture.
        """
        p = a.value + mask_add if mask_add is not None else a.value.copy()
        np.subtract(p, p.max(axis=axis, keepdims=True), out=p)
        np.exp(p, out=p)
        np.divide(p, p.sum(axis=axis, keepdims=True), out=p)

        def vjp(g):
            inner = (g * p).sum(axis=axis, keepdims=True)
            return (p * (g - inner),)

        return self._push("softmax", (a,), p, vjp)

    def sum_all(self, a: Node) -> Node:
        out = np.asarray(a.value.sum())

        def vjp(g):
            return (np.full(a.value.shape, float(g)),)

        return self._push("sum_all", (a,), out, vjp)

    # -- backward ------------------------------------------------------------

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Accumulate gradients of the scalar ``root`` into every reachable
        node; returns ``{leaf name: gradient}`` for the named leaves."""
        if np.ndim(root.value) != 0:
            raise ValueError("backward needs a scalar root")
        for n in self.nodes:
            n.grad = None
        root.grad = np.asarray(1.0)
        for node in reversed(self.nodes):
            if node.grad is None or node._vjp is None:
                continue
            contribs = node._vjp(node.grad)
            for parent, g in zip(node.parents, contribs):
                if not parent.needs_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        out = {}
        for n in self.nodes:
            if n.name is not None and n.op == "leaf":
                out[n.name] = n.grad if n.grad is not None else np.zeros_like(n.value)
        return out
