"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every value in the compute graph is a Tensor. Leaves created with
``requires_grad=True`` act as trainable parameters: repeated backward passes
accumulate into ``.grad``, which is how per-sample gradients sum over a batch.
All arithmetic is float64 end to end.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[Array], tuple] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def backward(root: Tensor, seed: float = 1.0) -> None:
    """Accumulate d(root)/d(leaf) into .grad of every reachable grad-requiring leaf."""
    if root.data.ndim != 0:
        raise ValueError("backward() expects a scalar root")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, Array] = {id(root): np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: accumulate so per-sample backward calls sum over a batch
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            held = grads.get(id(p))
            grads[id(p)] = pg if held is None else held + pg


def _reduce_to(g: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape == () else np.sum(g, axis=0).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def back(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return Tensor(out, parents=(a, b), backward=back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def back(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return Tensor(out, parents=(a, b), backward=back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def back(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return Tensor(out, parents=(a, b), backward=back)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, parents=(a,), backward=lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return Tensor(np.where(mask, a.data, 0.0), parents=(a,), backward=lambda g: (g * mask,))


def _sigmoid(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    flat = np.atleast_1d(x)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(x.shape)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) via logaddexp keeps the large-|x| tails exact
    out = np.logaddexp(0.0, a.data)
    return Tensor(out, parents=(a,), backward=lambda g: (g * _sigmoid(a.data),))


def tsum(a: Tensor) -> Tensor:
    return Tensor(np.sum(a.data), parents=(a,), backward=lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def pick(a: Tensor, index: int) -> Tensor:
    out = a.data[index]

    def back(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return Tensor(out, parents=(a,), backward=back)


def logsumexp(a: Tensor) -> Tensor:
    m = np.max(a.data)
    out = np.log(np.sum(np.exp(a.data - m))) + m

    def back(g):
        return (g * np.exp(a.data - out),)

    return Tensor(out, parents=(a,), backward=back)


def linear(w: Tensor, x: Tensor, b: Tensor) -> Tensor:
    """w @ x + b for w (m, n), x (n,), b (m,)."""
    out = w.data @ x.data + b.data

    def back(g):
        return np.outer(g, x.data), w.data.T @ g, g.copy()

    return Tensor(out, parents=(w, x, b), backward=back)


def global_avg_pool(a: Tensor) -> Tensor:
    """(C, D, H, W) -> (C,) spatial mean."""
    c = a.data.shape[0]
    n = a.data.size // c
    out = a.data.reshape(c, n).mean(axis=1)

    def back(g):
        return (np.broadcast_to(g[:, None, None, None] / n, a.data.shape).copy(),)

    return Tensor(out, parents=(a,), backward=back)


def add_channel_bias(a: Tensor, v: Tensor) -> Tensor:
    """(C, D, H, W) + (C,) broadcast over space."""
    out = a.data + v.data[:, None, None, None]

    def back(g):
        return g, g.sum(axis=(1, 2, 3))

    return Tensor(out, parents=(a, v), backward=back)


_K = 3  # conv kernel edge
_S = 2  # conv stride
_P = 1  # conv zero padding


def _conv_out_dim(d: int) -> int:
    return (d + 2 * _P - _K) // _S + 1


def conv3d_down(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3-D convolution, kernel 3, stride 2, zero padding 1.

    x: (Cin, D, H, W); w: (Cout, Cin, 3, 3, 3); b: (Cout,).
    Output (Cout, ceil(D/2), ceil(H/2), ceil(W/2)).
    """
    cin, d, h, wd = x.data.shape
    cout = w.data.shape[0]
    do, ho, wo = _conv_out_dim(d), _conv_out_dim(h), _conv_out_dim(wd)
    xp = np.pad(x.data, ((0, 0), (_P, _P), (_P, _P), (_P, _P)))

    cols = np.empty((cin, _K * _K * _K, do, ho, wo), dtype=np.float64)
    i = 0
    for kd in range(_K):
        for kh in range(_K):
            for kw in range(_K):
                cols[:, i] = xp[:, kd : kd + _S * do : _S, kh : kh + _S * ho : _S, kw : kw + _S * wo : _S]
                i += 1
    cols2d = cols.reshape(cin * 27, do * ho * wo)
    wmat = w.data.reshape(cout, cin * 27)
    out = (wmat @ cols2d).reshape(cout, do, ho, wo) + b.data[:, None, None, None]

    def back(g):
        g2d = g.reshape(cout, do * ho * wo)
        gw = (g2d @ cols2d.T).reshape(w.data.shape)
        gb = g2d.sum(axis=1)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2d).reshape(cin, 27, do, ho, wo)
            gxp = np.zeros_like(xp)
            j = 0
            for kd in range(_K):
                for kh in range(_K):
                    for kw in range(_K):
                        gxp[:, kd : kd + _S * do : _S, kh : kh + _S * ho : _S, kw : kw + _S * wo : _S] += gcols[:, j]
                        j += 1
            gx = gxp[:, _P : _P + d, _P : _P + h, _P : _P + wd]
        return gx, gw, gb

    return Tensor(out, parents=(x, w, b), backward=back)
