"""Minimal reverse-mode differentiation over NHWC numpy arrays.

Every op appends its output node to the active ``Tape``; ``Tape.backward``
walks the nodes in reverse creation order, which is a valid topological
order because nodes can only depend on earlier ones. Without a tape, ops
just compute values.
"""

from __future__ import annotations

import numpy as np


class Node:
    __slots__ = ("value", "grad", "backward_fn")

    def __init__(self, value, grad=None):
        self.value = value
        self.grad = grad
        self.backward_fn = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else g
        else:
            self.grad += g


class Tape:
    def __init__(self):
        self.nodes = []

    def record(self, node, fn):
        node.backward_fn = fn
        self.nodes.append(node)
        return node

    def backward(self, out: Node, dout):
        out.accumulate(dout)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)
        self.nodes = []


def _out(tape, value, fn):
    node = Node(value)
    if tape is not None:
        tape.record(node, fn)
    return node


# ------------------------------------------------------------------ ops

def _im2col3(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([xp[:, i : i + h, j : j + w, :] for i in range(3) for j in range(3)], axis=-1)


def conv3x3(tape, x: Node, w: Node, b: Node):
    """Same-padded 3x3 convolution; w has shape (3, 3, Cin, Cout)."""
    n, h, wd, c = x.value.shape
    cout = w.value.shape[-1]
    cols = _im2col3(x.value)
    wm = w.value.reshape(9 * c, cout)
    y = (cols.reshape(-1, 9 * c) @ wm).reshape(n, h, wd, cout) + b.value

    def back(g):
        g2 = g.reshape(-1, cout)
        w.accumulate((cols.reshape(-1, 9 * c).T @ g2).reshape(w.value.shape))
        b.accumulate(g2.sum(axis=0))
        dcols = (g2 @ wm.T).reshape(n, h, wd, 9, c)
        dxp = np.zeros((n, h + 2, wd + 2, c), dtype=g.dtype)
        k = 0
        for i in range(3):
            for j in range(3):
                dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, k, :]
                k += 1
        x.accumulate(dxp[:, 1:-1, 1:-1, :])

    return _out(tape, y, back)


def conv1x1(tape, x: Node, w: Node, b: Node):
    n, h, wd, c = x.value.shape
    cout = w.value.shape[-1]
    y = (x.value.reshape(-1, c) @ w.value).reshape(n, h, wd, cout) + b.value

    def back(g):
        g2 = g.reshape(-1, cout)
        w.accumulate(x.value.reshape(-1, c).T @ g2)
        b.accumulate(g2.sum(axis=0))
        x.accumulate((g2 @ w.value.T).reshape(x.value.shape))

    return _out(tape, y, back)


def dense(tape, x: Node, w: Node, b: Node):
    y = x.value @ w.value + b.value

    def back(g):
        w.accumulate(x.value.T @ g)
        b.accumulate(g.sum(axis=0))
        x.accumulate(g @ w.value.T)

    return _out(tape, y, back)


def group_norm(tape, x: Node, gamma: Node, beta: Node, groups, eps=1e-5):
    n, h, w, c = x.value.shape
    xg = x.value.reshape(n, h, w, groups, c // groups)
    mean = xg.mean(axis=(1, 2, 4), keepdims=True)
    var = xg.var(axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(n, h, w, c)
    y = xhat * gamma.value + beta.value

    def back(g):
        gamma.accumulate((g * xhat).sum(axis=(0, 1, 2)))
        beta.accumulate(g.sum(axis=(0, 1, 2)))
        dxh = (g * gamma.value).reshape(n, h, w, groups, c // groups)
        xh = xhat.reshape(n, h, w, groups, c // groups)
        m1 = dxh.mean(axis=(1, 2, 4), keepdims=True)
        m2 = (dxh * xh).mean(axis=(1, 2, 4), keepdims=True)
        x.accumulate(((dxh - m1 - xh * m2) * inv).reshape(n, h, w, c))

    return _out(tape, y, back)


def silu(tape, x: Node):
    s = 1.0 / (1.0 + np.exp(-x.value))
    y = x.value * s

    def back(g):
        x.accumulate(g * (s * (1.0 + x.value * (1.0 - s))))

    return _out(tape, y, back)


def add(tape, a: Node, b: Node):
    def back(g):
        a.accumulate(g)
        b.accumulate(g)

    return _out(tape, a.value + b.value, back)


def add_channel_bias(tape, x: Node, e: Node):
    """x (N, H, W, C) + e (N, C) broadcast over space."""

    def back(g):
        x.accumulate(g)
        e.accumulate(g.sum(axis=(1, 2)))

    return _out(tape, x.value + e.value[:, None, None, :], back)


def avg_pool2(tape, x: Node):
    v = x.value
    y = 0.25 * (v[:, 0::2, 0::2] + v[:, 1::2, 0::2] + v[:, 0::2, 1::2] + v[:, 1::2, 1::2])

    def back(g):
        d = np.repeat(np.repeat(g * 0.25, 2, axis=1), 2, axis=2)
        x.accumulate(d)

    return _out(tape, y, back)


def upsample2(tape, x: Node):
    y = np.repeat(np.repeat(x.value, 2, axis=1), 2, axis=2)

    def back(g):
        x.accumulate(g[:, 0::2, 0::2] + g[:, 1::2, 0::2] + g[:, 0::2, 1::2] + g[:, 1::2, 1::2])

    return _out(tape, y, back)


def concat(tape, a: Node, b: Node):
    ca = a.value.shape[-1]

    def back(g):
        a.accumulate(g[..., :ca])
        b.accumulate(g[..., ca:])

    return _out(tape, np.concatenate([a.value, b.value], axis=-1), back)
