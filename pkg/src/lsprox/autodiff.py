"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Graph` records every operation in execution order; ``backward``
walks the tape once in reverse. Image tensors are laid out ``(N, C, H, W)``.

The two matrix losses (nuclear and l1) accept a gradient mode:

* :class:`Subgradient` emits the minimal-norm subgradient (``U V^T`` and
  ``sign``).
* :class:`ProxResidual` emits ``Q - prox(Q)``, i.e. ``Q - svt(Q, tau)`` or
  ``Q - soft(Q, tau)``, in place of a gradient.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import prox_ops


class GraphError(RuntimeError):
    pass


@dataclass(frozen=True)
class Subgradient:
    pass


@dataclass(frozen=True)
class ProxResidual:
    tau: float

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau >= 0):
            raise ValueError(f"ProxResidual tau must be >= 0, got {self.tau}")


class Tensor:
    __slots__ = ("data", "requires_grad", "graph", "node", "name", "grad")

    def __init__(self, data, graph, node, requires_grad, name=None):
        self.data = data
        self.graph = graph
        self.node = node
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node}, requires_grad={self.requires_grad})"


class Graph:
    """Computation tape; single-threaded while recording or differentiating."""

    def __init__(self):
        self.tensors = []
        self._backward_fns = []
        self._inputs = []
        self._done = False

    def _push(self, data, inputs, backward_fn, requires_grad, name=None):
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite value produced at node {len(self.tensors)}")
        t = Tensor(data, self, len(self.tensors), requires_grad, name)
        self.tensors.append(t)
        self._backward_fns.append(backward_fn)
        self._inputs.append(inputs)
        return t

    def leaf(self, data, requires_grad=True, name=None):
        return self._push(np.array(data, dtype=np.float64), (), None, requires_grad, name)

    def constant(self, data, name=None):
        return self.leaf(data, requires_grad=False, name=name)

    def record(self, data, inputs, backward_fn):
        for t in inputs:
            if t.graph is not self:
                raise GraphError("inputs belong to a different graph")
        needs = any(t.requires_grad for t in inputs)
        return self._push(data, tuple(inputs), backward_fn if needs else None, needs)

    def release(self):
        """Drop the tape. Tensors point back at their graph, so a finished
        graph is otherwise freed only by the cycle collector."""
        self.tensors, self._backward_fns, self._inputs = [], [], []
        self._done = True

    def reset(self):
        for t in self.tensors:
            t.grad = None
        self._done = False

    def backward(self, loss):
        """Backpropagate from scalar `loss`; returns ``{leaf name: grad}``.

        Gradients are also left on ``tensor.grad`` for every tensor that
        requires them.
        """
        if loss.graph is not self:
            raise GraphError("loss belongs to a different graph")
        if loss.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._done:
            raise GraphError("backward already ran on this graph; call reset() first")
        if loss.node >= len(self.tensors) or self.tensors[loss.node] is not loss:
            raise GraphError("graph was released")
        self._done = True
        grads = [None] * len(self.tensors)
        grads[loss.node] = np.ones_like(loss.data)
        for i in range(loss.node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            t = self.tensors[i]
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at node {i}")
            if t.requires_grad:
                t.grad = g
            fn = self._backward_fns[i]
            if fn is None:
                continue
            for inp, gi in zip(self._inputs[i], fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if grads[inp.node] is None:
                    grads[inp.node] = np.array(gi, dtype=np.float64)
                else:
                    grads[inp.node] = grads[inp.node] + gi
        out = {}
        for t in self.tensors:
            if t.requires_grad and self._backward_fns[t.node] is None and not self._inputs[t.node]:
                key = t.name if t.name is not None else t.node
                out[key] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out


def _lift(a, like):
    """Wrap a raw array as a constant on `like`'s graph."""
    if isinstance(a, Tensor):
        return a
    return like.graph.constant(a)


# elementwise and structural ops

def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a.graph.record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if isinstance(a, Tensor):
        b = _lift(b, a)
    else:
        a = _lift(a, b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return a.graph.record(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a, c):
    c = float(c)
    return a.graph.record(c * a.data, (a,), lambda g: (c * g,))


def mul_const(a, c):
    """Elementwise product with a constant array."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ValueError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")
    return a.graph.record(c * a.data, (a,), lambda g: (c * g,))


def total(a):
    return a.graph.record(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def relu(x):
    mask = x.data > 0
    return x.graph.record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def concat_channels(a, b):
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(f"concat_channels: N,H,W mismatch {a.shape} vs {b.shape}")
    return a.graph.record(np.concatenate([a.data, b.data], axis=1), (a, b),
                          lambda g: (g[:, :ca], g[:, ca:]))


def frames_to_matrix(x):
    """(N, 1, H, W) -> (H*W, N); column j is frame j in row-major order."""
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W), got {x.shape}")
    n, _, h, w = x.shape
    return x.graph.record(x.data.reshape(n, h * w).T, (x,),
                          lambda g: (g.T.reshape(n, 1, h, w),))


# convolutional ops

def _correlate(xp, w):
    """Valid cross-correlation of padded `xp` (N,C,H',W') with `w` (O,C,k,k)."""
    k = w.shape[2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,H,W,k,k
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,O
    return out.transpose(0, 3, 1, 2), win


def conv2d(x, w, b):
    """Same-size cross-correlation, stride 1, zero padding ``k // 2``."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects (N, C, H, W), got {x.shape}")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 != 1:
        raise ValueError(f"conv2d needs an odd square kernel, got {w.shape}")
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weights expect {c_in}")
    if b.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({c_out},)")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    out, win = _correlate(xp, w.data)
    out = out + b.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3))
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
        w_flip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx, _ = _correlate(gp, w_flip)
        return gx, gw, gb

    return x.graph.record(out, (x, w, b), backward)


def max_pool2(x):
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 needs even H and W, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return x.graph.record(out, (x,), backward)


def up_conv2(x, w, b):
    """2x2 transposed convolution with stride 2; `w` is (C_in, C_out, 2, 2)."""
    n, c_in, h, wd = x.shape
    if w.shape[0] != c_in or w.shape[2:] != (2, 2):
        raise ValueError(f"up_conv2: weights {w.shape} incompatible with input {x.shape}")
    c_out = w.shape[1]
    if b.shape != (c_out,):
        raise ValueError(f"up_conv2: bias shape {b.shape} != ({c_out},)")
    out = np.einsum("ncij,coab->noiajb", x.data, w.data).reshape(n, c_out, 2 * h, 2 * wd)
    out = out + b.data[None, :, None, None]

    def backward(g):
        g6 = g.reshape(n, c_out, h, 2, wd, 2)
        gx = np.einsum("noiajb,coab->ncij", g6, w.data)
        gw = np.einsum("noiajb,ncij->coab", g6, x.data)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return x.graph.record(out, (x, w, b), backward)


class BatchNormState:
    """Running statistics of one batch-norm layer (not trainable)."""

    def __init__(self, channels, momentum=0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state, training, eps=1e-5):
    """Per-channel batch normalization.

    Training mode normalizes by the biased batch statistics and folds them
    into `state` with its momentum; eval mode uses `state` as is.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({c},)")
    bshape = (1, c, 1, 1)
    if training:
        if n * h * w < 2:
            raise ValueError("batch_norm in training mode needs >= 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.mean = (1 - mom) * state.mean + mom * mean
        state.var = (1 - mom) * state.var + mom * var
    else:
        mean, var = state.mean, state.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    count = n * h * w

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3)).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return x.graph.record(out, (x, gamma, beta), backward)


# matrix losses

def nuclear_loss(X, mode=Subgradient()):
    """Scalar ``||X||_*`` of a 2-D tensor."""
    if X.data.ndim != 2:
        raise ValueError(f"nuclear_loss expects a matrix, got shape {X.shape}")
    U, K, V = prox_ops.svd(X.data)
    value = float(K.sum())
    Q = X.data

    if isinstance(mode, ProxResidual):
        def emit():
            return Q - prox_ops.svt(Q, mode.tau)
    elif isinstance(mode, Subgradient):
        def emit():
            if K[0] == 0:
                return np.zeros_like(Q)
            keep = K > prox_ops.RANK_EPS * K[0]
            return U[:, keep] @ V[:, keep].T
    else:
        raise TypeError(f"unknown gradient mode {mode!r}")

    return X.graph.record(np.array(value), (X,), lambda g: (float(g) * emit(),))


def l1_loss(X, mode=Subgradient()):
    """Scalar ``||X||_1`` of a 2-D tensor."""
    if X.data.ndim != 2:
        raise ValueError(f"l1_loss expects a matrix, got shape {X.shape}")
    Q = X.data

    if isinstance(mode, ProxResidual):
        def emit():
            return Q - prox_ops.soft_matrix(Q, mode.tau)
    elif isinstance(mode, Subgradient):
        def emit():
            return np.sign(Q)
    else:
        raise TypeError(f"unknown gradient mode {mode!r}")

    return X.graph.record(np.array(np.abs(Q).sum()), (X,), lambda g: (float(g) * emit(),))


def grad_check(fn, inputs, epsilon=1e-5, max_coords=64, seed=0, floor=1e-6):
    """Compare analytic and central-difference gradients.

    `fn(graph, leaves)` builds a scalar loss from leaf tensors created for
    each array in `inputs`. At most `max_coords` coordinates per input are
    probed (chosen with `seed`). Returns the worst relative error
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]

    def evaluate(arrays):
        g = Graph()
        leaves = [g.leaf(a, name=i) for i, a in enumerate(arrays)]
        return g, fn(g, leaves)

    g, loss = evaluate(inputs)
    analytic = g.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, a in enumerate(inputs):
        size = a.size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        for flat in coords:
            idx = np.unravel_index(flat, a.shape)
            probe = [x.copy() for x in inputs]
            probe[i][idx] = a[idx] + epsilon
            fp = float(evaluate(probe)[1].data)
            probe[i][idx] = a[idx] - epsilon
            fm = float(evaluate(probe)[1].data)
            num = (fp - fm) / (2 * epsilon)
            ana = float(analytic[i][idx])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
