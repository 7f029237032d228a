"""Dense-array layers with hand-written backward passes.

Every forward function returns ``(output, cache)`` and its backward twin
takes ``(dout, cache)``. Leading batch axes are allowed everywhere: a
document is ``(L, E)``, a minibatch ``(B, L, E)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from notedx.errors import InputError, ShapeError

PAD_INDEX = 0


# -- embedding ---------------------------------------------------------------


def embedding_lookup(ids, table):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"token index out of range for a table of {table.shape[0]} rows")
    out = table[ids]
    pad = ids == PAD_INDEX
    if pad.any():
        out[pad] = 0.0
    return out, (ids, table.shape)


def embedding_backward(dout, cache):
    """Scatter-add row gradients; the padding row never receives any."""
    ids, shape = cache
    dtable = np.zeros(shape, dtype=dout.dtype)
    flat_ids = ids.reshape(-1)
    keep = flat_ids != PAD_INDEX
    np.add.at(dtable, flat_ids[keep], dout.reshape(-1, shape[1])[keep])
    return dtable


# -- convolution ---------------------------------------------------------------


@dataclass
class FilterBank:
    weights: np.ndarray  # (F, H, E)
    biases: np.ndarray  # (F,)

    def __post_init__(self):
        if self.weights.ndim != 3 or self.biases.shape != (self.weights.shape[0],):
            raise ShapeError(f"filter bank shapes {self.weights.shape} / {self.biases.shape} do not conform")
        if self.height < 1 or self.n_filters < 1:
            raise ShapeError("a filter bank needs H >= 1 and F >= 1")

    @property
    def n_filters(self):
        return self.weights.shape[0]

    @property
    def height(self):
        return self.weights.shape[1]

    @property
    def width(self):
        return self.weights.shape[2]


def same_padding(height):
    """Zero rows before and after the input so the output keeps length L."""
    return height // 2, (height - 1) // 2


def conv1d_same(x, weights, biases, activation="relu"):
    """Slide each ``H x E`` filter down the ``L x E`` input; returns ``(..., L, F)``."""
    n_filters, height, width = weights.shape
    if x.shape[-1] != width:
        raise ShapeError(f"input width {x.shape[-1]} does not match filter width {width}")
    if activation not in ("relu", "identity"):
        raise InputError(f"unknown activation {activation!r}")
    front, back = same_padding(height)
    pad = [(0, 0)] * (x.ndim - 2) + [(front, back), (0, 0)]
    xp = np.pad(x, pad)
    # (..., L, E, H) -> (..., L, H, E) -> (N, H*E); the 2-D copy keeps the
    # matmul on the BLAS path, which a strided window view would not
    win = np.lib.stride_tricks.sliding_window_view(xp, height, axis=-2)
    win = np.ascontiguousarray(np.swapaxes(win, -1, -2)).reshape(-1, height * width)
    pre = (win @ weights.reshape(n_filters, height * width).T + biases).reshape(*x.shape[:-1], n_filters)
    out = np.maximum(pre, 0.0) if activation == "relu" else pre
    return out, (win, pre, weights, activation, x.shape)


def conv1d_same_backward(dout, cache):
    win, pre, weights, activation, x_shape = cache
    n_filters, height, width = weights.shape
    length = x_shape[-2]
    dpre = dout * (pre > 0) if activation == "relu" else dout
    flat_dpre = dpre.reshape(-1, n_filters)
    dW = (flat_dpre.T @ win).reshape(weights.shape)
    db = flat_dpre.sum(axis=0)
    dwin = (flat_dpre @ weights.reshape(n_filters, height * width)).reshape(*x_shape[:-1], height, width)
    front, _ = same_padding(height)
    dxp = np.zeros((*x_shape[:-2], length + height - 1, width), dtype=dout.dtype)
    for h in range(height):
        dxp[..., h : h + length, :] += dwin[..., h, :]
    return dxp[..., front : front + length, :], dW, db


def conv_maxpool_backward(dpool, conv_cache, pool_cache, need_dx=True):
    """Backward through ``max_pool_time(conv1d_same(x))`` in one step.

    Only the argmax row of each filter receives gradient, so the weight
    gradient needs just those window rows instead of the whole sequence.
    """
    win, pre, weights, activation, x_shape = conv_cache
    idx, _ = pool_cache
    n_filters, height, width = weights.shape
    length = x_shape[-2]
    lead = int(np.prod(x_shape[:-2], dtype=np.int64))
    idx2 = idx.reshape(lead, n_filters)
    g = dpool.reshape(lead, n_filters)
    if activation == "relu":
        at_max = np.take_along_axis(pre.reshape(lead, length, n_filters), idx2[:, None, :], axis=1)[:, 0, :]
        g = g * (at_max > 0)
    rows = idx2 + (np.arange(lead) * length)[:, None]
    dW = np.einsum("bf,bfk->fk", g, win[rows]).reshape(weights.shape)
    db = g.sum(axis=0)
    if not need_dx:
        return None, dW, db
    dpre = np.zeros((lead * length, n_filters), dtype=g.dtype)
    np.put_along_axis(dpre.reshape(lead, length, n_filters), idx2[:, None, :], g[:, None, :], axis=1)
    dwin = (dpre @ weights.reshape(n_filters, height * width)).reshape(*x_shape[:-1], height, width)
    front, _ = same_padding(height)
    dxp = np.zeros((*x_shape[:-2], length + height - 1, width), dtype=g.dtype)
    for h in range(height):
        dxp[..., h : h + length, :] += dwin[..., h, :]
    return dxp[..., front : front + length, :], dW, db


def conv1d_valid_positions(length, doc_length, height):
    """Output rows whose window lies fully inside the first ``doc_length`` tokens.

    Returns (output rows, window start positions).
    """
    front, _ = same_padding(height)
    starts = np.arange(0, max(doc_length - height + 1, 0))
    return starts + front, starts


# -- pooling ------------------------------------------------------------------


def max_pool_time(x):
    """Column-wise maximum over the time axis; ties resolve to the first row."""
    if x.shape[-2] < 1:
        raise ShapeError("cannot pool an empty sequence")
    idx = np.argmax(x, axis=-2)
    out = np.take_along_axis(x, idx[..., None, :], axis=-2)[..., 0, :]
    return out, (idx, x.shape)


def max_pool_time_backward(dout, cache):
    idx, shape = cache
    dx = np.zeros(shape, dtype=dout.dtype)
    np.put_along_axis(dx, idx[..., None, :], dout[..., None, :], axis=-2)
    return dx


# -- dense / dropout -----------------------------------------------------------


def dense(x, weights, biases):
    if x.shape[-1] != weights.shape[1] or biases.shape != (weights.shape[0],):
        raise ShapeError(f"dense shapes x{x.shape} W{weights.shape} b{biases.shape} do not conform")
    return x @ weights.T + biases, (x, weights)


def dense_backward(dout, cache):
    x, weights = cache
    flat_x = x.reshape(-1, x.shape[-1])
    flat_d = dout.reshape(-1, dout.shape[-1])
    return dout @ weights, flat_d.T @ flat_x, flat_d.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def dropout(x, p_keep, train, rng=None):
    """Inverted dropout: survivors are scaled by ``1/p_keep`` at train time."""
    if not 0.0 < p_keep <= 1.0:
        raise InputError(f"keep probability must lie in (0, 1], got {p_keep}")
    if not train or p_keep == 1.0:
        return x, None
    mask = ((rng.random(x.shape) < p_keep) / p_keep).astype(x.dtype, copy=False)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# -- softmax / loss --------------------------------------------------------------


def softmax(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def one_hot(labels, n_classes, dtype=np.float64):
    labels = np.asarray(labels)
    out = np.zeros((*labels.shape, n_classes), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def _hot_index(y):
    y = np.asarray(y)
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise InputError("target is not one-hot")
    return np.argmax(y, axis=-1)


def cross_entropy(y, probs):
    """Mean of ``-log probs[hot]`` over any leading axes."""
    k = _hot_index(y)
    p = np.take_along_axis(probs, k[..., None], axis=-1)[..., 0]
    return float(np.mean(-np.log(p)))


def softmax_cross_entropy(logits, y):
    """Loss and gradient w.r.t. the logits, averaged over the batch."""
    k = _hot_index(y)
    logp = log_softmax(logits)
    loss = -np.take_along_axis(logp, k[..., None], axis=-1)[..., 0]
    n = loss.size
    grad = (np.exp(logp) - y) / n
    return float(loss.mean()), grad


# -- optimizers ----------------------------------------------------------------


class Adam:
    """Adam with bias correction over a dict of named arrays, updated in place."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
        return params


class SGD:
    def __init__(self, lr=0.01):
        self.lr = lr
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
            params[name] -= self.lr * g
        return params


# -- gradient checking -------------------------------------------------------------


def grad_check(loss_and_grads, params, eps=1e-5, floor=1e-8):
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads(params)`` returns ``(loss, grads)`` with ``grads`` keyed
    like ``params``. Every entry of every array in ``params`` is perturbed
    in place and restored.
    """
    _, analytic = loss_and_grads(params)
    worst = 0.0
    for name, arr in params.items():
        ana = analytic[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss_and_grads(params)[0]
            arr[idx] = orig - eps
            down = loss_and_grads(params)[0]
            arr[idx] = orig
            num = (up - down) / (2.0 * eps)
            a = ana[idx]
            worst = max(worst, abs(a - num) / max(abs(a) + abs(num), floor))
    return worst


def layer_grad_check(forward, backward, inputs, eps=1e-5, seed=0):
    """Grad-check a layer through a fixed random projection of its output.

    ``forward(**inputs)`` returns ``(out, cache)``; ``backward(dout, cache)``
    returns a dict of gradients for (a subset of) ``inputs``.
    """
    rng = np.random.default_rng(seed)
    out, _ = forward(**inputs)
    proj = rng.standard_normal(out.shape)

    def fn(_params):
        # grad_check perturbs the very arrays held in ``inputs``
        out, cache = forward(**inputs)
        return float(np.sum(out * proj)), backward(proj, cache)

    checked = fn(inputs)[1]
    return grad_check(fn, {k: inputs[k] for k in checked}, eps=eps)
