"""Minimal NHWC neural-network layers with explicit forward/backward passes.

Everything is plain numpy. Layers cache what their backward pass needs only
when forward() is called with training=True, so inference over large
backbones stays memory-light. Convolutions are im2col + GEMM with the
window gather/scatter done as k*k strided slice operations, chunked over the
batch axis when the column matrix would get large.

Padding semantics follow the TensorFlow convention ("same" pads the total
required amount, extra pixel on the bottom/right) so the canonical backbone
shapes come out exactly.
"""

from __future__ import annotations

import numpy as np

# column matrices above this many bytes are built per batch-chunk
_CHUNK_BYTES = 1 << 28


class Parameter:
    """A named weight array plus its gradient accumulator."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name, value, trainable=True):
        self.name = name
        self.value = value
        self.grad = None
        self.trainable = trainable

    @property
    def size(self):
        return int(self.value.size)

    def zero_grad(self):
        self.grad = None

    def add_grad(self, g):
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _pad_amounts(in_size, k, stride, padding):
    """Return (out_size, pad_before, pad_after) for one spatial axis."""
    if padding == "valid":
        out = (in_size - k) // stride + 1
        return out, 0, 0
    if padding == "same":
        out = -(-in_size // stride)  # ceil
        total = max((out - 1) * stride + k - in_size, 0)
        before = total // 2
        return out, before, total - before
    raise ValueError(f"unknown padding {padding!r}")


def _gather_windows(xp, kh, kw, sh, sw, oh, ow):
    """(N,Hp,Wp,C) -> (N,oh,ow,kh,kw,C) window tensor (copies)."""
    n, _, _, c = xp.shape
    out = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, :, i, j, :] = xp[:, i : i + (oh - 1) * sh + 1 : sh,
                                       j : j + (ow - 1) * sw + 1 : sw, :]
    return out


def _scatter_windows(dxp, dwin, kh, kw, sh, sw, oh, ow):
    """Accumulate (N,oh,ow,kh,kw,C) window grads back onto (N,Hp,Wp,C)."""
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (oh - 1) * sh + 1 : sh,
                j : j + (ow - 1) * sw + 1 : sw, :] += dwin[:, :, :, i, j, :]


def _batch_chunks(n, per_item_bytes):
    step = max(1, int(_CHUNK_BYTES // max(per_item_bytes, 1)))
    for lo in range(0, n, step):
        yield lo, min(lo + step, n)


class Layer:
    """Base class; subclasses set .name and implement forward/backward."""

    name = ""

    def parameters(self):
        return []

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, name, c_in, c_out, kernel, stride=1, padding="same",
                 use_bias=True, rng=None, dtype=np.float32):
        self.name = name
        kh, kw = kernel if isinstance(kernel, tuple) else (kernel, kernel)
        self.kh, self.kw = kh, kw
        self.stride = stride if isinstance(stride, tuple) else (stride, stride)
        self.padding = padding
        self.c_in, self.c_out = c_in, c_out
        fan_in = kh * kw * c_in
        w = glorot_uniform(rng, (kh, kw, c_in, c_out), fan_in, c_out, dtype)
        self.kernel = Parameter(f"{name}/kernel", w)
        self.bias = Parameter(f"{name}/bias", np.zeros(c_out, dtype)) if use_bias else None
        self._cache = None

    def parameters(self):
        return [self.kernel] + ([self.bias] if self.bias is not None else [])

    def _geometry(self, h, w):
        sh, sw = self.stride
        oh, pt, pb = _pad_amounts(h, self.kh, sh, self.padding)
        ow, pl, pr = _pad_amounts(w, self.kw, sw, self.padding)
        return oh, ow, (pt, pb), (pl, pr)

    def forward(self, x, training=False):
        n, h, w, _ = x.shape
        oh, ow, (pt, pb), (pl, pr) = self._geometry(h, w)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
        sh, sw = self.stride
        kmat = self.kernel.value.reshape(self.kh * self.kw * self.c_in, self.c_out)
        out = np.empty((n, oh, ow, self.c_out), dtype=x.dtype)
        per_item = oh * ow * self.kh * self.kw * self.c_in * x.dtype.itemsize
        for lo, hi in _batch_chunks(n, per_item):
            cols = _gather_windows(xp[lo:hi], self.kh, self.kw, sh, sw, oh, ow)
            m = cols.reshape((hi - lo) * oh * ow, -1) @ kmat
            out[lo:hi] = m.reshape(hi - lo, oh, ow, self.c_out)
        if self.bias is not None:
            out += self.bias.value
        if training:
            self._cache = (xp, x.shape, (oh, ow, pt, pl))
        return out

    def backward(self, grad):
        xp, x_shape, (oh, ow, pt, pl) = self._cache
        n, h, w, _ = x_shape
        sh, sw = self.stride
        kmat = self.kernel.value.reshape(self.kh * self.kw * self.c_in, self.c_out)
        dk = np.zeros_like(kmat)
        dxp = np.zeros_like(xp)
        per_item = oh * ow * self.kh * self.kw * self.c_in * xp.dtype.itemsize
        for lo, hi in _batch_chunks(n, per_item):
            cols = _gather_windows(xp[lo:hi], self.kh, self.kw, sh, sw, oh, ow)
            g = grad[lo:hi].reshape((hi - lo) * oh * ow, self.c_out)
            dk += cols.reshape((hi - lo) * oh * ow, -1).T @ g
            dwin = (g @ kmat.T).reshape(hi - lo, oh, ow, self.kh, self.kw, self.c_in)
            _scatter_windows(dxp[lo:hi], dwin, self.kh, self.kw, sh, sw, oh, ow)
        self.kernel.add_grad(dk.reshape(self.kernel.value.shape))
        if self.bias is not None:
            self.bias.add_grad(grad.sum(axis=(0, 1, 2)))
        self._cache = None
        return dxp[:, pt : pt + h, pl : pl + w, :]


class _Pool2D(Layer):
    def __init__(self, name, pool, stride=None, padding="valid"):
        self.name = name
        self.k = pool if isinstance(pool, tuple) else (pool, pool)
        stride = stride if stride is not None else pool
        self.stride = stride if isinstance(stride, tuple) else (stride, stride)
        self.padding = padding
        self._cache = None

    def _geometry(self, h, w):
        kh, kw = self.k
        sh, sw = self.stride
        oh, pt, pb = _pad_amounts(h, kh, sh, self.padding)
        ow, pl, pr = _pad_amounts(w, kw, sw, self.padding)
        return oh, ow, (pt, pb), (pl, pr)


class MaxPool2D(_Pool2D):
    def forward(self, x, training=False):
        n, h, w, c = x.shape
        kh, kw = self.k
        sh, sw = self.stride
        oh, ow, (pt, pb), (pl, pr) = self._geometry(h, w)
        if pt or pb or pl or pr:
            fill = np.finfo(x.dtype).min if np.issubdtype(x.dtype, np.floating) else np.iinfo(x.dtype).min
            xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=fill)
        else:
            xp = x
        win = _gather_windows(xp, kh, kw, sh, sw, oh, ow).reshape(n, oh, ow, kh * kw, c)
        arg = win.argmax(axis=3)
        out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        if training:
            self._cache = (arg, xp.shape, x.shape, (oh, ow, pt, pl))
        return out

    def backward(self, grad):
        arg, xp_shape, x_shape, (oh, ow, pt, pl) = self._cache
        n, h, w, c = x_shape
        kh, kw = self.k
        sh, sw = self.stride
        dwin = np.zeros((n, oh, ow, kh * kw, c), dtype=grad.dtype)
        np.put_along_axis(dwin, arg[:, :, :, None, :], grad[:, :, :, None, :], axis=3)
        dxp = np.zeros(xp_shape, dtype=grad.dtype)
        _scatter_windows(dxp, dwin.reshape(n, oh, ow, kh, kw, c), kh, kw, sh, sw, oh, ow)
        self._cache = None
        return dxp[:, pt : pt + h, pl : pl + w, :]


class AvgPool2D(_Pool2D):
    """Average pooling; padded cells are excluded from the mean (TF syle)."""

    def forward(self, x, training=False):
        n, h, w, c = x.shape
        kh, kw = self.k
        sh, sw = self.stride
        oh, ow, (pt, pb), (pl, pr) = self._geometry(h, w)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
        ones = np.ones((1, h, w, 1), dtype=x.dtype)
        onesp = np.pad(ones, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else ones
        win = _gather_windows(xp, kh, kw, sh, sw, oh, ow)
        counts = _gather_windows(onesp, kh, kw, sh, sw, oh, ow).sum(axis=(3, 4))
        out = win.sum(axis=(3, 4)) / counts
        if training:
            self._cache = (counts, xp.shape, x.shape, (oh, ow, pt, pl))
        return out

    def backward(self, grad):
        counts, xp_shape, x_shape, (oh, ow, pt, pl) = self._cache
        n, h, w, c = x_shape
        kh, kw = self.k
        sh, sw = self.stride
        g = (grad / counts)[:, :, :, None, None, :]
        dwin = np.broadcast_to(g, (n, oh, ow, kh, kw, c)).astype(grad.dtype)
        dxp = np.zeros(xp_shape, dtype=grad.dtype)
        _scatter_windows(dxp, dwin, kh, kw, sh, sw, oh, ow)
        self._cache = None
        return dxp[:, pt : pt + h, pl : pl + w, :]


class GlobalAvgPool(Layer):
    def __init__(self, name):
        self.name = name
        self._cache = None

    def forward(self, x, training=False):
        if training:
            self._cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        n, h, w, c = self._cache
        self._cache = None
        return np.broadcast_to(grad[:, None, None, :] / (h * w), (n, h, w, c)).astype(grad.dtype)


class Flatten(Layer):
    def __init__(self, name):
        self.name = name
        self._cache = None

    def forward(self, x, training=False):
        if training:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        shape = self._cache
        self._cache = None
        return grad.reshape(shape)


class Dense(Layer):
    def __init__(self, name, f_in, f_out, rng=None, dtype=np.float32):
        self.name = name
        self.f_in, self.f_out = f_in, f_out
        w = glorot_uniform(rng, (f_in, f_out), f_in, f_out, dtype)
        self.kernel = Parameter(f"{name}/kernel", w)
        self.bias = Parameter(f"{name}/bias", np.zeros(f_out, dtype))
        self._cache = None

    def parameters(self):
        return [self.kernel, self.bias]

    def forward(self, x, training=False):
        if training:
            self._cache = x
        return x @ self.kernel.value + self.bias.value

    def backward(self, grad):
        x = self._cache
        self._cache = None
        self.kernel.add_grad(x.T @ grad)
        self.bias.add_grad(grad.sum(axis=0))
        return grad @ self.kernel.value.T


class ReLU(Layer):
    def __init__(self, name):
        self.name = name
        self._cache = None

    def forward(self, x, training=False):
        out = np.maximum(x, 0)
        if training:
            self._cache = x > 0
        return out

    def backward(self, grad):
        mask = self._cache
        self._cache = None
        return grad * mask


class BatchNorm(Layer):
    """Channel batch norm. scale=False mirrors the canonical InceptionV3
    blocks (beta only, no gamma). Moving statistics are non-trainable
    parameters so they serialize - and count - like the reference models."""

    def __init__(self, name, c, scale=False, eps=1e-3, momentum=0.99, dtype=np.float32):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.beta = Parameter(f"{name}/beta", np.zeros(c, dtype))
        self.gamma = Parameter(f"{name}/gamma", np.ones(c, dtype)) if scale else None
        self.moving_mean = Parameter(f"{name}/moving_mean", np.zeros(c, dtype), trainable=False)
        self.moving_var = Parameter(f"{name}/moving_var", np.ones(c, dtype), trainable=False)
        self._cache = None

    def parameters(self):
        ps = [self.beta]
        if self.gamma is not None:
            ps.append(self.gamma)
        return ps + [self.moving_mean, self.moving_var]

    def forward(self, x, training=False):
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.moving_mean.value = (m * self.moving_mean.value + (1 - m) * mean).astype(x.dtype)
            self.moving_var.value = (m * self.moving_var.value + (1 - m) * var).astype(x.dtype)
        else:
            mean, var = self.moving_mean.value, self.moving_var.value
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        out = xhat * self.gamma.value + self.beta.value if self.gamma is not None else xhat + self.beta.value
        if training:
            self._cache = (xhat, inv, x.shape, axes)
        return out

    def backward(self, grad):
        xhat, inv, x_shape, axes = self._cache
        self._cache = None
        m = 1
        for a in axes:
            m *= x_shape[a]
        self.beta.add_grad(grad.sum(axis=axes))
        if self.gamma is not None:
            self.gamma.add_grad((grad * xhat).sum(axis=axes))
            gscale = grad * self.gamma.value
        else:
            gscale = grad
        # d/dx of batch-statistics normalization
        sum_g = gscale.sum(axis=axes)
        sum_gx = (gscale * xhat).sum(axis=axes)
        return (inv / m) * (m * gscale - sum_g - xhat * sum_gx)


class Softmax(Layer):
    def __init__(self, name):
        self.name = name
        self._cache = None

    def forward(self, x, training=False):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        if training:
            self._cache = p
        return p

    def backward(self, grad):
        p = self._cache
        self._cache = None
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


class Sequential(Layer):
    def __init__(self, name, layers):
        self.name = name
        self.layers = list(layers)

    def parameters(self):
        out = []
        for l in self.layers:
            out.extend(l.parameters())
        return out

    def forward(self, x, training=False):
        for l in self.layers:
            x = l.forward(x, training=training)
        return x

    def backward(self, grad):
        for l in reversed(self.layers):
            grad = l.backward(grad)
        return grad


class Branch(Layer):
    """Run parallel paths on one input and concatenate along channels."""

    def __init__(self, name, paths):
        self.name = name
        self.paths = list(paths)
        self._split = None

    def parameters(self):
        out = []
        for p in self.paths:
            out.extend(p.parameters())
        return out

    def forward(self, x, training=False):
        outs = [p.forward(x, training=training) for p in self.paths]
        self._split = np.cumsum([o.shape[-1] for o in outs])[:-1]
        return np.concatenate(outs, axis=-1)

    def backward(self, grad):
        pieces = np.split(grad, self._split, axis=-1)
        self._split = None
        dx = None
        for path, g in zip(self.paths, pieces):
            gi = path.backward(np.ascontiguousarray(g))
            dx = gi if dx is None else dx + gi
        return dx


def iter_layers(layer):
    """Depth-first iteration over leaf layers."""
    if isinstance(layer, Sequential):
        for l in layer.layers:
            yield from iter_layers(l)
    elif isinstance(layer, Branch):
        for p in layer.paths:
            yield from iter_layers(p)
    else:
        yield layer


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean categorical cross-entropy from raw logits.

    labels: int class indices, shape (N,). Returns (loss, dlogits) where
    dlogits is the gradient of the mean loss (softmax(logits) - onehot)/N.
    """
    n = logits.shape[0]
    ls = log_softmax(logits)
    loss = -float(ls[np.arange(n), labels].mean())
    dlogits = np.exp(ls)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n
