"""Differentiable primitives.

Every function takes and returns :class:`Tensor`. When a :class:`GradTape`
is active and some input requires a gradient, the op records a closure that
maps the output gradient to input gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ShapeError
from .tensor import Tensor, active_tape, as_tensor


def _result(data, inputs, backward) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant that is not part of the graph."""
    factor = a.data.dtype.type(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1 - s),)

    return _result(s, (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return expit(v)


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    y = x.data * s

    def backward(g):
        return (g * (s + y * (1 - s)),)

    return _result(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


ACTIVATIONS = {"swish": swish, "relu": relu, "sigmoid": sigmoid}


# --- reductions and shape ----------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def backward(g):
        return (np.full(shape, g / n, dtype=x.dtype),)

    return _result(x.data.mean(), (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping them as size 1."""
    _check_rank4(x, "global_avg_pool")
    hw = x.shape[2] * x.shape[3]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g / hw, shape).copy(),)

    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward)


# --- convolutions ----------------------------------------------------------

def _check_rank4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a rank-4 (N, C, H, W) tensor, got shape {x.shape}")


def _out_size(n: int, k: int, stride: int, pad: int, what: str) -> int:
    size = (n + 2 * pad - k) // stride + 1
    if size < 1:
        raise ShapeError(f"{what}: kernel {k} does not fit input side {n} with padding {pad}")
    return size


def _pad(v: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return v
    n, c, h, w = v.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=v.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = v
    return out


def _patches(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided k x k windows of a padded batch, shape (N, C, Ho, Wo, k, k)."""
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation with zero padding.

    ``w`` has shape ``(C_out, C_in, k, k)``; the output side is
    ``(H + 2p - k) // stride + 1``.
    """
    _check_rank4(x, "conv2d")
    n, c, h, wd = x.shape
    c_out, c_in, k, k2 = w.shape
    if c_in != c or k != k2:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c_in} (kernel {w.shape})")
    ho = _out_size(h, k, stride, padding, "conv2d")
    wo = _out_size(wd, k, stride, padding, "conv2d")

    if k == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        w2 = w.data.reshape(c_out, c)
        cols = xs.transpose(1, 0, 2, 3).reshape(c, -1)
        out = (w2 @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)

        def backward(g):
            g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
            gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
            gx = None
            if x.requires_grad:
                gxs = (w2.T @ g2).reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
                if stride > 1:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride, ::stride] = gxs
                else:
                    gx = np.ascontiguousarray(gxs)
            return gx, gw
    else:
        xp = _pad(x.data, padding)
        win = _patches(xp, k, stride, ho, wo)
        # cols: (N*Ho*Wo, C*k*k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        w2 = w.data.reshape(c_out, -1)
        out = (cols @ w2.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

        def backward(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
            gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
            gx = None
            if x.requires_grad:
                gcols = (g2 @ w2).reshape(n, ho, wo, c, k, k)
                gxp = np.zeros_like(xp)
                for a in range(k):
                    for b in range(k):
                        gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += (
                            gcols[:, :, :, :, a, b].transpose(0, 3, 1, 2))
                gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
            return gx, gw

    out = np.ascontiguousarray(out)
    if bias is None:
        return _result(out, (x, w), backward)
    conv = _result(out, (x, w), backward)
    return add(conv, reshape(bias, (1, c_out, 1, 1)))


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel cross-correlation; ``w`` has shape ``(C, 1, k, k)``."""
    _check_rank4(x, "depthwise_conv2d")
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[0] != c or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"depthwise_conv2d: kernel {w.shape} incompatible with {c} channels")
    k = w.shape[2]
    ho = _out_size(h, k, stride, padding, "depthwise_conv2d")
    wo = _out_size(wd, k, stride, padding, "depthwise_conv2d")
    xp = _pad(x.data, padding)
    taps = w.data[:, 0]
    # (C, k*k, N*Ho*Wo): one small matmul per channel
    cols = _patches(xp, k, stride, ho, wo).transpose(1, 4, 5, 0, 2, 3).reshape(c, k * k, n * ho * wo)
    out = np.matmul(taps.reshape(c, 1, k * k), cols).reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = None
        if w.requires_grad:
            gc = g.transpose(1, 0, 2, 3).reshape(c, n * ho * wo, 1)
            gw = np.matmul(cols, gc).reshape(w.shape)
        gx = None
        if x.requires_grad:
            if stride == 1 and 2 * padding == k - 1:
                # same-size case: correlate the padded gradient with the flipped kernel
                gcols = _patches(_pad(g, padding), k, 1, h, wd).transpose(1, 4, 5, 0, 2, 3)
                gcols = gcols.reshape(c, k * k, n * h * wd)
                flipped = taps[:, ::-1, ::-1].reshape(c, 1, k * k)
                gx = np.matmul(flipped, gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
                gx = np.ascontiguousarray(gx)
            else:
                gxp = np.zeros_like(xp)
                for a in range(k):
                    if a + stride * (ho - 1) < padding or a >= padding + h:
                        continue
                    for b in range(k):
                        if b + stride * (wo - 1) < padding or b >= padding + wd:
                            continue
                        gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += (
                            g * taps[None, :, a, b, None, None])
                gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return _result(out, (x, w), backward)


# --- normalization ---------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               training: bool, momentum: float = 0.01, eps: float = 1e-3) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize ``x`` and the running
    statistics move toward them by ``momentum`` (the running variance uses
    the unbiased estimate). In eval mode the running statistics are used.
    """
    _check_rank4(x, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    m = n * h * w
    if m == 0:
        raise ShapeError("batch_norm: empty batch")
    axes = (0, 2, 3)

    if not training:
        scale_ = gamma.data / np.sqrt(running_var.data + eps)
        shift = beta.data - running_mean.data * scale_
        y = x.data * scale_[None, :, None, None] + shift[None, :, None, None]

        def backward(g):
            gx = g * scale_[None, :, None, None] if x.requires_grad else None
            xhat = (x.data - running_mean.data[None, :, None, None]) / np.sqrt(running_var.data + eps)[None, :, None, None]
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _result(y, (x, gamma, beta), backward)

    mu = x.data.mean(axis=axes)
    centered = x.data - mu[None, :, None, None]
    var = (centered * centered).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None, None]
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    unbiased = var * (m / (m - 1)) if m > 1 else var
    running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
    running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gx = None
        if x.requires_grad:
            gx = (gamma.data * inv_std)[None, :, None, None] * (
                g - (gbeta / m)[None, :, None, None] - xhat * (ggamma / m)[None, :, None, None])
        return gx, ggamma, gbeta

    return _result(y, (x, gamma, beta), backward)


# --- composite blocks ------------------------------------------------------

def squeeze_excitation(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                       activation: str = "swish") -> Tensor:
    """Channel gating ``x * sigmoid(w2 @ act(w1 @ gap(x) + b1) + b2)``.

    ``w1`` is ``(C_r, C, 1, 1)`` and ``w2`` is ``(C, C_r, 1, 1)``.
    """
    _check_rank4(x, "squeeze_excitation")
    c = x.shape[1]
    if w1.shape[1] != c or w2.shape[0] != c or w2.shape[1] != w1.shape[0]:
        raise ShapeError(f"squeeze_excitation: weights {w1.shape}/{w2.shape} do not match {c} channels")
    s = global_avg_pool(x)
    s = ACTIVATIONS[activation](conv2d(s, w1, bias=b1))
    s = sigmoid(conv2d(s, w2, bias=b2))
    return mul(x, s)


def drop_connect(x: Tensor, survival_p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Drop whole samples of a residual branch with probability ``1 - survival_p``.

    Survivors are scaled by ``1 / survival_p``; eval mode is the identity.
    """
    if not 0 < survival_p <= 1:
        raise ValueError(f"survival_p must lie in (0, 1], got {survival_p}")
    if not training or survival_p == 1:
        return x
    keep = rng.random(x.shape[0]) < survival_p
    mask = (keep / survival_p).astype(x.dtype).reshape((-1,) + (1,) * (x.ndim - 1))
    return mul(x, Tensor(mask))


# --- head and loss ---------------------------------------------------------

def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + b`` for ``x`` of shape ``(N, C)`` or ``(N, C, 1, 1)``."""
    if x.ndim == 4:
        if x.shape[2:] != (1, 1):
            raise ShapeError(f"fully_connected: spatial dims must be pooled to 1x1, got {x.shape}")
        x = reshape(x, x.shape[:2])
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {w.shape}")

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        return gx, gw

    out = _result(x.data @ w.data.T, (x, w), backward)
    return out if b is None else add(out, b)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, K) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return (grad * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
