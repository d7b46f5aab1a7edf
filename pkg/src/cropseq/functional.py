"""Differentiable operations on :class:`~cropseq.tensor.Tensor`.

Convolutions accept either a single sample (``[C, *spatial]``) or a batch
(``[N, C, *spatial]``); the output keeps the caller's layout.
"""
import numpy as np

from . import _kernels as K
from .tensor import Tensor, as_tensor

__all__ = [
    "add", "neg", "mul", "sum", "mean", "reshape", "transpose", "concat",
    "take", "relu", "conv2d", "conv3d", "transposed_conv2d", "batch_norm",
    "dropout", "softmax", "softmax_cross_entropy", "BN_EPS",
]

BN_EPS = 1e-5


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise / structural ---------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a):
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._from_op(
        ad * bd, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def sum(a):  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return Tensor._from_op(
        np.array(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def mean(a):
    shape, n = a.shape, a.size
    return Tensor._from_op(
        np.array(a.data.mean()), "mean", (a,),
        lambda g: (np.full(shape, np.asarray(g).item() / n),),
    )


def reshape(a, shape):
    old = a.shape
    return Tensor._from_op(
        a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),)
    )


def transpose(a, axes):
    inv = np.argsort(axes)
    return Tensor._from_op(
        np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def concat(tensors, axis=0):
    """Concatenate along ``axis`` (the feature axis for ``[N, C, ...]`` is 1)."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, "concat", tensors, backward)


def take(a, indices, axis=0):
    """Select ``indices`` along ``axis``; gradients scatter back."""
    indices = np.asarray(indices)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        idx = [slice(None)] * len(shape)
        idx[axis] = indices
        np.add.at(out, tuple(idx), g)
        return (out,)

    return Tensor._from_op(np.take(a.data, indices, axis=axis), "take", (a,), backward)


def relu(a):
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, "relu", (a,), lambda g: (g * mask,))


# -- convolutions -------------------------------------------------------------
def _batched(x, nd):
    if x.ndim == nd + 1:
        return x.data[None], True
    if x.ndim == nd + 2:
        return x.data, False
    raise ValueError(f"expected a {nd + 1}-D or {nd + 2}-D input, got shape {x.shape}")


def _conv(x, w, b, stride, dilation, pads, kind):
    nd = w.ndim - 2
    xd, squeeze = _batched(x, nd)
    if xd.shape[1] != w.shape[1]:
        raise ValueError(
            f"{kind}: input has {xd.shape[1]} channels, kernels expect {w.shape[1]}"
        )
    out, cache = K.convnd_forward(xd, w.data, stride, dilation, pads)
    if b is not None:
        out += b.data.reshape((1, -1) + (1,) * nd)
    xshape = xd.shape

    def backward(g):
        gb = g[None] if squeeze else g
        dx = dw = db = None
        if x.requires_grad:
            dx = K.convnd_backward_data(gb, w.data, xshape, stride, dilation, pads)
            if squeeze:
                dx = dx[0]
        if w.requires_grad:
            dw = K.convnd_backward_filter(gb, cache, w.shape)
        if b is not None and b.requires_grad:
            db = gb.sum(axis=(0,) + tuple(range(2, 2 + nd)))
        return (dx, dw) if b is None else (dx, dw, db)

    inputs = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out[0] if squeeze else out, kind, inputs, backward)


def conv2d(x, w, b=None, stride=1, dilation=1, padding="same"):
    """2D cross-correlation.

    ``w`` has shape ``[C_out, C_in, k, k]``. ``padding="same"`` zero-pads so
    the output has ``ceil(H / stride)`` rows (requires odd ``k``);
    ``"valid"`` does not pad.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    kh, kw = w.shape[2:]
    h, wd = x.shape[-2:]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding needs odd kernel sizes")
        pads = (K.same_padding(h, kh, stride, dilation), K.same_padding(wd, kw, stride, dilation))
    elif padding == "valid":
        pads = ((0, 0), (0, 0))
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return _conv(x, w, b, (stride, stride), (dilation, dilation), pads, "conv2d")


def conv3d(x, w, b=None, spatial_dilation=1, temporal_padding="same"):
    """3D cross-correlation over ``[C, T, H, W]`` volumes.

    Kernels are ``[C_out, C_in, T_k, k, k]``. Spatial padding is always
    "same" and dilation acts on the spatial axes only. With
    ``temporal_padding="valid"`` and ``T_k == T`` the time axis collapses to 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    tk, kh, kw = w.shape[2:]
    t, h, wd = x.shape[-3:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("spatial kernel sizes must be odd")
    d = spatial_dilation
    if temporal_padding == "same":
        tpad = ((tk - 1) // 2, tk - 1 - (tk - 1) // 2)
    elif temporal_padding == "valid":
        if tk > t:
            raise ValueError(f"temporal kernel {tk} longer than sequence {t}")
        tpad = (0, 0)
    else:
        raise ValueError(f"unknown temporal padding {temporal_padding!r}")
    pads = (tpad, K.same_padding(h, kh, 1, d), K.same_padding(wd, kw, 1, d))
    return _conv(x, w, b, (1, 1, 1), (1, d, d), pads, "conv3d")


def transposed_conv2d(x, w, b=None, stride=2):
    """Learnable upsampling; ``w`` is ``[C_in, C_out, stride, stride]``.

    This is the adjoint of a ``valid`` conv2d with the same kernel and stride,
    so the spatial size is multiplied exactly by ``stride``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.shape[2] != stride or w.shape[3] != stride:
        raise ValueError("transposed_conv2d supports kernel size == stride only")
    xd, squeeze = _batched(x, 2)
    if xd.shape[1] != w.shape[0]:
        raise ValueError(
            f"transposed_conv2d: input has {xd.shape[1]} channels, kernels expect {w.shape[0]}"
        )
    out = K.upsample_forward(xd, w.data)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)

    def backward(g):
        gb = g[None] if squeeze else g
        dx, dw = K.upsample_backward(gb, xd, w.data)
        if squeeze:
            dx = dx[0]
        grads = (dx, dw)
        if b is not None:
            grads += (gb.sum(axis=(0, 2, 3)),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out[0] if squeeze else out, "transposed_conv2d", inputs, backward)


# -- normalization / regularization -------------------------------------------
def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               momentum=0.9, eps=BN_EPS, channel_axis=1):
    """Per-feature-map batch normalization.

    Statistics are pooled over every axis except ``channel_axis`` (so for
    ``[N, C, T, H, W]`` volumes the time axis is pooled too). In training mode
    ``running_mean``/``running_var`` (numpy arrays) are updated in place as
    ``r <- momentum * r + (1 - momentum) * batch``.
    """
    x = as_tensor(x)
    axes = tuple(i for i in range(x.ndim) if i != channel_axis)
    bshape = [1] * x.ndim
    bshape[channel_axis] = -1
    g_ = gamma.data.reshape(bshape)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.reshape(-1)
        running_var *= momentum
        running_var += (1 - momentum) * var.reshape(-1)
    else:
        mu = running_mean.reshape(bshape)
        var = running_var.reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * g_ + beta.data.reshape(bshape)
    m = x.size // x.shape[channel_axis]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * g_
        if training:
            dx = inv / m * (
                m * gx
                - gx.sum(axis=axes, keepdims=True)
                - xhat * (gx * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = gx * inv
        return dx, dgamma, dbeta

    return Tensor._from_op(out, "batch_norm", (x, gamma, beta), backward)


def dropout(x, rate, training, rng):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must lie in [0, 1)")
    x = as_tensor(x)
    if not training or rate == 0:
        return x
    # float32 draws halve the cost of the mask; the keep probability is unaffected at this precision
    mask = (rng.random(x.shape, dtype=np.float32) >= np.float32(rate)) * (1.0 / (1.0 - rate))
    return Tensor._from_op(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


# -- output ---------------------------------------------------------------------
def _softmax_np(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits, axis=-3):
    """Softmax along the class axis (``-3`` for ``[..., K, H, W]``)."""
    logits = as_tensor(logits)
    p = _softmax_np(logits.data, axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(p, "softmax", (logits,), backward)


def softmax_cross_entropy(logits, labels, class_weights):
    """Mean over pixels of ``w[label] * -log softmax(logits)[label]``.

    ``logits`` is ``[K, H, W]`` or ``[N, K, H, W]``; ``labels`` holds class
    ids of matching layout without the class axis.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    w = np.asarray(class_weights, dtype=np.float64)
    nclass = logits.shape[-3]
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= nclass):
        raise ValueError(f"labels must lie in [0, {nclass})")
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    lab = labels.astype(np.intp)
    z = np.moveaxis(logits.data, -3, -1)  # [..., H, W, K]
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, lab[..., None], axis=-1)[..., 0]
    pw = w[lab]
    n = lab.size
    loss = -(pw * picked).sum() / n

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
        d = (p - onehot) * (pw / n)[..., None] * np.asarray(g).item()
        return (np.moveaxis(d, -1, -3),)

    return Tensor._from_op(np.array(loss), "softmax_cross_entropy", (logits,), backward)
