"""Raw numpy convolution kernels (no autodiff).

All kernels operate on batched arrays laid out as ``(N, C, *spatial)`` with
one to three spatial axes. They implement cross-correlation (no kernel flip)
and are shared by the 2D and 3D layers.
"""
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "conv_output_size",
    "same_padding",
    "convnd_forward",
    "convnd_backward_data",
    "convnd_backward_filter",
    "upsample_forward",
    "upsample_backward",
]


def conv_output_size(size, k, stride, dilation, pad):
    eff = (k - 1) * dilation + 1
    return (size + pad[0] + pad[1] - eff) // stride + 1


def same_padding(size, k, stride, dilation):
    """(lo, hi) zero padding so that the output has ``ceil(size / stride)`` cells."""
    eff = (k - 1) * dilation + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + eff - size, 0)
    return total // 2, total - total // 2


def _im2col(x, ksize, stride, dilation, pads):
    nd = len(ksize)
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple(pads))
    eff = tuple((k - 1) * d + 1 for k, d in zip(ksize, dilation))
    win = sliding_window_view(xp, eff, axis=tuple(range(2, 2 + nd)))
    sl = (slice(None), slice(None))
    sl += tuple(slice(None, None, s) for s in stride)
    sl += tuple(slice(None, None, d) for d in dilation)
    win = win[sl]
    out_shape = win.shape[2:2 + nd]
    # (N, C, *out, *k) -> (N, C, *k, *out)
    perm = (0, 1) + tuple(range(2 + nd, 2 + 2 * nd)) + tuple(range(2, 2 + nd))
    cols = win.transpose(perm).reshape(x.shape[0], -1, int(np.prod(out_shape)))
    return cols, out_shape


def _is_pointwise(ksize, stride, pads):
    return all(k == 1 for k in ksize) and all(s == 1 for s in stride) and not any(
        lo or hi for lo, hi in pads
    )


def convnd_forward(x, w, stride, dilation, pads):
    """Correlate ``x`` (N, C, *S) with ``w`` (Co, C, *K).

    Returns ``(out, cache)``; the cache feeds :func:`convnd_backward_filter`.
    """
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels but kernels expect {w.shape[1]}"
        )
    ksize = w.shape[2:]
    if len(ksize) == 3 and stride == (1, 1, 1) and dilation[0] == 1 and ksize[0] > 1:
        return _temporal_forward(x, w, dilation, pads)
    if _is_pointwise(ksize, stride, pads):
        cols, out_shape = x.reshape(x.shape[0], x.shape[1], -1), x.shape[2:]
    else:
        cols, out_shape = _im2col(x, ksize, stride, dilation, pads)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    return out.reshape((x.shape[0], w.shape[0]) + tuple(out_shape)), ("cols", cols)


def _temporal_forward(x, w, dilation, pads):
    # 3D conv as per-frame 2D im2col plus a sum over temporal taps; the
    # im2col buffer then scales with T instead of T * T_k.
    n, c, t, h, wd = x.shape
    co, _, tk, kh, kw = w.shape
    lo, hi = pads[0]
    t_out = t + lo + hi - tk + 1
    frames = x.transpose(0, 2, 1, 3, 4).reshape(n * t, c, h, wd)
    cols, out_hw = _im2col(frames, (kh, kw), (1, 1), dilation[1:], pads[1:])
    wt = w.transpose(2, 0, 1, 3, 4).reshape(tk * co, -1)
    z = np.matmul(wt, cols).reshape(n, t, tk, co, -1)
    out = np.zeros((n, t_out, co, z.shape[-1]))
    for tau in range(tk):
        o0, o1 = max(0, lo - tau), min(t_out, t + lo - tau)
        if o1 > o0:
            out[:, o0:o1] += z[:, o0 + tau - lo:o1 + tau - lo, tau]
    out = out.transpose(0, 2, 1, 3).reshape((n, co, t_out) + tuple(out_hw))
    return out, ("temporal", cols.reshape(n, t, cols.shape[1], -1), lo)


def convnd_backward_filter(grad, cache, wshape):
    n, co = grad.shape[:2]
    if cache[0] == "temporal":
        _, cols, lo = cache
        tk = wshape[2]
        t = cols.shape[1]
        t_out = grad.shape[2]
        g = grad.reshape(n, co, t_out, -1)
        dw = np.zeros((tk, co, cols.shape[2]))
        for tau in range(tk):
            for to in range(t_out):
                s = to + tau - lo
                if 0 <= s < t:
                    for i in range(n):
                        dw[tau] += g[i, :, to] @ cols[i, s].T
        c = wshape[1]
        return dw.reshape((tk, co, c) + tuple(wshape[3:])).transpose(1, 2, 0, 3, 4)
    cols = cache[1]
    g = grad.reshape(n, co, -1)
    dw = np.zeros((co, cols.shape[1]))
    for i in range(n):
        dw += g[i] @ cols[i].T
    return dw.reshape(wshape)


def convnd_backward_data(grad, w, xshape, stride, dilation, pads):
    """Adjoint of :func:`convnd_forward` with respect to its input."""
    n = grad.shape[0]
    co, c = w.shape[:2]
    ksize = w.shape[2:]
    nd = len(ksize)
    out_shape = grad.shape[2:]
    if _is_pointwise(ksize, stride, pads):
        dx = np.matmul(w.reshape(co, c).T, grad.reshape(n, co, -1))
        return dx.reshape(xshape)
    if all(s == 1 for s in stride):
        return _backward_data_unit_stride(grad, w, dilation, pads)
    dcols = np.matmul(w.reshape(co, -1).T, grad.reshape(n, co, -1))
    dcols = dcols.reshape((n, c) + tuple(ksize) + tuple(out_shape))
    padded = tuple(s + p[0] + p[1] for s, p in zip(xshape[2:], pads))
    dxp = np.zeros((n, c) + padded)
    for offs in itertools.product(*(range(k) for k in ksize)):
        dst = (slice(None), slice(None)) + tuple(
            slice(o * d, o * d + s * (m - 1) + 1, s)
            for o, d, s, m in zip(offs, dilation, stride, out_shape)
        )
        dxp[dst] += dcols[(slice(None), slice(None)) + offs]
    crop = (slice(None), slice(None)) + tuple(
        slice(p[0], p[0] + s) for p, s in zip(pads, xshape[2:])
    )
    return dxp[crop]


def _backward_data_unit_stride(grad, w, dilation, pads):
    # correlate the re-padded gradient with the flipped, channel-swapped kernel
    nd = w.ndim - 2
    eff = [(k - 1) * d + 1 for k, d in zip(w.shape[2:], dilation)]
    gpads = tuple((e - 1 - lo, e - 1 - hi) for e, (lo, hi) in zip(eff, pads))
    flip = (slice(None), slice(None)) + (slice(None, None, -1),) * nd
    wt = np.ascontiguousarray(w[flip].swapaxes(0, 1))
    crop = [slice(None), slice(None)]
    # padding larger than the kernel reach gives negative re-pad; crop instead
    for ax, (lo, hi) in enumerate(gpads):
        crop.append(slice(max(-lo, 0), grad.shape[2 + ax] - max(-hi, 0)))
    g = grad[tuple(crop)]
    gpads = tuple((max(lo, 0), max(hi, 0)) for lo, hi in gpads)
    out, _ = convnd_forward(g, wt, (1,) * nd, dilation, gpads)
    return out


def upsample_forward(x, w):
    """Transposed 2D convolution whose kernel size equals its stride.

    ``x`` is (N, Ci, H, W), ``w`` is (Ci, Co, k, k); output is (N, Co, kH, kW).
    """
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    y = np.tensordot(x, w, axes=([1], [0]))  # (N, H, W, Co, k, k)
    return y.transpose(0, 3, 1, 4, 2, 5).reshape(n, co, h * k, wd * k)


def upsample_backward(grad, x, w):
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    g = grad.reshape(n, co, h, k, wd, k)
    dx = np.einsum("nchawb,dcab->ndhw", g, w, optimize=True)
    dw = np.einsum("nchawb,ndhw->dcab", g, x, optimize=True)
    return dx, dw
