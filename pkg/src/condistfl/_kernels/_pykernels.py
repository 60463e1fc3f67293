"""Pure-numpy convolution kernels.

Both functions use the column layout ``[C*kh*kw, B*Ho*Wo]`` so that a
convolution is a single ``weight_matrix @ cols`` product.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def output_extent(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    B, C, H, W = x.shape
    Ho = output_extent(H, kh, stride, pad)
    Wo = output_extent(W, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :Ho, :Wo]
    # B,C,Ho,Wo,kh,kw -> C,kh,kw,B,Ho,Wo
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, B * Ho * Wo)


def col2im(cols, x_shape, kh, kw, stride, pad):
    B, C, H, W = x_shape
    Ho = output_extent(H, kh, stride, pad)
    Wo = output_extent(W, kw, stride, pad)
    c = cols.reshape(C, kh, kw, B, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += c[:, i, j].transpose(1, 0, 2, 3)
    return xp[:, :, pad:pad + H, pad:pad + W]


def norm_act_forward(x, slope, eps):
    """Instance norm over the last two axes followed by leaky ReLU."""
    mu = x.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    var = x.var(axis=(2, 3), keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x - mu) * inv).astype(x.dtype)
    y = np.maximum(xhat, xhat * x.dtype.type(slope)) if 0 <= slope <= 1 else np.where(xhat > 0, xhat, slope * xhat)
    return y, xhat, inv.reshape(-1)


def norm_act_backward(g, xhat, inv, slope):
    g = np.where(xhat > 0, g, g * g.dtype.type(slope)).astype(xhat.dtype, copy=False)
    gm = g.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    gxm = (g * xhat).mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    return ((g - gm - xhat * gxm) * inv.reshape(xhat.shape[:2] + (1, 1))).astype(xhat.dtype)
