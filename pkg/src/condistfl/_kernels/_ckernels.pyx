# cython: language_level=3
"""Compiled im2col / col2im for float32 and float64 inputs."""
import numpy as np
cimport cython

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _extent(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


cdef inline void _valid_range(Py_ssize_t j, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t W,
                              Py_ssize_t Wo, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns wo with 0 <= wo*stride - pad + j < W
    cdef Py_ssize_t a = 0, b = Wo
    while a < Wo and a * stride - pad + j < 0:
        a += 1
    while b > a and (b - 1) * stride - pad + j >= W:
        b -= 1
    lo[0] = a
    hi[0] = b


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _im2col(const real[:, :, :, ::1] x, real[:, ::1] out, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t c, i, j, b, ho, wo, hi, row, col, lo, up, off
    cdef real* dst
    cdef const real* src
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                _valid_range(j, stride, pad, W, Wo, &lo, &up)
                off = j - pad
                col = 0
                for b in range(B):
                    for ho in range(Ho):
                        dst = &out[row, col]
                        hi = ho * stride - pad + i
                        if hi < 0 or hi >= H:
                            for wo in range(Wo):
                                dst[wo] = 0
                        else:
                            src = &x[b, c, hi, 0]
                            for wo in range(lo):
                                dst[wo] = 0
                            if stride == 1:
                                for wo in range(lo, up):
                                    dst[wo] = src[wo + off]
                            else:
                                for wo in range(lo, up):
                                    dst[wo] = src[wo * stride + off]
                            for wo in range(up, Wo):
                                dst[wo] = 0
                        col += Wo


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _col2im(const real[:, ::1] cols, real[:, :, :, ::1] out, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t c, i, j, b, ho, wo, hi, row, col, lo, up, off
    cdef real* dst
    cdef const real* src
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                _valid_range(j, stride, pad, W, Wo, &lo, &up)
                off = j - pad
                col = 0
                for b in range(B):
                    for ho in range(Ho):
                        hi = ho * stride - pad + i
                        if 0 <= hi < H:
                            src = &cols[row, col]
                            dst = &out[b, c, hi, 0]
                            if stride == 1:
                                for wo in range(lo, up):
                                    dst[wo + off] += src[wo]
                            else:
                                for wo in range(lo, up):
                                    dst[wo * stride + off] += src[wo]
                        col += Wo


def output_extent(size, k, stride, pad):
    return _extent(size, k, stride, pad)


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    B, C, H, W = x.shape
    Ho = _extent(H, kh, stride, pad)
    Wo = _extent(W, kw, stride, pad)
    out = np.empty((C * kh * kw, B * Ho * Wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, out, kh, kw, stride, pad, Ho, Wo)
    elif x.dtype == np.float64:
        _im2col[double](x, out, kh, kw, stride, pad, Ho, Wo)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return out


def col2im(cols, x_shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    B, C, H, W = x_shape
    Ho = _extent(H, kh, stride, pad)
    Wo = _extent(W, kw, stride, pad)
    out = np.zeros((B, C, H, W), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, out, kh, kw, stride, pad, Ho, Wo)
    elif cols.dtype == np.float64:
        _col2im[double](cols, out, kh, kw, stride, pad, Ho, Wo)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _norm_act_fwd(const real[:, ::1] x, real[:, ::1] y, real[:, ::1] xhat, double[::1] inv,
                        double slope, double eps) noexcept nogil:
    cdef Py_ssize_t P = x.shape[0], n = x.shape[1], p, i
    cdef double mu, var, d, s, v
    for p in range(P):
        mu = 0
        for i in range(n):
            mu += x[p, i]
        mu /= n
        var = 0
        for i in range(n):
            d = x[p, i] - mu
            var += d * d
        var /= n
        s = 1.0 / (var + eps) ** 0.5
        inv[p] = s
        for i in range(n):
            v = (x[p, i] - mu) * s
            xhat[p, i] = <real>v
            y[p, i] = <real>(v if v > 0 else slope * v)


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _norm_act_bwd(const real[:, ::1] g, const real[:, ::1] xhat, const double[::1] inv,
                        real[:, ::1] out, double slope) noexcept nogil:
    cdef Py_ssize_t P = g.shape[0], n = g.shape[1], p, i
    cdef double gm, gxm, gi
    for p in range(P):
        gm = 0
        gxm = 0
        for i in range(n):
            gi = g[p, i] if xhat[p, i] > 0 else slope * g[p, i]
            gm += gi
            gxm += gi * xhat[p, i]
        gm /= n
        gxm /= n
        for i in range(n):
            gi = g[p, i] if xhat[p, i] > 0 else slope * g[p, i]
            out[p, i] = <real>(inv[p] * (gi - gm - xhat[p, i] * gxm))


def norm_act_forward(x, double slope, double eps):
    shape = x.shape
    x2 = np.ascontiguousarray(x).reshape(shape[0] * shape[1], -1)
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    inv = np.empty(x2.shape[0], dtype=np.float64)
    if x2.dtype == np.float32:
        _norm_act_fwd[float](x2, y, xhat, inv, slope, eps)
    elif x2.dtype == np.float64:
        _norm_act_fwd[double](x2, y, xhat, inv, slope, eps)
    else:
        raise TypeError(f"unsupported dtype {x2.dtype}")
    return y.reshape(shape), xhat.reshape(shape), inv


def norm_act_backward(g, xhat, inv, double slope):
    shape = g.shape
    g2 = np.ascontiguousarray(g, dtype=xhat.dtype).reshape(shape[0] * shape[1], -1)
    xh = np.ascontiguousarray(xhat).reshape(g2.shape)
    out = np.empty_like(g2)
    if g2.dtype == np.float32:
        _norm_act_bwd[float](g2, xh, inv, out, slope)
    else:
        _norm_act_bwd[double](g2, xh, inv, out, slope)
    return out.reshape(shape)
