# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

Every routine here has a numpy twin in ``_fallback``; both must agree
bitwise on ``conv2d_forward``.  Build flags must not enable fp contraction
or fast-math, otherwise the ordered accumulation stops matching the loop
oracle.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _im2col(const float* x, float* cols, int C, int H, int W,
                  int kh, int kw, int stride, int pad, int Ho, int Wo) noexcept nogil:
    cdef int c, i, j, oh, ow, ih, iw, row
    cdef Py_ssize_t P = <Py_ssize_t>Ho * Wo
    cdef float* dst
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                dst = cols + row * P
                for oh in range(Ho):
                    ih = oh * stride - pad + i
                    if ih < 0 or ih >= H:
                        for ow in range(Wo):
                            dst[oh * Wo + ow] = 0.0
                        continue
                    for ow in range(Wo):
                        iw = ow * stride - pad + j
                        if iw < 0 or iw >= W:
                            dst[oh * Wo + ow] = 0.0
                        else:
                            dst[oh * Wo + ow] = x[(c * H + ih) * W + iw]


cdef void _col2im(const float* cols, float* x, int C, int H, int W,
                  int kh, int kw, int stride, int pad, int Ho, int Wo) noexcept nogil:
    # x must be zeroed by the caller
    cdef int c, i, j, oh, ow, ih, iw, row
    cdef Py_ssize_t P = <Py_ssize_t>Ho * Wo
    cdef const float* src
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                src = cols + row * P
                for oh in range(Ho):
                    ih = oh * stride - pad + i
                    if ih < 0 or ih >= H:
                        continue
                    for ow in range(Wo):
                        iw = ow * stride - pad + j
                        if iw >= 0 and iw < W:
                            x[(c * H + ih) * W + iw] += src[oh * Wo + ow]


cdef void _ordered_matmul(const float* w, const float* cols, float* out,
                          int Co, int K, Py_ssize_t P) noexcept nogil:
    # out[co, p] = sum_k w[co, k] * cols[k, p], k strictly ascending per element.
    # Vectorised across p only, so per-element rounding order is preserved.
    cdef int co, k
    cdef Py_ssize_t p
    cdef float w0, w1, w2, w3, c
    cdef float* o0
    cdef float* o1
    cdef float* o2
    cdef float* o3
    cdef const float* crow
    co = 0
    while co + 4 <= Co:
        o0 = out + co * P
        o1 = o0 + P
        o2 = o1 + P
        o3 = o2 + P
        for p in range(4 * P):
            o0[p] = 0.0
        for k in range(K):
            w0 = w[co * K + k]
            w1 = w[(co + 1) * K + k]
            w2 = w[(co + 2) * K + k]
            w3 = w[(co + 3) * K + k]
            crow = cols + k * P
            for p in range(P):
                c = crow[p]
                o0[p] = o0[p] + w0 * c
                o1[p] = o1[p] + w1 * c
                o2[p] = o2[p] + w2 * c
                o3[p] = o3[p] + w3 * c
        co += 4
    while co < Co:
        o0 = out + co * P
        for p in range(P):
            o0[p] = 0.0
        for k in range(K):
            w0 = w[co * K + k]
            crow = cols + k * P
            for p in range(P):
                o0[p] = o0[p] + w0 * crow[p]
        co += 1


def im2col(cnp.ndarray x, int kh, int kw, int stride, int pad):
    """Unfold ``x`` (B, C, H, W) into columns (B, C*kh*kw, Ho*Wo)."""
    cdef cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] xc = np.ascontiguousarray(x, dtype=np.float32)
    cdef int B = xc.shape[0], C = xc.shape[1], H = xc.shape[2], W = xc.shape[3]
    cdef int Ho = (H + 2 * pad - kh) // stride + 1
    cdef int Wo = (W + 2 * pad - kw) // stride + 1
    cdef int K = C * kh * kw
    cdef cnp.ndarray[cnp.float32_t, ndim=3, mode="c"] cols = np.empty((B, K, Ho * Wo), dtype=np.float32)
    cdef int b
    cdef float* xp = <float*>xc.data
    cdef float* cp = <float*>cols.data
    with nogil:
        for b in range(B):
            _im2col(xp + <Py_ssize_t>b * C * H * W, cp + <Py_ssize_t>b * K * Ho * Wo,
                    C, H, W, kh, kw, stride, pad, Ho, Wo)
    return cols


def col2im(cnp.ndarray cols, int C, int H, int W, int kh, int kw, int stride, int pad):
    """Fold columns (B, C*kh*kw, Ho*Wo) back to (B, C, H, W), summing overlaps."""
    cdef cnp.ndarray[cnp.float32_t, ndim=3, mode="c"] cc = np.ascontiguousarray(cols, dtype=np.float32)
    cdef int B = cc.shape[0]
    cdef int Ho = (H + 2 * pad - kh) // stride + 1
    cdef int Wo = (W + 2 * pad - kw) // stride + 1
    cdef int K = C * kh * kw
    if cc.shape[1] != K or cc.shape[2] != Ho * Wo:
        raise ValueError("column block does not fit image (%d, %d, %d)" % (C, H, W))
    cdef cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] x = np.zeros((B, C, H, W), dtype=np.float32)
    cdef int b
    cdef float* xp = <float*>x.data
    cdef float* cp = <float*>cc.data
    with nogil:
        for b in range(B):
            _col2im(cp + <Py_ssize_t>b * K * Ho * Wo, xp + <Py_ssize_t>b * C * H * W,
                    C, H, W, kh, kw, stride, pad, Ho, Wo)
    return x


def conv2d_forward(cnp.ndarray x, cnp.ndarray w, b, int stride, int pad):
    cdef cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] wc = np.ascontiguousarray(w, dtype=np.float32)
    cdef int Co = wc.shape[0], kh = wc.shape[2], kw = wc.shape[3]
    cdef int B = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef int Ho = (H + 2 * pad - kh) // stride + 1
    cdef int Wo = (W + 2 * pad - kw) // stride + 1
    cdef cnp.ndarray[cnp.float32_t, ndim=3, mode="c"] cols = im2col(x, kh, kw, stride, pad)
    cdef int K = cols.shape[1]
    cdef Py_ssize_t P = <Py_ssize_t>Ho * Wo
    cdef cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] out = np.empty((B, Co, Ho, Wo), dtype=np.float32)
    cdef float* wp = <float*>wc.data
    cdef float* cp = <float*>cols.data
    cdef float* op = <float*>out.data
    cdef int i
    with nogil:
        for i in range(B):
            _ordered_matmul(wp, cp + <Py_ssize_t>i * K * P, op + <Py_ssize_t>i * Co * P, Co, K, P)
    if b is not None:
        out += np.asarray(b, dtype=np.float32).reshape(1, Co, 1, 1)
    return out


def conv2d_grad_input(cnp.ndarray gy, cnp.ndarray w, tuple x_shape, int stride, int pad):
    cdef int Co = w.shape[0], Ci = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef int B = gy.shape[0]
    wm = np.ascontiguousarray(w, dtype=np.float32).reshape(Co, Ci * kh * kw)
    gym = np.ascontiguousarray(gy, dtype=np.float32).reshape(B, Co, -1)
    gcols = np.matmul(wm.T, gym)
    return col2im(gcols, Ci, x_shape[2], x_shape[3], kh, kw, stride, pad)


def conv2d_grad_weight(cnp.ndarray x, cnp.ndarray gy, tuple w_shape, int stride, int pad):
    cdef int Co = w_shape[0], kh = w_shape[2], kw = w_shape[3]
    cdef int B = gy.shape[0]
    cols = im2col(x, kh, kw, stride, pad)
    gym = np.ascontiguousarray(gy, dtype=np.float32).reshape(B, Co, -1)
    gw = np.matmul(gym, cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(w_shape).astype(np.float32, copy=False)
