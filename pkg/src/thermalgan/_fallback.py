"""Pure-numpy convolution kernels, used when the compiled core is absent.

``conv2d_forward`` accumulates over (in_ch, kH, kW) in ascending order for
every output element, one tap at a time, so it is bitwise-equal to the
compiled kernel and to a naive loop.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _padded(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x, kh, kw, stride, pad):
    x = np.ascontiguousarray(x, dtype=np.float32)
    B, C, H, W = x.shape
    Ho = _out_extent(H, kh, stride, pad)
    Wo = _out_extent(W, kw, stride, pad)
    win = sliding_window_view(_padded(x, pad), (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # (B, C, Ho, Wo, kh, kw) -> (B, C, kh, kw, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo)
    return np.ascontiguousarray(cols)


def col2im(cols, C, H, W, kh, kw, stride, pad):
    B = cols.shape[0]
    Ho = _out_extent(H, kh, stride, pad)
    Wo = _out_extent(W, kw, stride, pad)
    if cols.shape[1] != C * kh * kw or cols.shape[2] != Ho * Wo:
        raise ValueError(f"column block {cols.shape} does not fit image {(C, H, W)}")
    cols = cols.reshape(B, C, kh, kw, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride] += cols[
                :, :, i, j
            ]
    if pad:
        xp = xp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(xp)


def conv2d_forward(x, w, b, stride, pad):
    w = np.asarray(w, dtype=np.float32)
    Co, Ci, kh, kw = w.shape
    cols = im2col(x, kh, kw, stride, pad)
    B, K, P = cols.shape
    Ho = _out_extent(x.shape[2], kh, stride, pad)
    Wo = _out_extent(x.shape[3], kw, stride, pad)
    wm = w.reshape(Co, K)
    out = np.zeros((B, Co, P), dtype=np.float32)
    for k in range(K):
        out += wm[None, :, k, None] * cols[:, None, k, :]
    out = out.reshape(B, Co, Ho, Wo)
    if b is not None:
        out += np.asarray(b, dtype=np.float32).reshape(1, Co, 1, 1)
    return out


def conv2d_grad_input(gy, w, x_shape, stride, pad):
    Co, Ci, kh, kw = w.shape
    B = gy.shape[0]
    wm = np.asarray(w, dtype=np.float32).reshape(Co, Ci * kh * kw)
    gcols = np.matmul(wm.T, gy.reshape(B, Co, -1))
    return col2im(gcols, Ci, x_shape[2], x_shape[3], kh, kw, stride, pad)


def conv2d_grad_weight(x, gy, w_shape, stride, pad):
    Co, Ci, kh, kw = w_shape
    B = gy.shape[0]
    cols = im2col(x, kh, kw, stride, pad)
    gw = np.matmul(gy.reshape(B, Co, -1), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(w_shape).astype(np.float32, copy=False)
