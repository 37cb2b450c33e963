"""Pure numpy im2col / col2im, used when the compiled kernels are unavailable."""
import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=np.float64)
    for i in range(kh):
        ylim = i + stride * oh
        for j in range(kw):
            xlim = j + stride * ow
            cols[:, i, j] = xp[:, :, i:ylim:stride, j:xlim:stride]
    return cols.reshape(c * kh * kw, n * oh * ow)


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    if cols.shape != (c * kh * kw, n * oh * ow):
        raise ValueError("col2im: column buffer shape does not match image shape")
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        ylim = i + stride * oh
        for j in range(kw):
            xlim = j + stride * ow
            xp[:, :, i:ylim:stride, j:xlim:stride] += cols[:, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3).copy()
