"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops or direct formula
evaluation, deliberately avoiding the package's vectorized code paths.
"""
import math

import numpy as np


def central_difference(f, arrays, index, coord, h=1e-5):
    """d f / d arrays[index][coord] by central differences (arrays mutated and restored)."""
    a = arrays[index]
    old = a[coord]
    a[coord] = old + h
    fp = f()
    a[coord] = old - h
    fm = f()
    a[coord] = old
    return (fp - fm) / (2.0 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def conv2d_loop(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for b in range(n):
        for o in range(f):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                iy, ix = y * stride + i - pad, xx * stride + j - pad
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += x[b, ch, iy, ix] * w[o, ch, i, j]
                    out[b, o, y, xx] = acc
    return out


def q_sample_scalar(z0, r, xi, alpha_bars):
    ab = alpha_bars[r]
    return [math.sqrt(ab) * a + math.sqrt(1.0 - ab) * e for a, e in zip(z0, xi)]


def sigma_scalar(ab_r, ab_prev):
    return math.sqrt((1.0 - ab_prev) / (1.0 - ab_r) * (1.0 - ab_r / ab_prev))


def ddim_step_scalar(eps, z, ab_r, ab_prev, noise):
    sig = sigma_scalar(ab_r, ab_prev) if ab_r < 1.0 else 0.0
    out = []
    for e, zz, nz in zip(eps, z, noise):
        z_tilde = (zz - math.sqrt(1.0 - ab_r) * e) / math.sqrt(ab_r)
        z_dir = math.sqrt(max(1.0 - ab_prev - sig * sig, 0.0)) * e
        out.append(math.sqrt(ab_prev) * z_tilde + z_dir + sig * nz)
    return out


def psnr_scalar(a, b, max_val=1.0):
    flat_a, flat_b = list(np.asarray(a, dtype=float).ravel()), list(np.asarray(b, dtype=float).ravel())
    mse = sum((p - q) ** 2 for p, q in zip(flat_a, flat_b)) / len(flat_a)
    if mse == 0.0:
        return 99.0
    return 10.0 * math.log10(max_val * max_val / mse)


def ssim_scalar(a, b, win=11, sigma=1.5, data_range=1.0):
    """Single-scale SSIM by explicit loops over every valid window position."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = win // 2
    g = [math.exp(-((i - half) ** 2) / (2 * sigma * sigma)) for i in range(win)]
    total = sum(g)
    g = [v / total for v in g]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    h, w = a.shape
    vals = []
    for y in range(h - win + 1):
        for x in range(w - win + 1):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(win):
                for j in range(win):
                    wt = g[i] * g[j]
                    p, q = a[y + i, x + j], b[y + i, x + j]
                    mx += wt * p
                    my += wt * q
                    sxx += wt * p * p
                    syy += wt * q * q
                    sxy += wt * p * q
            vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)
