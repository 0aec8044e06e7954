"""numba-compiled kernels mirroring ``_numpy`` one-for-one."""

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col(xp, ks, kh, kw, ss, sh, sw, So, Ho, Wo, cols):
    B, C = xp.shape[0], xp.shape[1]
    ncol = So * Ho * Wo
    for c in range(C):
        for a in range(ks):
            for p in range(kh):
                for q in range(kw):
                    row = ((c * ks + a) * kh + p) * kw + q
                    for b in range(B):
                        base = b * ncol
                        for s in range(So):
                            si = s * ss + a
                            for h in range(Ho):
                                hi = h * sh + p
                                off = base + (s * Ho + h) * Wo
                                for w in range(Wo):
                                    cols[row, off + w] = xp[b, c, si, hi, w * sw + q]


@njit(cache=True)
def _col2im(cols, ks, kh, kw, ss, sh, sw, So, Ho, Wo, out):
    B, C = out.shape[0], out.shape[1]
    ncol = So * Ho * Wo
    for c in range(C):
        for a in range(ks):
            for p in range(kh):
                for q in range(kw):
                    row = ((c * ks + a) * kh + p) * kw + q
                    for b in range(B):
                        base = b * ncol
                        for s in range(So):
                            si = s * ss + a
                            for h in range(Ho):
                                hi = h * sh + p
                                off = base + (s * Ho + h) * Wo
                                for w in range(Wo):
                                    out[b, c, si, hi, w * sw + q] += cols[row, off + w]


@njit(cache=True)
def _instance_stats(rows, mean, var):
    n, m = rows.shape
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += rows[i, j]
        mu = acc / m
        sq = 0.0
        for j in range(m):
            d = rows[i, j] - mu
            sq += d * d
        mean[i] = mu
        var[i] = sq / m


@njit(cache=True)
def _min_distances(a, b, out):
    for i in range(a.shape[0]):
        best = np.inf
        for j in range(b.shape[0]):
            d = 0.0
            for k in range(a.shape[1]):
                t = a[i, k] - b[j, k]
                d += t * t
            if d < best:
                best = d
        out[i] = np.sqrt(best)


def im2col(xp, kernel, stride, out_spatial):
    B, C = xp.shape[:2]
    So, Ho, Wo = out_spatial
    cols = np.empty((C * kernel[0] * kernel[1] * kernel[2], B * So * Ho * Wo), dtype=xp.dtype)
    _im2col(np.ascontiguousarray(xp), *kernel, *stride, So, Ho, Wo, cols)
    return cols


def col2im(cols, padded_shape, kernel, stride, out_spatial):
    out = np.zeros(padded_shape, dtype=cols.dtype)
    _col2im(np.ascontiguousarray(cols), *kernel, *stride, *out_spatial, out)
    return out


def instance_stats(rows):
    mean = np.empty(rows.shape[0])
    var = np.empty(rows.shape[0])
    _instance_stats(np.ascontiguousarray(rows), mean, var)
    return mean, var


def min_distances(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty(len(a))
    if len(b) == 0:
        out[:] = np.inf
        return out
    _min_distances(a, b, out)
    return out
