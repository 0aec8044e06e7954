"""Pure-numpy reference kernels."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kernel, stride, out_spatial):
    """Gather patches of a padded (B, C, S, H, W) array into columns.

    Rows are ordered (c, ks, kh, kw), columns (b, s, h, w).
    """
    B, C = xp.shape[:2]
    So, Ho, Wo = out_spatial
    ss, sh, sw = stride
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    win = win[:, :, : (So - 1) * ss + 1 : ss, : (Ho - 1) * sh + 1 : sh, : (Wo - 1) * sw + 1 : sw]
    # (B, C, So, Ho, Wo, ks, kh, kw) -> (C, ks, kh, kw, B, So, Ho, Wo)
    cols = np.ascontiguousarray(win.transpose(1, 5, 6, 7, 0, 2, 3, 4))
    return cols.reshape(C * kernel[0] * kernel[1] * kernel[2], B * So * Ho * Wo)


def col2im(cols, padded_shape, kernel, stride, out_spatial):
    """Scatter-add columns back into a zero array of ``padded_shape``."""
    B, C = padded_shape[:2]
    ks, kh, kw = kernel
    ss, sh, sw = stride
    So, Ho, Wo = out_spatial
    out = np.zeros(padded_shape, dtype=cols.dtype)
    c6 = cols.reshape(C, ks, kh, kw, B, So, Ho, Wo)
    for a in range(ks):
        for b in range(kh):
            for c in range(kw):
                out[:, :, a : a + (So - 1) * ss + 1 : ss,
                    b : b + (Ho - 1) * sh + 1 : sh,
                    c : c + (Wo - 1) * sw + 1 : sw] += c6[:, a, b, c].transpose(1, 0, 2, 3, 4)
    return out


def instance_stats(rows):
    """Per-row mean and biased variance, accumulated in float64."""
    mean = rows.mean(axis=1, dtype=np.float64)
    centered = rows - mean[:, None]
    var = np.einsum("ij,ij->i", centered, centered, dtype=np.float64) / rows.shape[1]
    return mean, var


def min_distances(a, b):
    """Exact nearest-neighbour Euclidean distance from each row of ``a`` to the set ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(len(a))
    if len(b) == 0:
        out[:] = np.inf
        return out
    # difference form (not the |a|^2 - 2ab expansion) keeps integer-grid distances exact
    chunk = max(1, (1 << 18) // len(b))
    for start in range(0, len(a), chunk):
        blk = a[start : start + chunk]
        d2 = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        out[start : start + chunk] = np.sqrt(d2.min(axis=1))
    return out
