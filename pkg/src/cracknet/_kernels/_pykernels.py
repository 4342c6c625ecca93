"""Pure numpy implementations of the hot kernels.

These are the reference versions; the compiled module must agree with them
bit for bit on float64 inputs.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, kh, kw, stride, ho, wo):
    """Gather sliding patches of a padded NHWC array.

    Returns an array of shape ``(B*ho*wo, kh*kw*C)`` whose column order is
    ``(ky, kx, c)``.
    """
    xp = np.ascontiguousarray(xp)
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(b, ho, wo, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return view.reshape(b * ho * wo, kh * kw * c)


def col2im(cols, b, hp, wp, c, kh, kw, stride, ho, wo):
    """Scatter-add patch gradients back onto a padded NHWC array."""
    cols = cols.reshape(b, ho, wo, kh, kw, c)
    out = np.zeros((b, hp, wp, c), dtype=cols.dtype)
    he = stride * (ho - 1) + 1
    we = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + he:stride, j:j + we:stride, :] += cols[:, :, :, i, j, :]
    return out


def lovasz_grad(gt_sorted):
    """Increments of the Jaccard loss along a sorted ground-truth sequence."""
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    n = gt_sorted.shape[0]
    if n == 0:
        return gt_sorted.copy()
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard
