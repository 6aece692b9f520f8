"""Pure numpy versions of the hot kernels.

Layouts are channel-last: a padded volume is ``(D, H, W, C)`` and a column
matrix is ``(Do*Ho*Wo, kd*kh*kw*C)`` with the channel index fastest.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kd, kh, kw, sd, sh, sw):
    win = sliding_window_view(x, (kd, kh, kw), axis=(0, 1, 2))
    win = win[::sd, ::sh, ::sw]
    do, ho, wo = win.shape[:3]
    # (Do, Ho, Wo, C, kd, kh, kw) -> (Do, Ho, Wo, kd, kh, kw, C)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 6, 3))
    return cols.reshape(do * ho * wo, -1)


def col2im(cols, dp, hp, wp, c, kd, kh, kw, sd, sh, sw):
    do = (dp - kd) // sd + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    out = np.zeros((dp, hp, wp, c), dtype=cols.dtype)
    g = cols.reshape(do, ho, wo, kd, kh, kw, c)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                out[a:a + sd * (do - 1) + 1:sd,
                    b:b + sh * (ho - 1) + 1:sh,
                    e:e + sw * (wo - 1) + 1:sw] += g[:, :, :, a, b, e, :]
    return out


def nearest_sq_dists(a, b, chunk=2048):
    """For each row of ``a``, the squared distance to its closest row of ``b``."""
    out = np.empty(len(a), dtype=np.float64)
    bb = (b * b).sum(1)
    for s in range(0, len(a), chunk):
        blk = a[s:s + chunk]
        d = (blk * blk).sum(1)[:, None] + bb[None, :] - 2.0 * blk @ b.T
        out[s:s + chunk] = np.maximum(d.min(1), 0.0)
    return out
