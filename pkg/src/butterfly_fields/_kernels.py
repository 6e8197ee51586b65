"""Compiled inner loops of the decoder."""
import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def splat_gaussians(out, cls, tx, ty, amp, sx, sy, rx, ry):
    """Add truncated separable Gaussians into ``out`` of shape (C, H, W).

    Pixel (y, x) is evaluated at its center ``(x + 0.5, y + 0.5)``. Each vote
    is evaluated on the pixels whose centers lie within ``rx``/``ry`` of its
    target. Votes are added in input order.
    """
    H = out.shape[1]
    W = out.shape[2]
    gx = np.empty(W)
    for n in range(tx.shape[0]):
        x_lo = max(int(math.ceil(tx[n] - rx[n] - 0.5)), 0)
        x_hi = min(int(math.floor(tx[n] + rx[n] - 0.5)), W - 1)
        y_lo = max(int(math.ceil(ty[n] - ry[n] - 0.5)), 0)
        y_hi = min(int(math.floor(ty[n] + ry[n] - 0.5)), H - 1)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        inv_x = 1.0 / sx[n]
        inv_y = 1.0 / sy[n]
        for x in range(x_lo, x_hi + 1):
            d = (x + 0.5 - tx[n]) * inv_x
            gx[x] = math.exp(-0.5 * d * d)
        c = cls[n]
        a = amp[n]
        for y in range(y_lo, y_hi + 1):
            d = (y + 0.5 - ty[n]) * inv_y
            gy = a * math.exp(-0.5 * d * d)
            row = out[c, y]
            for x in range(x_lo, x_hi + 1):
                row[x] += gy * gx[x]
    return out


@njit(cache=True, nogil=True)
def local_maxima(plane, threshold, radius):
    """Pixels >= threshold (and > 0) that beat every neighbour in a square window.

    A neighbour with an equal value wins when it comes first in raster order,
    so plateaus yield their smallest ``(y, x)`` pixel only.
    """
    H, W = plane.shape
    ys = []
    xs = []
    for y in range(H):
        for x in range(W):
            v = plane[y, x]
            if v < threshold or v <= 0.0:
                continue
            peak = True
            for ny in range(max(y - radius, 0), min(y + radius + 1, H)):
                for nx in range(max(x - radius, 0), min(x + radius + 1, W)):
                    u = plane[ny, nx]
                    if u > v or (u == v and (ny < y or (ny == y and nx < x))):
                        peak = False
                        break
                if not peak:
                    break
            if peak:
                ys.append(y)
                xs.append(x)
    return np.array(ys, dtype=np.int64), np.array(xs, dtype=np.int64)
