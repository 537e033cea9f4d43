"""Slow, obviously-correct reference implementations used by the tests.

Nothing here imports the code under test.
"""

import itertools
import math

import numpy as np


def voxel_set(mask):
    return {tuple(int(v) for v in idx) for idx in np.argwhere(mask)}


def dice_bruteforce(pred, gt):
    p, g = voxel_set(pred), voxel_set(gt)
    if not p and not g:
        return 1.0
    return 2 * len(p & g) / (len(p) + len(g))


def sensitivity_bruteforce(pred, gt):
    p, g = voxel_set(pred), voxel_set(gt)
    if not g:
        return 1.0 if not p else 0.0
    return len(p & g) / len(g)


def boundary_bruteforce(mask):
    """Voxels in ``mask`` with a face neighbour outside it, checked one by one."""
    mask = np.asarray(mask, dtype=bool)
    out = []
    shape = mask.shape
    offsets = []
    for axis in range(mask.ndim):
        for step in (-1, 1):
            o = [0] * mask.ndim
            o[axis] = step
            offsets.append(o)
    for idx in np.argwhere(mask):
        for o in offsets:
            n = idx + o
            if any(c < 0 or c >= s for c, s in zip(n, shape)) or not mask[tuple(n)]:
                out.append(idx)
                break
    return np.array(out, dtype=np.float64).reshape(-1, mask.ndim)


def percentile_linear(values, q):
    """Linear-interpolation percentile written out by hand."""
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def hausdorff95_bruteforce(pred, gt, spacing):
    p_any, g_any = np.any(pred), np.any(gt)
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        return None
    bp = boundary_bruteforce(pred) * np.asarray(spacing)
    bg = boundary_bruteforce(gt) * np.asarray(spacing)
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    return max(percentile_linear(d.min(axis=1), 95), percentile_linear(d.min(axis=0), 95))


def soft_dice_numpy(p, q, eps=1e-6):
    return 1 - (2 * np.sum(p * q) + eps) / (np.sum(p * p) + np.sum(q * q) + eps)


def focal_numpy(p, q, alpha, gamma, clamp=1e-7):
    p = np.clip(p, clamp, 1 - clamp)
    pt = np.where(q > 0.5, p, 1 - p)
    at = np.where(q > 0.5, alpha, 1 - alpha)
    return np.mean(-at * (1 - pt) ** gamma * np.log(pt))


def weighted_bce_numpy(p, q, alpha):
    return np.mean(-(alpha * q * np.log(p) + (1 - alpha) * (1 - q) * np.log(1 - p)))


def central_difference(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in itertools.product(*(range(s) for s in x.shape)):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def max_pairwise(points):
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    return float(np.sqrt(((points[:, None] - points[None]) ** 2).sum(-1)).max())


def digital_ball(radius, pad=2):
    n = 2 * radius + 1 + 2 * pad
    g = np.indices((n, n, n)) - n // 2
    return (g**2).sum(0) <= radius * radius
