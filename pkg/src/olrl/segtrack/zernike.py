"""Zernike moment magnitudes of binary masks."""
from __future__ import annotations

from math import factorial

import numpy as np

MAX_ORDER = 8
ORDERS = [(n, m) for n in range(MAX_ORDER + 1) for m in range(n + 1) if (n - m) % 2 == 0]


def _radial_coeffs(n, m):
    out = []
    for k in range((n - m) // 2 + 1):
        c = (-1) ** k * factorial(n - k) / (
            factorial(k) * factorial((n + m) // 2 - k) * factorial((n - m) // 2 - k)
        )
        out.append((n - 2 * k, c))
    return out


_COEFFS = {nm: _radial_coeffs(*nm) for nm in ORDERS}


def radial(n: int, m: int, rho: np.ndarray) -> np.ndarray:
    return sum(c * rho**p for p, c in _COEFFS[(n, m)])


def zernike_from_xy(xy: np.ndarray) -> np.ndarray:
    """|Z_nm| over a point set, mapped to the unit disc about its centroid."""
    xy = np.asarray(xy, dtype=float)
    d = xy - xy.mean(axis=0)
    r = np.hypot(d[:, 0], d[:, 1])
    r_max = max(float(r.max()), 1.0)
    rho = r / r_max
    theta = np.arctan2(d[:, 1], d[:, 0])
    area = 1.0 / (r_max * r_max)
    out = np.empty(len(ORDERS))
    for i, (n, m) in enumerate(ORDERS):
        v = radial(n, m, rho) * np.exp(-1j * m * theta)
        out[i] = abs((n + 1) / np.pi * v.sum() * area)
    return out


def zernike_descriptor(mask) -> np.ndarray:
    """25 Zernike magnitudes (orders n <= 8) of a SegmentMask or boolean array."""
    if hasattr(mask, "point_cloud"):
        xy = mask.point_cloud[:, :2]
    else:
        rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
        xy = np.stack([cols, rows], axis=1)
    if len(xy) == 0:
        raise ValueError("zernike descriptor of an empty mask")
    return zernike_from_xy(xy)
