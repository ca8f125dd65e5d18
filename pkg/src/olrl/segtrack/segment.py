"""Graph-based oversegmentation (Felzenszwalb & Huttenlocher, 2004)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage

DEPTH_SCALE = 255.0

# scale 1000 / sigma 0 are the oversegmenting settings for this pipeline;
# min_size 1 disables the small-component pass so slivers never get fused
# across an occlusion boundary
DEFAULT_SCALE = 1000.0
DEFAULT_SIGMA = 0.0
DEFAULT_MIN_SIZE = 1


@dataclass(eq=False)
class SegmentMask:
    """One segment of a frame. Coordinates are (x, y) = (column, row)."""

    mask: np.ndarray
    pixel_count: int
    point_cloud: np.ndarray  # (N, 3): x, y, depth
    centroid: np.ndarray
    median: np.ndarray
    mean_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _zernike: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_mask(cls, mask: np.ndarray, frame: np.ndarray | None = None) -> "SegmentMask":
        mask = np.asarray(mask, dtype=bool)
        rows, cols = np.nonzero(mask)
        if len(rows) == 0:
            raise ValueError("empty segment mask")
        xy = np.stack([cols, rows], axis=1).astype(float)
        if frame is not None:
            depth = frame[rows, cols, 3]
            color = frame[rows, cols, :3].mean(axis=0)
        else:
            depth = np.ones(len(rows))
            color = np.zeros(3)
        return cls(
            mask=mask,
            pixel_count=int(len(rows)),
            point_cloud=np.column_stack([xy, depth]),
            centroid=xy.mean(axis=0),
            median=np.median(xy, axis=0),
            mean_color=color,
        )

    @property
    def xy(self) -> np.ndarray:
        return self.point_cloud[:, :2]

    @property
    def zernike(self) -> np.ndarray:
        if self._zernike is None:
            from .zernike import zernike_descriptor

            self._zernike = zernike_descriptor(self)
        return self._zernike


@numba.njit(cache=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@numba.njit(cache=True)
def _segment_graph(n, a, b, w, scale, min_size):
    parent = np.arange(n)
    rank = np.zeros(n, dtype=np.int64)
    size = np.ones(n, dtype=np.int64)
    thresh = np.full(n, scale)
    for k in range(len(w)):
        ra = _find(parent, a[k])
        rb = _find(parent, b[k])
        if ra == rb:
            continue
        if w[k] <= thresh[ra] and w[k] <= thresh[rb]:
            if rank[ra] < rank[rb]:
                ra, rb = rb, ra
            parent[rb] = ra
            size[ra] += size[rb]
            if rank[ra] == rank[rb]:
                rank[ra] += 1
            thresh[ra] = w[k] + scale / size[ra]
    if min_size > 1:
        # edges are still in ascending order, so a small component joins
        # the neighbor it shares its lowest-weight edge with
        for k in range(len(w)):
            ra = _find(parent, a[k])
            rb = _find(parent, b[k])
            if ra != rb and (size[ra] < min_size or size[rb] < min_size):
                if rank[ra] < rank[rb]:
                    ra, rb = rb, ra
                parent[rb] = ra
                size[ra] += size[rb]
                if rank[ra] == rank[rb]:
                    rank[ra] += 1
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = _find(parent, i)
    return out


def _grid_edges(h, w):
    idx = np.arange(h * w).reshape(h, w)
    pairs = [
        (idx[:, :-1], idx[:, 1:]),
        (idx[:-1, :], idx[1:, :]),
        (idx[:-1, :-1], idx[1:, 1:]),
        (idx[:-1, 1:], idx[1:, :-1]),
    ]
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    return a, b


_EDGE_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def segment_labels(frame: np.ndarray, scale: float = DEFAULT_SCALE, sigma: float = DEFAULT_SIGMA,
                   min_size: int = DEFAULT_MIN_SIZE) -> np.ndarray:
    """Label image with components numbered in raster order of first pixel."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    h, w = frame.shape[:2]
    feat = np.asarray(frame, dtype=float).copy()
    feat[..., 3] *= DEPTH_SCALE
    if sigma > 0:
        for c in range(4):
            feat[..., c] = ndimage.gaussian_filter(feat[..., c], sigma)
    if (h, w) not in _EDGE_CACHE:
        _EDGE_CACHE[(h, w)] = _grid_edges(h, w)
    a, b = _EDGE_CACHE[(h, w)]
    flat = feat.reshape(-1, 4)
    weight = np.sqrt(((flat[a] - flat[b]) ** 2).sum(axis=1))
    order = np.argsort(weight, kind="stable")
    roots = _segment_graph(h * w, a[order], b[order], weight[order], float(scale), int(min_size))
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse].reshape(h, w)


def masks_from_labels(labels: np.ndarray, frame: np.ndarray | None = None) -> list[SegmentMask]:
    out = []
    for k in range(int(labels.max()) + 1):
        out.append(SegmentMask.from_mask(labels == k, frame))
    return out


def segment(frame: np.ndarray, scale: float = DEFAULT_SCALE, sigma: float = DEFAULT_SIGMA,
            min_size: int = DEFAULT_MIN_SIZE) -> list[SegmentMask]:
    """Oversegment an RGBD frame into a partition of its pixels."""
    return masks_from_labels(segment_labels(frame, scale, sigma, min_size), frame)
