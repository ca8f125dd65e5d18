"""Depth-limited CART trees with vectorized split search.

Classifier leaves hold Laplace-smoothed categorical distributions over a
fixed class grid; regressor leaves hold the mean target. Splits are axis
aligned (``x[f] <= thr`` goes left) and chosen greedily by information gain
or variance reduction.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

_EPS_GAIN = 1e-12


def depth_for(n_rows: int) -> int:
    """Maximum depth ``max(2, min(6, n // 50))``."""
    return max(2, min(6, int(n_rows) // 50))


def _entropy_rows(counts, totals):
    # counts (..., C), totals (...,)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = counts / totals[..., None]
        h = -np.where(counts > 0, p * np.log(p), 0.0).sum(axis=-1)
    return np.where(totals > 0, h, 0.0)


class DecisionTree:
    """A single tree stored as flat node arrays.

    ``feature[i] == -1`` marks a leaf; its payload is ``value[i]`` (a
    distribution row for classifiers, a length-1 row for regressors).
    """

    def __init__(self, kind: str = "classifier", n_classes: int | None = None,
                 max_depth: int = 6, min_leaf: int = 5, alpha: float = 1.0):
        if kind not in ("classifier", "regressor"):
            raise ValueError(kind)
        if kind == "classifier" and not n_classes:
            raise ValueError("classifier needs n_classes")
        self.kind = kind
        self.n_classes = int(n_classes) if n_classes else 1
        self.max_depth = int(max_depth)
        self.min_leaf = int(min_leaf)
        self.alpha = float(alpha)
        self.feature = np.zeros(0, dtype=np.int64)
        self.threshold = np.zeros(0)
        self.left = np.zeros(0, dtype=np.int64)
        self.right = np.zeros(0, dtype=np.int64)
        self.value = np.zeros((0, self.n_classes))
        self.n_samples = np.zeros(0, dtype=np.int64)

    # -- fitting -----------------------------------------------------------
    def fit(self, X, y) -> "DecisionTree":
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or len(X) == 0:
            raise ValueError("X must be a non-empty 2-D array")
        if self.kind == "classifier":
            y = np.asarray(y, dtype=np.int64)
            if y.min() < 0 or y.max() >= self.n_classes:
                raise ValueError("class index out of range")
        else:
            y = np.asarray(y, dtype=float)
        feats, thrs, lefts, rights, vals, ns = [], [], [], [], [], []

        def leaf_payload(idx):
            if self.kind == "classifier":
                counts = np.bincount(y[idx], minlength=self.n_classes).astype(float)
                return (counts + self.alpha) / (len(idx) + self.alpha * self.n_classes)
            return np.array([y[idx].mean()])

        def grow(idx, depth):
            node = len(feats)
            feats.append(-1)
            thrs.append(0.0)
            lefts.append(-1)
            rights.append(-1)
            vals.append(leaf_payload(idx))
            ns.append(len(idx))
            if depth >= self.max_depth or len(idx) < 2 * self.min_leaf:
                return node
            split = self._best_split(X[idx], y[idx])
            if split is None:
                return node
            f, thr = split
            go_left = X[idx, f] <= thr
            feats[node] = f
            thrs[node] = thr
            lefts[node] = grow(idx[go_left], depth + 1)
            rights[node] = grow(idx[~go_left], depth + 1)
            return node

        grow(np.arange(len(X)), 0)
        self.feature = np.array(feats, dtype=np.int64)
        self.threshold = np.array(thrs, dtype=float)
        self.left = np.array(lefts, dtype=np.int64)
        self.right = np.array(rights, dtype=np.int64)
        self.value = np.array(vals, dtype=float)
        self.n_samples = np.array(ns, dtype=np.int64)
        return self

    def _best_split(self, Xn, yn):
        n, n_feat = Xn.shape
        m = self.min_leaf
        order = np.argsort(Xn, axis=0, kind="stable")
        xs = np.take_along_axis(Xn, order, axis=0)
        # a split after sorted position i puts rows 0..i on the left
        pos = np.arange(n - 1)
        valid = (xs[1:] > xs[:-1]) & (pos[:, None] >= m - 1) & (pos[:, None] <= n - m - 1)
        if not valid.any():
            return None
        n_left = (pos + 1).astype(float)[:, None]
        n_right = n - n_left
        if self.kind == "classifier":
            classes, yc = np.unique(yn, return_inverse=True)
            if len(classes) < 2:
                return None
            onehot = np.eye(len(classes))[yc]
            cum = np.cumsum(onehot[order], axis=0)[:-1]  # (n-1, F, C)
            total = onehot.sum(axis=0)
            right = total - cum
            parent = _entropy_rows(total[None, :], np.array([float(n)]))[0] * n
            cost = (_entropy_rows(cum, np.broadcast_to(n_left, cum.shape[:2])) * n_left
                    + _entropy_rows(right, np.broadcast_to(n_right, right.shape[:2])) * n_right)
        else:
            ys = yn[order]
            c1 = np.cumsum(ys, axis=0)[:-1]
            c2 = np.cumsum(ys * ys, axis=0)[:-1]
            t1, t2 = yn.sum(), (yn * yn).sum()
            parent = t2 - t1 * t1 / n
            sse_l = c2 - c1 * c1 / n_left
            sse_r = (t2 - c2) - (t1 - c1) ** 2 / n_right
            cost = sse_l + sse_r
        cost = np.where(valid, cost, np.inf)
        flat = int(np.argmin(cost.T))  # feature-major: lowest feature index wins ties
        f, i = divmod(flat, n - 1)
        best = cost[i, f]
        if not np.isfinite(best) or parent - best <= _EPS_GAIN * max(1.0, abs(parent)):
            return None
        thr = 0.5 * (xs[i, f] + xs[i + 1, f])
        return int(f), float(thr)

    # -- prediction ----------------------------------------------------------
    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        for _ in range(self.max_depth + 1):
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            fi = np.where(internal, f, 0)
            go_left = X[rows, fi] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, nxt, node)
        return node

    def predict_proba(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def predict(self, X) -> np.ndarray:
        if self.kind == "regressor":
            return self.value[self.apply(X), 0]
        return np.argmax(self.predict_proba(X), axis=1)

    def depth(self) -> int:
        def d(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(d(self.left[i]), d(self.right[i]))

        return d(0) if len(self.feature) else 0

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        nodes = []
        for i in range(len(self.feature)):
            node = {"id": i}
            if self.feature[i] >= 0:
                node.update(feature=int(self.feature[i]), threshold=float(self.threshold[i]),
                            left=int(self.left[i]), right=int(self.right[i]))
            else:
                node["leaf"] = self.value[i].tolist()
            nodes.append(node)
        return {"kind": self.kind, "n_classes": self.n_classes, "max_depth": self.max_depth,
                "min_leaf": self.min_leaf, "alpha": self.alpha, "nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        t = cls(d["kind"], d["n_classes"] if d["kind"] == "classifier" else None,
                d["max_depth"], d["min_leaf"], d["alpha"])
        n = len(d["nodes"])
        width = t.n_classes if t.kind == "classifier" else 1
        t.feature = np.full(n, -1, dtype=np.int64)
        t.threshold = np.zeros(n)
        t.left = np.full(n, -1, dtype=np.int64)
        t.right = np.full(n, -1, dtype=np.int64)
        t.value = np.zeros((n, width))
        t.n_samples = np.zeros(n, dtype=np.int64)
        for node in d["nodes"]:
            i = node["id"]
            if "leaf" in node:
                t.value[i] = node["leaf"]
            else:
                t.feature[i] = node["feature"]
                t.threshold[i] = node["threshold"]
                t.left[i] = node["left"]
                t.right[i] = node["right"]
        return t


class Constant:
    """Input-independent predictor with the tree prediction interface."""

    def __init__(self, payload):
        self.payload = np.atleast_1d(np.asarray(payload, dtype=float))

    def predict_proba(self, X) -> np.ndarray:
        n = 1 if np.ndim(X) == 1 else len(X)
        return np.broadcast_to(self.payload, (n, len(self.payload))).copy()

    def predict(self, X) -> np.ndarray:
        if len(self.payload) == 1:
            n = 1 if np.ndim(X) == 1 else len(X)
            return np.full(n, self.payload[0])
        return np.argmax(self.predict_proba(X), axis=1)

    def to_dict(self) -> dict:
        return {"kind": "constant", "payload": self.payload.tolist()}


def model_from_dict(d: dict):
    if d["kind"] == "constant":
        return Constant(d["payload"])
    return DecisionTree.from_dict(d)


class FitCache:
    """Memoizes fits by a digest of their training data and settings.

    Fitting is deterministic, so reusing a tree grown on byte-identical data
    gives the same model a refit would. The objective relies on this to
    avoid refitting tracks a candidate merge does not touch.
    """

    def __init__(self, max_items: int = 4096):
        self.max_items = max_items
        self._store: OrderedDict[bytes, object] = OrderedDict()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(*parts) -> bytes:
        h = hashlib.blake2b(digest_size=20)
        for p in parts:
            if isinstance(p, np.ndarray):
                h.update(str(p.dtype).encode())
                h.update(str(p.shape).encode())
                h.update(np.ascontiguousarray(p).tobytes())
            else:
                h.update(repr(p).encode())
            h.update(b"|")
        return h.digest()

    def get_or_fit(self, key: bytes, fit):
        if key in self._store:
            self.hits += 1
            self._store.move_to_end(key)
            return self._store[key]
        self.misses += 1
        value = fit()
        self._store[key] = value
        if len(self._store) > self.max_items:
            self._store.popitem(last=False)
        return value

    def clear(self):
        self._store.clear()
