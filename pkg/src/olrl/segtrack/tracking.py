"""Greedy feature-based tracking of segments into tracklets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from ..trees import Constant, DecisionTree, depth_for
from .segment import SegmentMask

ZERNIKE_FLOOR = 1e-9
FEATURE_NAMES = ("disp", "shape", "perm", "size", "motion", "color")
MIN_CLASSIFIER_ROWS = 10
MAX_LOG = 400


@dataclass
class TrackWeights:
    """Weights of the tracking-error ensemble.

    ``w`` multiplies (disp, shape, disp*shape, perm, size, motion); ``w_color``
    multiplies the mean-color distance. The defaults make color the identity
    cue and keep the geometric terms as tie-breakers, so bodies that teleport
    (respawns, episode resets) keep their tracklet.
    """

    w: tuple = (0.005, 0.002, 0.0, 0.2, 0.1, 0.1)
    w_color: float = 0.02
    t_e: float = 2.5
    eps_motion: float = 1e-3

    def __post_init__(self):
        self.w = tuple(float(x) for x in self.w)
        if len(self.w) != 6 or min(self.w) < 0 or self.w_color < 0:
            raise ValueError("weights must be six non-negative values")
        if self.t_e <= 0:
            raise ValueError("t_e must be positive")
        if not 0 < self.eps_motion < 1:
            raise ValueError("eps_motion must lie in (0, 1)")


@dataclass
class Tracklet:
    id: int
    entries: list = field(default_factory=list)  # (t, SegmentMask)
    last_seen: int = -1
    moves_count: int = 0
    stays_count: int = 0
    # (features, label, other_tracklet_id); label 1 = not the same object
    negative_match_log: list = field(default_factory=list)

    @property
    def last(self) -> SegmentMask:
        if not self.entries:
            raise UsageError(f"tracklet {self.id} has no entries")
        return self.entries[-1][1]

    def append(self, t: int, seg: SegmentMask):
        if self.entries:
            if t <= self.entries[-1][0]:
                raise UsageError("tracklet entries must be strictly increasing in time")
            if np.array_equal(self.last.median, seg.median):
                self.stays_count += 1
            else:
                self.moves_count += 1
        self.entries.append((t, seg))
        self.last_seen = t


def motion_probability(tracklet: Tracklet, moved: bool) -> float:
    """Beta(1, 1) posterior predictive of the moved / not-moved outcome."""
    n = tracklet.moves_count + tracklet.stays_count
    k = tracklet.moves_count if moved else tracklet.stays_count
    return (k + 1.0) / (n + 2.0)


def _log_z(z):
    return np.log(np.maximum(z, ZERNIKE_FLOOR))


def tracking_features(tracklet: Tracklet, seg: SegmentMask, t_now: int,
                      weights: TrackWeights, neighbors=()) -> np.ndarray:
    """(F_disp, F_shape, F_perm, F_size, F_motion, F_color) for one pair."""
    last = tracklet.last
    f_disp = 0.0
    for nb in neighbors:
        d_new = np.linalg.norm(seg.median - nb.median)
        d_old = np.linalg.norm(last.median - nb.median)
        f_disp += abs(d_new - d_old)
    f_shape = float(np.abs(_log_z(last.zernike) - _log_z(seg.zernike)).sum())
    f_perm = float(t_now - tracklet.last_seen - 1)
    ratio = last.pixel_count / seg.pixel_count
    f_size = max(ratio, 1.0 / ratio) - 1.0
    moved = not np.array_equal(last.median, seg.median)
    f_motion = -np.log(max(motion_probability(tracklet, moved), weights.eps_motion))
    f_color = float(np.linalg.norm(last.mean_color - seg.mean_color))
    return np.array([f_disp, f_shape, f_perm, f_size, f_motion, f_color])


def combine(features: np.ndarray, weights: TrackWeights) -> np.ndarray:
    f = np.asarray(features, dtype=float)
    w = weights.w
    return (w[0] * f[..., 0] + w[1] * f[..., 1] + w[2] * f[..., 0] * f[..., 1]
            + w[3] * f[..., 2] + w[4] * f[..., 3] + w[5] * f[..., 4]
            + weights.w_color * f[..., 5])


def tracking_error(tracklet: Tracklet, seg: SegmentMask, t_now: int,
                   weights: TrackWeights, neighbors=()) -> float:
    if not tracklet.entries:
        raise UsageError(f"tracklet {tracklet.id} has no entries")
    return float(combine(tracking_features(tracklet, seg, t_now, weights, neighbors), weights))


class TrackClassifier:
    """Scores 1 - P(same object) from tracking features."""

    def __init__(self, model):
        self.model = model

    def score(self, features) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=float))
        return self.model.predict_proba(X)[:, 1]


def fit_track_classifier(tracklet: Tracklet, promoted_positives=()) -> TrackClassifier:
    X = [f for f, label, _ in tracklet.negative_match_log if label == 1]
    y = [1] * len(X)
    for f in promoted_positives:
        X.append(f)
        y.append(0)
    if len(X) < MIN_CLASSIFIER_ROWS:
        return TrackClassifier(Constant([0.5, 0.5]))
    X = np.asarray(X, dtype=float)
    tree = DecisionTree("classifier", 2, max_depth=depth_for(len(X)), alpha=1.0)
    return TrackClassifier(tree.fit(X, np.asarray(y)))


def greedy_assign(errors, tracklet_ids, t_e: float) -> list[tuple[int, int]]:
    """Row/column pairs taken in order of lowest error while it is <= ``t_e``.

    Ties go to the lower tracklet id, then the lower segment index.
    """
    errors = np.asarray(errors, dtype=float)
    n_l, n_s = errors.shape if errors.size else (len(tracklet_ids), 0)
    order = sorted((errors[i, j], tracklet_ids[i], j, i) for i in range(n_l) for j in range(n_s)
                   if errors[i, j] <= t_e)
    used_l, used_s, out = set(), set(), []
    for _, _, j, i in order:
        if i in used_l or j in used_s:
            continue
        used_l.add(i)
        used_s.add(j)
        out.append((i, j))
    return out


def match(tracklets, segments, t_now, weights: TrackWeights, learned=None,
          neighbors=None, next_id=None, log_negatives=True):
    """Greedily assign segments to tracklets; unmatched segments start tracklets.

    ``tracklets`` is a list of Tracklet (mutated in place); ``learned`` maps
    tracklet id to a TrackClassifier. ``neighbors[j]`` lists the segments
    touching segment j. Returns ``(assignments, new_tracklets)`` where
    assignments are ``(tracklet_id, segment_index)`` pairs.
    """
    learned = learned or {}
    if neighbors is None:
        neighbors = [[] for _ in segments]
    n_l, n_s = len(tracklets), len(segments)
    feats = np.zeros((n_l, n_s, 6))
    errors = np.full((n_l, n_s), np.inf)
    for i, tr in enumerate(tracklets):
        for j, seg in enumerate(segments):
            feats[i, j] = tracking_features(tr, seg, t_now, weights, neighbors[j])
        errors[i] = combine(feats[i], weights)
        clf = learned.get(tr.id)
        if clf is not None and n_s:
            errors[i] = np.maximum(errors[i], clf.score(feats[i]))
    pairs = greedy_assign(errors, [tr.id for tr in tracklets], weights.t_e)
    assignments = [(tracklets[i].id, j) for i, j in pairs]
    used_s = {j for _, j in pairs}
    seg_owner = {j: tid for tid, j in assignments}
    if next_id is None:
        next_id = max((tr.id for tr in tracklets), default=-1) + 1
    new_tracklets = []
    for j in range(n_s):
        if j not in used_s:
            tr = Tracklet(id=next_id)
            next_id += 1
            tr.append(t_now, segments[j])
            new_tracklets.append(tr)
            seg_owner[j] = tr.id
    if log_negatives:
        for i, tr in enumerate(tracklets):
            for j in range(n_s):
                if seg_owner.get(j) != tr.id and errors[i, j] < 4 * weights.t_e:
                    tr.negative_match_log.append((feats[i, j].copy(), 1, seg_owner[j]))
            if len(tr.negative_match_log) > MAX_LOG:
                del tr.negative_match_log[: len(tr.negative_match_log) - MAX_LOG]
    by_id = {tr.id: tr for tr in tracklets}
    for tid, j in assignments:
        by_id[tid].append(t_now, segments[j])
    assignments.sort()
    return assignments, new_tracklets


def segment_neighbors(labels: np.ndarray, radius: int = 1) -> list[list[int]]:
    """Indices of segments within Chebyshev ``radius`` of each segment.

    Negative labels mark untracked pixels and are ignored.
    """
    n = int(labels.max()) + 1
    pairs = set()
    h, w = labels.shape
    for dy in range(-radius, radius + 1):
        for dx in range(0, radius + 1):
            if dx == 0 and dy <= 0:
                continue
            y0, y1 = max(0, -dy), h - max(0, dy)
            a = labels[y0:y1, 0:w - dx]
            b = labels[y0 + dy:y1 + dy, dx:w]
            diff = (a != b) & (a >= 0) & (b >= 0)
            for p, q in set(zip(a[diff].tolist(), b[diff].tolist())):
                pairs.add((min(p, q), max(p, q)))
    out = [[] for _ in range(n)]
    for p, q in sorted(pairs):
        out[p].append(q)
        out[q].append(p)
    return out


class Tracker:
    """Streams frames into tracklets.

    Tracklets not seen within ``max_gap`` frames are no longer candidates:
    past that gap the permanence term alone exceeds the match threshold.
    """

    def __init__(self, weights: TrackWeights | None = None, max_gap: int | None = None):
        self.weights = weights or TrackWeights()
        w_perm = self.weights.w[3]
        if max_gap is None:
            max_gap = int(self.weights.t_e / w_perm) + 1 if w_perm > 0 else 50
        self.max_gap = max_gap
        self.tracklets: dict[int, Tracklet] = {}
        self.classifiers: dict[int, TrackClassifier] = {}
        self.next_id = 0

    def active(self, t_now: int) -> list[Tracklet]:
        return [tr for tr in self.tracklets.values() if t_now - tr.last_seen - 1 <= self.max_gap]

    def update(self, t_now: int, segments, labels=None):
        """Match one frame; returns the tracklet id of every segment."""
        neighbors = segment_neighbors(labels) if labels is not None else None
        if neighbors is not None:
            neighbors = [[segments[k] for k in nb] for nb in neighbors]
        cands = sorted(self.active(t_now), key=lambda tr: tr.id)
        assignments, new = match(cands, segments, t_now, self.weights, self.classifiers,
                                 neighbors, next_id=self.next_id)
        for tr in new:
            self.tracklets[tr.id] = tr
        self.next_id += len(new)
        owner = [None] * len(segments)
        for tid, j in assignments:
            owner[j] = tid
        unmatched = [j for j in range(len(segments)) if owner[j] is None]
        for j, tr in zip(unmatched, new):
            owner[j] = tr.id
        return owner

    def promote(self, same_track: dict[int, int]):
        """Relabel logged negatives whose segment went to a tracklet now in the same track."""
        for tr in self.tracklets.values():
            k = same_track.get(tr.id)
            for n, (f, label, other) in enumerate(tr.negative_match_log):
                if label == 1 and k is not None and same_track.get(other) == k:
                    tr.negative_match_log[n] = (f, 0, other)

    def refit_classifiers(self):
        for tr in self.tracklets.values():
            pos = [f for f, label, _ in tr.negative_match_log if label == 0]
            if pos:
                self.classifiers[tr.id] = fit_track_classifier(tr, pos)


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of the row-major flattened mask, starting with a 0-run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [len(flat)]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return runs


def rle_decode(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for r in runs:
        if val:
            flat[pos:pos + r] = True
        pos += r
        val = not val
    return flat.reshape(shape)


def write_tracklet_archive(path, tracklets):
    with open(path, "w") as fh:
        for tr in sorted(tracklets, key=lambda tr: tr.id):
            for t, seg in tr.entries:
                fh.write(json.dumps({"tracklet_id": tr.id, "t": int(t),
                                     "shape": list(seg.mask.shape),
                                     "rle": rle_encode(seg.mask)}) + "\n")


def read_tracklet_archive(path) -> dict[int, list[tuple[int, np.ndarray]]]:
    out: dict[int, list] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.setdefault(rec["tracklet_id"], []).append(
                (rec["t"], rle_decode(rec["rle"], tuple(rec["shape"]))))
    return out
