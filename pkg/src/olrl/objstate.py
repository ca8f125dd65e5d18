"""Object states from tracklets: positions, velocities, accelerations, contacts.

Positions are medians of a track's pixel cloud in (x, y) = (column, row)
pixel units. Velocities are clamped to +-30 px/step per dimension.

:class:`Archive` stores what perception saw, tracklet by tracklet, so that
:func:`build_table` can rebuild the whole history under any tracklet map.
The objective evaluates many candidate maps and relies on this.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from .segtrack import Tracker, TrackWeights, masks_from_labels, segment_labels, segment_neighbors
from .segtrack.segment import DEFAULT_MIN_SIZE, DEFAULT_SCALE, DEFAULT_SIGMA

VEL_LIMIT = 30
CONTACT_RADIUS = 2
MIN_TRACK_PIXELS = 5


# -- tracklet maps -------------------------------------------------------------
@dataclass
class TrackletMap:
    """Map from tracklet ids to compact track ids ``0..K-1``.

    Track ids are ordered by the smallest tracklet id they contain, so a map
    is fully determined by its partition of tracklets.
    """

    mapping: dict
    background_track: int | None = None

    @classmethod
    def from_groups(cls, groups, point_counts: dict | None = None) -> "TrackletMap":
        groups = sorted((sorted(g) for g in groups if len(g)), key=lambda g: g[0])
        mapping = {}
        for k, g in enumerate(groups):
            for tid in g:
                if tid in mapping:
                    raise ValueError(f"tracklet {tid} in two tracks")
                mapping[tid] = k
        tm = cls(mapping)
        if point_counts is not None:
            tm.background_track = tm._largest(point_counts)
        return tm

    @classmethod
    def identity(cls, tracklet_ids, point_counts: dict | None = None) -> "TrackletMap":
        return cls.from_groups([[t] for t in tracklet_ids], point_counts)

    def _largest(self, point_counts):
        totals = np.zeros(self.n_tracks)
        for tid, k in self.mapping.items():
            totals[k] += point_counts.get(tid, 0)
        return int(np.argmax(totals)) if len(totals) else None

    @property
    def n_tracks(self) -> int:
        return (max(self.mapping.values()) + 1) if self.mapping else 0

    def groups(self) -> list[list[int]]:
        out = [[] for _ in range(self.n_tracks)]
        for tid in sorted(self.mapping):
            out[self.mapping[tid]].append(tid)
        return out

    def merge(self, k1: int, k2: int, point_counts: dict | None = None) -> "TrackletMap":
        groups = self.groups()
        lo, hi = sorted((k1, k2))
        groups[lo] = groups[lo] + groups[hi]
        del groups[hi]
        return TrackletMap.from_groups(groups, point_counts)

    def extend(self, tracklet_ids, point_counts: dict | None = None) -> "TrackletMap":
        """Add unseen tracklets as singleton tracks."""
        groups = self.groups() + [[t] for t in tracklet_ids if t not in self.mapping]
        return TrackletMap.from_groups(groups, point_counts)

    def to_dict(self) -> dict:
        return {"groups": self.groups(), "background_track": self.background_track}


# -- per-timestep state -------------------------------------------------------
def _pairwise_diff(x):
    return x[None, :, :] - x[:, None, :]


@dataclass
class ObjectState:
    """Object-level state at one timestep.

    ``p_a``/``v_a``/``a_a`` are (K, 2); entries of absent tracks or missing
    history are NaN and flagged by ``present``/``v_ok``/``a_ok``. Relative
    quantities are dense antisymmetric (K, K, 2) arrays with
    ``p_r[i, j] = p_a[j] - p_a[i]``. ``clouds`` keeps each track's last
    observed pixels and ``disp`` how far the track has moved since, which is
    what predicted contacts are computed from.
    """

    t: int
    track_ids: list
    present: np.ndarray
    p_a: np.ndarray
    v_a: np.ndarray
    a_a: np.ndarray
    v_ok: np.ndarray
    a_ok: np.ndarray
    contacts: np.ndarray
    clouds: dict = field(default_factory=dict, repr=False)
    disp: np.ndarray | None = None
    contact_radius: int = CONTACT_RADIUS

    @property
    def n_tracks(self) -> int:
        return len(self.track_ids)

    @property
    def p_r(self):
        return _pairwise_diff(self.p_a)

    @property
    def v_r(self):
        return _pairwise_diff(self.v_a)

    @property
    def a_r(self):
        return _pairwise_diff(self.a_a)

    def contact_pairs(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.contacts, 1))
        return list(zip(i.tolist(), j.tolist()))


@dataclass
class Experience:
    state: ObjectState
    action: int
    reward: float
    next_state: ObjectState
    episode_id: int
    t: int

    def __post_init__(self):
        if self.next_state.t != self.state.t + 1:
            raise ValueError("next_state.t must equal state.t + 1")


def clamp_velocity(v):
    return np.clip(v, -VEL_LIMIT, VEL_LIMIT)


def _as_xy(cloud) -> np.ndarray:
    cloud = np.asarray(cloud)
    if cloud.dtype == bool and cloud.ndim == 2 and cloud.shape[1] != 2:
        rows, cols = np.nonzero(cloud)
        return np.stack([cols, rows], axis=1)
    return cloud[:, :2]


def compute_contacts(clouds, radius: int = CONTACT_RADIUS) -> np.ndarray:
    """Symmetric contact matrix: some pixels within Chebyshev ``radius``.

    ``clouds`` is a list (or dict, in key order) of integer (x, y) point
    clouds or boolean masks. The diagonal is False.
    """
    if isinstance(clouds, dict):
        clouds = [clouds[k] for k in clouds]
    pts = [np.asarray(_as_xy(c), dtype=np.int64) for c in clouds]
    n = len(pts)
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        if len(pts[i]) == 0:
            continue
        lo = pts[i].min(axis=0) - radius
        hi = pts[i].max(axis=0) + radius
        grid = np.zeros((hi[1] - lo[1] + 1, hi[0] - lo[0] + 1), dtype=bool)
        grid[pts[i][:, 1] - lo[1], pts[i][:, 0] - lo[0]] = True
        grid = ndimage.binary_dilation(grid, np.ones((2 * radius + 1,) * 2, dtype=bool))
        for j in range(i + 1, n):
            q = pts[j]
            if len(q) == 0:
                continue
            inside = np.all((q >= lo) & (q <= hi), axis=1)
            if inside.any():
                qi = q[inside]
                if grid[qi[:, 1] - lo[1], qi[:, 0] - lo[0]].any():
                    out[i, j] = out[j, i] = True
    return out


def contact_offsets(p_cloud, q_cloud, radius: int = CONTACT_RADIUS):
    """Relative shifts under which two clouds touch.

    Returns ``(origin, grid)``: translating ``p`` by ``d_p`` and ``q`` by
    ``d_q`` (integer pixels) puts them in contact iff
    ``grid[(d_p - d_q)[1] - origin[1], (d_p - d_q)[0] - origin[0]]``.
    """
    p = np.asarray(_as_xy(p_cloud), dtype=np.int64)
    q = np.asarray(_as_xy(q_cloud), dtype=np.int64)
    p_lo, p_hi = p.min(axis=0), p.max(axis=0)
    q_lo, q_hi = q.min(axis=0), q.max(axis=0)
    gp = np.zeros((p_hi[1] - p_lo[1] + 1, p_hi[0] - p_lo[0] + 1))
    gq = np.zeros((q_hi[1] - q_lo[1] + 1, q_hi[0] - q_lo[0] + 1))
    gp[p[:, 1] - p_lo[1], p[:, 0] - p_lo[0]] = 1.0
    gq[q[:, 1] - q_lo[1], q[:, 0] - q_lo[0]] = 1.0
    # overlap count for shift s = q - p, s ranges over [q_lo - p_hi, q_hi - p_lo]
    corr = signal.fftconvolve(gq, gp[::-1, ::-1]) > 0.5
    corr = np.pad(corr, radius)
    corr = ndimage.binary_dilation(corr, np.ones((2 * radius + 1,) * 2, dtype=bool))
    origin_s = q_lo - p_hi - radius
    # contact iff (d_p - d_q) = s for some touching shift s; same grid, same origin
    return origin_s, corr


def lookup_offsets(origin, grid, delta) -> np.ndarray:
    """Vectorized test of integer shifts ``delta`` (..., 2) against an offset grid."""
    delta = np.asarray(delta, dtype=np.int64)
    ix = delta[..., 0] - origin[0]
    iy = delta[..., 1] - origin[1]
    ok = (ix >= 0) & (iy >= 0) & (ix < grid.shape[1]) & (iy < grid.shape[0])
    out = np.zeros(delta.shape[:-1], dtype=bool)
    out[ok] = grid[iy[ok], ix[ok]]
    return out


def apply_map(tracklets, tmap: TrackletMap, t: int) -> dict[int, np.ndarray]:
    """Union the masks of every tracklet mapped to the same track at time t.

    ``tracklets`` may be Tracklet objects or a dict ``tracklet_id -> mask``.
    """
    if isinstance(tracklets, dict):
        at_t = dict(tracklets)
    else:
        at_t = {}
        for tr in tracklets:
            for te, seg in tr.entries:
                if te == t:
                    at_t[tr.id] = seg.mask
    out: dict[int, np.ndarray] = {}
    for tid, mask in sorted(at_t.items()):
        k = tmap.mapping[tid]
        out[k] = mask.copy() if k not in out else (out[k] | mask)
    return out


def extract_state(history, t: int, track_ids=None, contact_radius: int = CONTACT_RADIUS) -> ObjectState:
    """ObjectState at ``t`` from per-track clouds at t-2, t-1, t.

    ``history`` lists dicts ``track -> cloud`` (oldest first, last one at
    ``t``); shorter histories leave velocity / acceleration missing.
    """
    if not history:
        raise ValueError("extract_state needs at least one frame")
    history = list(history)[-3:]
    while len(history) < 3:
        history.insert(0, {})
    if track_ids is None:
        track_ids = sorted(set().union(*[set(h) for h in history]))
    K = len(track_ids)

    def medians(h):
        pos = np.full((K, 2), np.nan)
        for n, k in enumerate(track_ids):
            if k in h and len(_as_xy(h[k])):
                pos[n] = np.median(_as_xy(h[k]), axis=0)
        return pos

    p2, p1, p0 = (medians(h) for h in history)
    v0 = clamp_velocity(p0 - p1)
    v1 = clamp_velocity(p1 - p2)
    a0 = v0 - v1
    present = ~np.isnan(p0[:, 0])
    v_ok = ~np.isnan(v0[:, 0])
    a_ok = ~np.isnan(a0[:, 0])
    now = history[-1]
    clouds = {n: np.asarray(_as_xy(now[k]), dtype=np.int64) for n, k in enumerate(track_ids)
              if present[n]}
    order = sorted(clouds)
    c_sub = compute_contacts([clouds[n] for n in order], contact_radius)
    contacts = np.zeros((K, K), dtype=bool)
    if order:
        contacts[np.ix_(order, order)] = c_sub
    return ObjectState(t=t, track_ids=list(track_ids), present=present, p_a=p0, v_a=v0, a_a=a0,
                       v_ok=v_ok, a_ok=a_ok, contacts=contacts, clouds=clouds,
                       disp=np.zeros((K, 2)), contact_radius=contact_radius)


# -- experience archive ---------------------------------------------------------
class Archive:
    """Append-only store of perceived frames, actions, and rewards.

    Frame ``g`` holds each present tracklet's pixels; experience ``g`` is
    (frame g, action g, reward g, frame g+1) and exists only when frame g+1
    belongs to the same episode.
    """

    def __init__(self, shape, contact_radius: int = CONTACT_RADIUS):
        self.shape = tuple(shape)
        self.contact_radius = contact_radius
        self.episode: list[int] = []
        self.t: list[int] = []
        self.actions: list[int] = []
        self.rewards: list[float] = []
        self.coords: list[dict] = []
        self.medians: list[dict] = []
        self.tracklet_frames: dict[int, list[int]] = {}
        self.point_counts: dict[int, int] = {}
        self.pair_contacts: dict[tuple[int, int], list[int]] = {}
        self.completed: set[int] = set()
        self.version = 0
        self._cache: dict = {}
        self._cache_version = -1

    def __len__(self) -> int:
        return len(self.t)

    def add_frame(self, episode: int, t: int, owner, segments, pairs) -> int:
        """Record frame; ``owner[j]`` is segment j's tracklet, ``pairs`` segment contacts."""
        g = len(self.t)
        self.episode.append(int(episode))
        self.t.append(int(t))
        self.actions.append(-1)
        self.rewards.append(float("nan"))
        coords, meds = {}, {}
        for tid, seg in zip(owner, segments):
            xy = np.asarray(seg.point_cloud[:, :2], dtype=np.int16)
            coords[tid] = xy
            meds[tid] = np.median(xy.astype(float), axis=0)
            self.tracklet_frames.setdefault(tid, []).append(g)
            self.point_counts[tid] = self.point_counts.get(tid, 0) + len(xy)
        self.coords.append(coords)
        self.medians.append(meds)
        for a, b in pairs:
            ta, tb = owner[a], owner[b]
            if ta != tb:
                key = (min(ta, tb), max(ta, tb))
                self.pair_contacts.setdefault(key, []).append(g)
        self.version += 1
        return g

    def set_transition(self, g: int, action: int, reward: float):
        self.actions[g] = int(action)
        self.rewards[g] = float(reward)
        self.version += 1

    def end_episode(self, episode: int):
        self.completed.add(int(episode))
        self.version += 1

    @property
    def tracklet_ids(self) -> list[int]:
        return sorted(self.tracklet_frames)

    def experience_mask(self) -> np.ndarray:
        ep = np.asarray(self.episode)
        act = np.asarray(self.actions)
        ok = np.zeros(len(ep), dtype=bool)
        if len(ep) > 1:
            ok[:-1] = (ep[:-1] == ep[1:]) & (act[:-1] >= 0)
        return ok

    def _cached(self, key, fn):
        if self._cache_version != self.version:
            self._cache.clear()
            self._cache_version = self.version
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def track_positions(self, group) -> tuple[np.ndarray, np.ndarray]:
        """(present[N], pos[N, 2]) of the union of ``group``'s tracklets."""
        group = tuple(sorted(group))
        return self._cached(("pos", group), lambda: self._track_positions(group))

    def _track_positions(self, group):
        n = len(self.t)
        present = np.zeros(n, dtype=bool)
        pos = np.full((n, 2), np.nan)
        frames = sorted(set().union(*[self.tracklet_frames.get(t, []) for t in group]))
        for g in frames:
            here = [t for t in group if t in self.coords[g]]
            present[g] = True
            if len(here) == 1:
                pos[g] = self.medians[g][here[0]]
            else:
                pos[g] = np.median(np.concatenate([self.coords[g][t] for t in here]).astype(float), axis=0)
        return present, pos

    def tracklet_velocity(self, tid: int) -> tuple[np.ndarray, np.ndarray]:
        """(present[N], vel[N, 2]) of one tracklet; vel[g] = pos[g] - pos[g-1]."""
        return self._cached(("vel", tid), lambda: self._tracklet_velocity(tid))

    def _tracklet_velocity(self, tid):
        present, pos = self.track_positions((tid,))
        vel = np.full(pos.shape, np.nan)
        if len(pos) > 1:
            vel[1:] = clamp_velocity(pos[1:] - pos[:-1])
            ep = np.asarray(self.episode)
            vel[1:][ep[1:] != ep[:-1]] = np.nan
        return present, vel

    def cloud(self, group, g: int) -> np.ndarray:
        parts = [self.coords[g][t] for t in group if t in self.coords[g]]
        if not parts:
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate(parts).astype(np.int64)

    def track_masks(self, tmap: TrackletMap, g: int) -> dict[int, np.ndarray]:
        masks = {}
        for tid, xy in self.coords[g].items():
            m = np.zeros(self.shape, dtype=bool)
            m[xy[:, 1], xy[:, 0]] = True
            masks[tid] = m
        return apply_map(masks, tmap, g)

    def to_jsonl(self, path, tmap: TrackletMap | None = None):
        """Experience log keyed by (episode_id, t); tensors row-major by track id."""
        table = build_table(self, tmap or TrackletMap.identity(self.tracklet_ids))
        exp = table.exp
        with open(path, "w") as fh:
            for g in np.flatnonzero(exp):
                rec = {
                    "episode_id": int(self.episode[g]), "t": int(self.t[g]),
                    "action": int(self.actions[g]), "reward": float(self.rewards[g]),
                    "present": table.present[:, g].astype(int).tolist(),
                    "p_a": np.where(np.isnan(table.pos[:, g]), None, table.pos[:, g]).tolist(),
                    "next_present": table.present[:, g + 1].astype(int).tolist(),
                    "next_p_a": np.where(np.isnan(table.pos[:, g + 1]), None,
                                         table.pos[:, g + 1]).tolist(),
                }
                fh.write(json.dumps(rec) + "\n")


@dataclass
class StateTable:
    """All frames of an archive under one map, as dense per-track arrays.

    Arrays are indexed ``[track, frame]``; ``contacts`` maps track pairs
    ``(i, j)``, ``i < j``, to boolean frame arrays.
    """

    tmap: TrackletMap
    groups: list
    present: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    v_ok: np.ndarray
    a_ok: np.ndarray
    contacts: dict
    exp: np.ndarray
    episode: np.ndarray
    t: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    completed: np.ndarray | None = None

    def __post_init__(self):
        if self.completed is None:
            self.completed = np.ones(len(self.t), dtype=bool)
        self._neighbors = None

    @property
    def n_tracks(self) -> int:
        return len(self.groups)

    def neighbor_features(self) -> tuple[np.ndarray, np.ndarray]:
        """(n_contact[K, N], nearest_rel[K, N, 2]) over present tracks.

        ``nearest_rel`` is the position of the nearest other present track
        relative to this one, zero when there is none.
        """
        if self._neighbors is None:
            self._neighbors = (self.contact_count(), _nearest_rel(self.present, self.pos))
        return self._neighbors

    @classmethod
    def from_experiences(cls, experiences) -> "StateTable":
        """Table with one frame per state; experience rows are the even frames."""
        if not experiences:
            raise ValueError("no experiences")
        K = experiences[0].state.n_tracks
        states = []
        for e in experiences:
            if e.state.n_tracks != K or e.next_state.n_tracks != K:
                raise ValueError("experiences disagree on the track set")
            states += [e.state, e.next_state]
        N = len(states)
        exp = np.zeros(N, dtype=bool)
        exp[0::2] = True
        contacts = {}
        for g, s in enumerate(states):
            for i, j in s.contact_pairs():
                contacts.setdefault((i, j), np.zeros(N, dtype=bool))[g] = True
        actions = np.full(N, -1)
        rewards = np.full(N, np.nan)
        actions[0::2] = [e.action for e in experiences]
        rewards[0::2] = [e.reward for e in experiences]
        groups = [[k] for k in range(K)]
        return cls(
            tmap=TrackletMap.from_groups(groups), groups=groups,
            present=np.stack([s.present for s in states], axis=1),
            pos=np.stack([s.p_a for s in states], axis=1),
            vel=np.stack([s.v_a for s in states], axis=1),
            acc=np.stack([s.a_a for s in states], axis=1),
            v_ok=np.stack([s.v_ok for s in states], axis=1),
            a_ok=np.stack([s.a_ok for s in states], axis=1),
            contacts=contacts, exp=exp,
            episode=np.repeat([e.episode_id for e in experiences], 2),
            t=np.array([s.t for s in states]), actions=actions, rewards=rewards)

    @property
    def n_frames(self) -> int:
        return len(self.t)

    def contact_count(self) -> np.ndarray:
        out = np.zeros(self.present.shape, dtype=np.int64)
        for (i, j), c in self.contacts.items():
            out[i] += c
            out[j] += c
        return out

    def any_contact(self, g: int) -> list[tuple[int, int]]:
        return [p for p, c in self.contacts.items() if c[g]]

    def state_at(self, g: int, archive: Archive | None = None) -> ObjectState:
        K = self.n_tracks
        contacts = np.zeros((K, K), dtype=bool)
        for (i, j), c in self.contacts.items():
            if c[g]:
                contacts[i, j] = contacts[j, i] = True
        clouds = {}
        if archive is not None:
            for k in range(K):
                if self.present[k, g]:
                    clouds[k] = archive.cloud(self.groups[k], g)
        return ObjectState(
            t=int(self.t[g]), track_ids=list(range(K)), present=self.present[:, g].copy(),
            p_a=self.pos[:, g].copy(), v_a=self.vel[:, g].copy(), a_a=self.acc[:, g].copy(),
            v_ok=self.v_ok[:, g].copy(), a_ok=self.a_ok[:, g].copy(), contacts=contacts,
            clouds=clouds, disp=np.zeros((K, 2)),
            contact_radius=archive.contact_radius if archive else CONTACT_RADIUS)


def _nearest_rel(present, pos):
    K, N = present.shape
    out = np.zeros((K, N, 2))
    if K < 2:
        return out
    # pad each frame's present tracks into an (N, m) index matrix
    m = int(present.sum(axis=0).max()) if N else 0
    if m < 2:
        return out
    order = np.argsort(~present, axis=0, kind="stable")[:m].T  # (N, m) tracks, present first
    valid = np.take_along_axis(present.T, order, axis=1)
    p = pos.transpose(1, 0, 2)[np.arange(N)[:, None], order]  # (N, m, 2)
    diff = p[:, None, :, :] - p[:, :, None, :]  # [n, a, b] = p_b - p_a
    d = np.hypot(diff[..., 0], diff[..., 1])
    bad = ~(valid[:, :, None] & valid[:, None, :]) | np.eye(m, dtype=bool)[None]
    d = np.where(bad, np.inf, d)
    nn = np.argmin(d, axis=2)  # ties -> lowest slot -> lowest track id
    has = np.isfinite(np.take_along_axis(d, nn[..., None], axis=2)[..., 0]) & valid
    rel = np.take_along_axis(p, nn[..., None], axis=1) - p
    rel = np.where(has[..., None], rel, 0.0)
    rows, slots = np.nonzero(valid)
    out[order[rows, slots], rows] = rel[rows, slots]
    return out


def build_table(archive: Archive, tmap: TrackletMap) -> StateTable:
    groups = tmap.groups()
    K, N = len(groups), len(archive)
    present = np.zeros((K, N), dtype=bool)
    pos = np.full((K, N, 2), np.nan)
    for k, grp in enumerate(groups):
        present[k], pos[k] = archive.track_positions(grp)
    episode = np.asarray(archive.episode, dtype=np.int64)
    same_ep = np.zeros(N, dtype=bool)
    same_ep[1:] = episode[1:] == episode[:-1]
    vel = np.full((K, N, 2), np.nan)
    if N > 1:
        vel[:, 1:] = clamp_velocity(pos[:, 1:] - pos[:, :-1])
        vel[:, 1:][:, ~same_ep[1:]] = np.nan
    acc = np.full((K, N, 2), np.nan)
    if N > 1:
        acc[:, 1:] = vel[:, 1:] - vel[:, :-1]
        acc[:, 1:][:, ~same_ep[1:]] = np.nan
    contacts: dict = {}
    for (a, b), frames in archive.pair_contacts.items():
        ka, kb = tmap.mapping.get(a), tmap.mapping.get(b)
        if ka is None or kb is None or ka == kb:
            continue
        key = (min(ka, kb), max(ka, kb))
        if key not in contacts:
            contacts[key] = np.zeros(N, dtype=bool)
        contacts[key][frames] = True
    return StateTable(
        tmap=tmap, groups=groups, present=present, pos=pos, vel=vel, acc=acc,
        v_ok=~np.isnan(vel[..., 0]), a_ok=~np.isnan(acc[..., 0]), contacts=contacts,
        exp=archive.experience_mask(), episode=episode, t=np.asarray(archive.t),
        actions=np.asarray(archive.actions), rewards=np.asarray(archive.rewards, dtype=float),
        completed=np.isin(episode, sorted(archive.completed)))


class Perception:
    """Frame -> segments -> tracklets -> archive, one frame at a time.

    Segments smaller than ``min_pixels`` are not tracked: on hemispherical
    bodies the steep rim depth gradient splits off 1-4 px slivers every
    frame, and each would otherwise become its own short tracklet.
    """

    def __init__(self, shape, weights: TrackWeights | None = None, scale: float = DEFAULT_SCALE,
                 sigma: float = DEFAULT_SIGMA, min_size: int = DEFAULT_MIN_SIZE,
                 contact_radius: int = CONTACT_RADIUS, min_pixels: int = MIN_TRACK_PIXELS):
        self.tracker = Tracker(weights)
        self.archive = Archive(shape, contact_radius)
        self.scale, self.sigma, self.min_size = scale, sigma, min_size
        self.min_pixels = min_pixels
        self.frame_index = 0
        self.last_owner: list = []
        self.last_segments: list = []

    def observe(self, frame: np.ndarray, episode: int, t: int) -> int:
        labels = segment_labels(frame, self.scale, self.sigma, self.min_size)
        segments = masks_from_labels(labels, frame)
        keep = [j for j, s in enumerate(segments) if s.pixel_count >= self.min_pixels]
        if len(keep) < len(segments):
            remap = np.full(len(segments), -1)
            remap[keep] = np.arange(len(keep))
            labels = remap[labels]
            segments = [segments[j] for j in keep]
        owner = self.tracker.update(self.frame_index, segments, labels)
        near = segment_neighbors(labels, self.archive.contact_radius)
        pairs = [(a, b) for a, nb in enumerate(near) for b in nb if a < b]
        g = self.archive.add_frame(episode, t, owner, segments, pairs)
        self.frame_index += 1
        self.last_owner, self.last_segments = owner, segments
        return g
