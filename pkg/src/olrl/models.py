"""Object-level dynamics, presence, appearance, reward and value models.

Everything is fit from a :class:`~olrl.objstate.StateTable`, i.e. the
experience store viewed under one tracklet map. Rows are frames ``g`` with
``table.exp[g]`` (a recorded transition g -> g+1).

Dynamics features for track k (fixed width, so fits are comparable and
cacheable across maps): own position, velocity and acceleration, velocity /
acceleration validity flags, action one-hot, number of tracks in contact
and the offset to the nearest other present track.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .envsim import N_ACTIONS
from .errors import UsageError
from .objstate import VEL_LIMIT, ObjectState, StateTable, contact_offsets, lookup_offsets
from .trees import Constant, DecisionTree, FitCache, depth_for, model_from_dict

VALIDATION_FRACTION = 0.2
PAIR_VALIDATION_FRACTION = 0.25
APPEARANCE_CELLS = 8
N_DYN_FEATURES = 16
N_PAIR_FEATURES = 21

_SALT_DYN = 1
_SALT_PAIR = 2
_SALT_HOLDOUT = 3


@dataclass(frozen=True)
class VelocityGrid:
    values: tuple = tuple(range(-VEL_LIMIT, VEL_LIMIT + 1))

    def __post_init__(self):
        v = np.asarray(self.values)
        if len(v) == 0 or np.any(np.diff(v) <= 0) or 0 not in self.values:
            raise ValueError("velocity grid must be strictly increasing and contain 0")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    @property
    def n(self) -> int:
        return len(self.values)

    def index(self, v) -> np.ndarray:
        """Nearest bin (ties to the lower bin) of each velocity."""
        g = self.array
        v = np.clip(np.asarray(v, dtype=float), g[0], g[-1])
        hi = np.clip(np.searchsorted(g, v), 1, len(g) - 1) if len(g) > 1 else np.zeros(v.shape, int)
        if len(g) == 1:
            return hi
        lo = hi - 1
        return np.where(np.abs(v - g[lo]) <= np.abs(g[hi] - v), lo, hi)

    def expected_abs_error(self, probs, observed) -> np.ndarray:
        """sum_v P(v) |observed - v| per row."""
        return (probs * np.abs(np.asarray(observed, dtype=float)[:, None] - self.array[None, :])).sum(1)


# -- seeded per-frame splits ----------------------------------------------------
def _splitmix(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return x ^ (x >> np.uint64(31))


def frame_keys(seed: int, salt: int, n: int) -> np.ndarray:
    """Uniform [0, 1) key per frame index; stable as the store grows."""
    with np.errstate(over="ignore"):
        base = _splitmix(np.uint64(seed & 0xFFFFFFFF) * np.uint64(1 << 20) + np.uint64(salt))
        x = _splitmix(np.arange(n, dtype=np.uint64) ^ base)
    return (x >> np.uint64(11)).astype(float) / float(1 << 53)


def holdout_mask(seed: int, n: int, fraction: float = VALIDATION_FRACTION) -> np.ndarray:
    return frame_keys(seed, _SALT_HOLDOUT, n) < fraction


# -- features -------------------------------------------------------------------
def _z(x):
    return np.nan_to_num(x, nan=0.0)


def dyn_features(p, v, a, v_ok, a_ok, action, n_contact, rel) -> np.ndarray:
    """Stack dynamics features; leading dims are broadcast together."""
    onehot = np.eye(N_ACTIONS)[np.asarray(action, dtype=np.int64)]
    return np.concatenate([
        _z(p), _z(v), _z(a), np.asarray(v_ok, float)[..., None], np.asarray(a_ok, float)[..., None],
        onehot, np.asarray(n_contact, float)[..., None], _z(rel)], axis=-1)


def pair_features(pi, vi, ai, pj, vj, aj, ok_v, ok_a, action) -> np.ndarray:
    return np.concatenate([
        _z(pj - pi), _z(vj - vi), _z(aj - ai), _z(pi), _z(vi), _z(ai), _z(pj), _z(vj), _z(aj),
        np.asarray(action, float)[..., None], np.asarray(ok_v, float)[..., None],
        np.asarray(ok_a, float)[..., None]], axis=-1)


def table_dyn_features(table: StateTable, k: int, rows: np.ndarray) -> np.ndarray:
    n_contact, rel = table.neighbor_features()
    return dyn_features(table.pos[k, rows], table.vel[k, rows], table.acc[k, rows],
                        table.v_ok[k, rows], table.a_ok[k, rows], table.actions[rows],
                        n_contact[k, rows], rel[k, rows])


def table_pair_features(table: StateTable, i: int, j: int, rows: np.ndarray) -> np.ndarray:
    return pair_features(table.pos[i, rows], table.vel[i, rows], table.acc[i, rows],
                         table.pos[j, rows], table.vel[j, rows], table.acc[j, rows],
                         table.v_ok[i, rows] & table.v_ok[j, rows],
                         table.a_ok[i, rows] & table.a_ok[j, rows], table.actions[rows])


def _state_neighbors(present, pos, contacts):
    """n_contact (..., K) and nearest-other offsets (..., K, 2) of a (batched) state."""
    both = present[..., :, None] & present[..., None, :]
    n_contact = (contacts & both).sum(-1)
    diff = pos[..., None, :, :] - pos[..., :, None, :]  # [.., a, b] = p_b - p_a
    d = np.hypot(diff[..., 0], diff[..., 1])
    K = present.shape[-1]
    bad = ~both | np.eye(K, dtype=bool)
    d = np.where(bad, np.inf, d)
    nn = np.argmin(d, axis=-1)
    has = np.isfinite(np.take_along_axis(d, nn[..., None], -1)[..., 0])
    rel = np.take_along_axis(diff, nn[..., None, None], axis=-2)[..., 0, :]
    rel = np.where(has[..., None], rel, 0.0)
    return n_contact, rel


# -- dynamics -------------------------------------------------------------------
@dataclass
class DynamicsModel:
    """One velocity model per (track, dimension): a tree or a marginal."""

    grid: VelocityGrid
    track_ids: list
    models: list  # [track][dim]
    kinds: list  # [track][dim] "tree" | "marginal"
    val_scores: list  # [track][dim] validation expected abs error (nan if none)
    n_rows: list

    def dist(self, k: int, X) -> np.ndarray:
        """(n, 2, |V|) distributions of track k for feature rows X."""
        X = np.atleast_2d(X)
        return np.stack([self.models[k][d].predict_proba(X) for d in range(2)], axis=1)

    def to_dict(self) -> dict:
        return {"grid": list(self.grid.values), "track_ids": list(self.track_ids),
                "kinds": self.kinds, "val_scores": [[_json_float(s) for s in r] for r in self.val_scores],
                "n_rows": self.n_rows,
                "models": [[m.to_dict() for m in pair] for pair in self.models]}

    @classmethod
    def from_dict(cls, d) -> "DynamicsModel":
        return cls(VelocityGrid(tuple(d["grid"])), d["track_ids"],
                   [[model_from_dict(m) for m in pair] for pair in d["models"]],
                   d["kinds"], [[np.nan if s is None else s for s in r] for r in d["val_scores"]],
                   d["n_rows"])


def _json_float(x):
    return None if x is None or not np.isfinite(x) else float(x)


def _empirical(bins, n):
    counts = np.bincount(bins, minlength=n).astype(float)
    return counts / counts.sum()


def fit_velocity_model(X, v_next, grid: VelocityGrid, val: np.ndarray, alpha: float,
                       cache: FitCache | None = None):
    """Fit one (track, dim) model; returns (model, kind, validation score)."""

    def fit():
        y = grid.index(v_next)
        if len(y) < 2:
            # uniform over observed bins, or a point mass at rest if none
            payload = np.zeros(grid.n)
            if len(y):
                payload[np.unique(y)] = 1.0
            else:
                payload[grid.index(0.0)] = 1.0
            return Constant(payload / payload.sum()), "marginal", np.nan
        tr = ~val
        if not tr.any():
            tr = np.ones(len(y), dtype=bool)
        marginal = Constant(_empirical(y[tr], grid.n))
        if not val.any() or not tr.any() or val.all():
            return marginal, "marginal", np.nan
        tree = DecisionTree("classifier", grid.n, max_depth=depth_for(int(tr.sum())), alpha=alpha)
        tree.fit(X[tr], y[tr])
        e_tree = grid.expected_abs_error(tree.predict_proba(X[val]), v_next[val]).mean()
        e_marg = grid.expected_abs_error(marginal.predict_proba(X[val]), v_next[val]).mean()
        if e_tree < e_marg:
            return tree, "tree", float(e_tree)
        return marginal, "marginal", float(e_marg)

    if cache is None:
        return fit()
    key = FitCache.key("vel", X, v_next, val, grid.values, alpha)
    return cache.get_or_fit(key, fit)


def dynamics_rows(table: StateTable, k: int, rows: np.ndarray | None = None) -> np.ndarray:
    """Frames g where track k is present at g and g+1 across a transition."""
    ok = table.exp & table.present[k]
    ok[:-1] &= table.present[k, 1:]
    ok[-1] = False
    if rows is not None:
        ok &= rows
    return np.flatnonzero(ok)


def fit_dynamics(table: StateTable, grid: VelocityGrid | None = None, split_seed: int = 0,
                 rows: np.ndarray | None = None, alpha: float = 1.0,
                 cache: FitCache | None = None) -> DynamicsModel:
    """Per-track, per-dimension velocity models.

    ``rows`` restricts training to a boolean frame mask (the objective
    passes its non-holdout frames). The 80:20 split is by seeded per-frame
    keys, so every track shares the same validation frames.
    """
    grid = grid or VelocityGrid()
    if int(table.exp.sum()) < 5:
        raise UsageError("fit_dynamics needs at least 5 experiences")
    keys = frame_keys(split_seed, _SALT_DYN, table.n_frames)
    models, kinds, scores, n_rows = [], [], [], []
    for k in range(table.n_tracks):
        r = dynamics_rows(table, k, rows)
        X = table_dyn_features(table, k, r)
        val = keys[r] < VALIDATION_FRACTION
        ms, ks, ss = [], [], []
        for d in range(2):
            m, kind, s = fit_velocity_model(X, table.vel[k, r + 1, d], grid, val, alpha, cache)
            ms.append(m)
            ks.append(kind)
            ss.append(s)
        models.append(ms)
        kinds.append(ks)
        scores.append(ss)
        n_rows.append(int(len(r)))
    return DynamicsModel(grid, list(range(table.n_tracks)), models, kinds, scores, n_rows)


def _check_tracks(model, state: ObjectState):
    if list(state.track_ids) != list(model.track_ids):
        raise UsageError("state and model disagree on the track set")


def state_dyn_features(state: ObjectState, action: int) -> np.ndarray:
    n_contact, rel = _state_neighbors(state.present, _z(state.p_a), state.contacts)
    return dyn_features(state.p_a, state.v_a, state.a_a, state.v_ok, state.a_ok,
                        np.full(state.n_tracks, int(action)), n_contact, rel)


def predict_velocity_dist(model: DynamicsModel, state: ObjectState, action: int) -> np.ndarray:
    """(K, 2, |V|) velocity distributions for every track of ``state``."""
    _check_tracks(model, state)
    X = state_dyn_features(state, action)
    return np.concatenate([model.dist(k, X[k:k + 1]) for k in range(state.n_tracks)], axis=0) \
        if state.n_tracks else np.zeros((0, 2, model.grid.n))


# -- presence / appearance ----------------------------------------------------
@dataclass
class PresenceModel:
    """P(track present at t+1 | present at t) and where absent tracks reappear."""

    track_ids: list
    models: list
    appearance: np.ndarray  # (K, cells*cells)
    cells: int = APPEARANCE_CELLS

    def p_present(self, k: int, X) -> np.ndarray:
        return self.models[k].predict_proba(np.atleast_2d(X))[:, 1]

    def to_dict(self) -> dict:
        return {"track_ids": list(self.track_ids), "cells": self.cells,
                "models": [m.to_dict() for m in self.models],
                "appearance": self.appearance.tolist()}

    @classmethod
    def from_dict(cls, d) -> "PresenceModel":
        return cls(d["track_ids"], [model_from_dict(m) for m in d["models"]],
                   np.asarray(d["appearance"]), d["cells"])


def appearance_cell(pos, shape, cells: int = APPEARANCE_CELLS) -> np.ndarray:
    h, w = shape
    cx = np.clip((np.asarray(pos)[..., 0] + 0.5) * cells // w, 0, cells - 1)
    cy = np.clip((np.asarray(pos)[..., 1] + 0.5) * cells // h, 0, cells - 1)
    return (cy * cells + cx).astype(np.int64)


def fit_presence_and_appearance(table: StateTable, shape=(64, 64), rows: np.ndarray | None = None,
                                alpha: float = 1.0, cache: FitCache | None = None) -> PresenceModel:
    if int(table.exp.sum()) < 5:
        raise UsageError("fit_presence_and_appearance needs at least 5 experiences")
    n_cells = APPEARANCE_CELLS * APPEARANCE_CELLS
    base = table.exp.copy()
    if rows is not None:
        base &= rows
    models, appear = [], np.zeros((table.n_tracks, n_cells))
    for k in range(table.n_tracks):
        r = np.flatnonzero(base & table.present[k])
        nxt = table.present[k, r + 1].astype(np.int64) if len(r) else np.zeros(0, np.int64)
        if len(r) == 0 or nxt.all():
            models.append(Constant([0.0, 1.0]))
        else:
            X = table_dyn_features(table, k, r)

            def fit(X=X, nxt=nxt):
                tree = DecisionTree("classifier", 2, max_depth=depth_for(len(nxt)), alpha=alpha)
                return tree.fit(X, nxt)

            models.append(fit() if cache is None else
                          cache.get_or_fit(FitCache.key("presence", X, nxt, alpha), fit))
        back = np.flatnonzero(base & ~table.present[k])
        back = back[table.present[k, back + 1]] if len(back) else back
        counts = np.bincount(appearance_cell(table.pos[k, back + 1], shape), minlength=n_cells) \
            if len(back) else np.zeros(n_cells)
        appear[k] = (counts + alpha) / (counts.sum() + alpha * n_cells)
    return PresenceModel(list(range(table.n_tracks)), models, appear)


# -- returns ------------------------------------------------------------------
def mc_returns(rewards, gamma: float) -> np.ndarray:
    """Discounted returns G_t = r_t + gamma * G_{t+1}, evaluated right to left."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    r = np.asarray(rewards, dtype=float)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def table_returns(table: StateTable, gamma: float) -> np.ndarray:
    """Per-frame returns over completed episodes; NaN elsewhere."""
    out = np.full(table.n_frames, np.nan)
    for ep in np.unique(table.episode[table.completed & table.exp]):
        idx = np.flatnonzero((table.episode == ep) & table.exp)
        out[idx] = mc_returns(table.rewards[idx], gamma)
    return out


# -- pairwise reward / value --------------------------------------------------
@dataclass
class PairwiseModel:
    """Contact-centric regressor: mean over contacting modeled pairs."""

    target: str
    models: dict  # (i, j) -> tree | Constant
    fallback: float
    kinds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"target": self.target, "fallback": self.fallback,
                "pairs": [{"pair": list(p), "kind": self.kinds.get(p, ""), "model": m.to_dict()}
                          for p, m in sorted(self.models.items())]}

    @classmethod
    def from_dict(cls, d) -> "PairwiseModel":
        models = {tuple(e["pair"]): model_from_dict(e["model"]) for e in d["pairs"]}
        kinds = {tuple(e["pair"]): e["kind"] for e in d["pairs"]}
        return cls(d["target"], models, d["fallback"], kinds)


def _fit_regressor(X, y, val, cache):
    def fit():
        tr = ~val
        if not tr.any():
            tr = np.ones(len(y), dtype=bool)
        mean = Constant([float(y[tr].mean())])
        if not val.any() or tr.sum() < 2:
            return mean, "mean"
        tree = DecisionTree("regressor", max_depth=6).fit(X[tr], y[tr])
        e_tree = float(((tree.predict(X[val]) - y[val]) ** 2).mean())
        e_mean = float(((mean.payload[0] - y[val]) ** 2).mean())
        return (tree, "tree") if e_tree < e_mean else (mean, "mean")

    if cache is None:
        return fit()
    return cache.get_or_fit(FitCache.key("pair", X, y, val), fit)


def fit_pairwise(table: StateTable, target: str, gamma: float = 0.95, split_seed: int = 0,
                 rows: np.ndarray | None = None, cache: FitCache | None = None,
                 returns: np.ndarray | None = None, exclude_background: bool = True) -> PairwiseModel:
    """Per-pair regressors on frames where the pair is in contact.

    Pairs with the background track get no model: the table touches every
    body in every frame, so such a contact carries no information and its
    always-on prediction would dilute the contact mean.
    """
    if target == "reward":
        y_all = table.rewards
        base = table.exp.copy()
    elif target == "value":
        y_all = table_returns(table, gamma) if returns is None else returns
        base = table.exp & ~np.isnan(y_all)
    else:
        raise ValueError(f"unknown target {target!r}")
    if rows is not None:
        base &= rows
    keys = frame_keys(split_seed, _SALT_PAIR, table.n_frames)
    models, kinds = {}, {}
    any_contact = np.zeros(table.n_frames, dtype=bool)
    bg = table.tmap.background_track if exclude_background else None
    for (i, j), c in sorted(table.contacts.items()):
        if bg is not None and bg in (i, j):
            continue
        both = c & table.present[i] & table.present[j]
        any_contact |= both
        r = np.flatnonzero(base & both)
        if len(r) == 0:
            continue
        X = table_pair_features(table, i, j, r)
        models[(i, j)], kinds[(i, j)] = _fit_regressor(
            X, y_all[r], keys[r] < PAIR_VALIDATION_FRACTION, cache)
    quiet = base & ~any_contact
    pool = quiet if quiet.any() else base
    fallback = float(y_all[pool].mean()) if pool.any() else 0.0
    return PairwiseModel(target, models, fallback, kinds)


def _state_pair_features(state, i, j, action):
    return pair_features(state.p_a[i], state.v_a[i], state.a_a[i], state.p_a[j], state.v_a[j],
                         state.a_a[j], state.v_ok[i] & state.v_ok[j], state.a_ok[i] & state.a_ok[j],
                         action)


def predict_pairwise(pw: PairwiseModel, state: ObjectState, action: int) -> float:
    preds = []
    for i, j in state.contact_pairs():
        m = pw.models.get((i, j))
        if m is not None and state.present[i] and state.present[j]:
            preds.append(float(m.predict(_state_pair_features(state, i, j, action)[None])[0]))
    return float(np.mean(preds)) if preds else pw.fallback


def predict_reward(pw: PairwiseModel, state: ObjectState, action: int) -> float:
    return predict_pairwise(pw, state, action)


def predict_value(pw: PairwiseModel, state: ObjectState, action: int) -> float:
    return predict_pairwise(pw, state, action)


def table_predict_pairwise(pw: PairwiseModel, table: StateTable, rows: np.ndarray) -> np.ndarray:
    """Contact-mean predictions for the given frame indices."""
    rows = np.asarray(rows, dtype=np.int64)
    total = np.zeros(len(rows))
    count = np.zeros(len(rows))
    for (i, j), m in pw.models.items():
        c = table.contacts.get((i, j))
        if c is None:
            continue
        hit = c[rows] & table.present[i, rows] & table.present[j, rows]
        if hit.any():
            total[hit] += m.predict(table_pair_features(table, i, j, rows[hit]))
            count[hit] += 1
    return np.where(count > 0, total / np.maximum(count, 1), pw.fallback)


# -- batched rollouts ---------------------------------------------------------
@dataclass
class BatchState:
    """B sampled copies of one ObjectState; arrays are (B, K, ...)."""

    present: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    v_ok: np.ndarray
    a_ok: np.ndarray
    disp: np.ndarray
    contacts: np.ndarray

    @classmethod
    def from_state(cls, s: ObjectState, batch: int = 1) -> "BatchState":
        def rep(x):
            return np.repeat(np.asarray(x)[None], batch, axis=0)

        disp = s.disp if s.disp is not None else np.zeros((s.n_tracks, 2))
        return cls(rep(s.present), rep(s.p_a), rep(s.v_a), rep(s.a_a), rep(s.v_ok), rep(s.a_ok),
                   rep(disp), rep(s.contacts))

    def take(self, idx) -> "BatchState":
        return BatchState(*(getattr(self, f)[idx] for f in
                            ("present", "p", "v", "a", "v_ok", "a_ok", "disp", "contacts")))


class ContactTables:
    """Per-pair shift tables from the tracks' last observed clouds."""

    def __init__(self, state: ObjectState):
        self.pairs = []
        ks = [k for k in range(state.n_tracks) if k in state.clouds and len(state.clouds[k])]
        for n, i in enumerate(ks):
            for j in ks[n + 1:]:
                origin, grid = contact_offsets(state.clouds[i], state.clouds[j], state.contact_radius)
                self.pairs.append((i, j, origin, grid))

    def contacts(self, present, disp) -> np.ndarray:
        B, K = present.shape
        out = np.zeros((B, K, K), dtype=bool)
        d = np.rint(disp).astype(np.int64)
        for i, j, origin, grid in self.pairs:
            c = lookup_offsets(origin, grid, d[:, i] - d[:, j]) & present[:, i] & present[:, j]
            out[:, i, j] = c
            out[:, j, i] = c
        return out


def _sample_bins(probs, u):
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < u[..., None] * cdf[..., -1:]).sum(-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_batch(dyn: DynamicsModel, presence: PresenceModel | None, bs: BatchState, actions,
                 rng: np.random.Generator, tables: ContactTables, shape=(64, 64)) -> BatchState:
    """Advance every copy one step under its own action."""
    B, K = bs.present.shape
    actions = np.broadcast_to(np.asarray(actions, dtype=np.int64), (B,))
    n_contact, rel = _state_neighbors(bs.present, _z(bs.p), bs.contacts)
    X = dyn_features(bs.p, bs.v, bs.a, bs.v_ok, bs.a_ok, np.broadcast_to(actions[:, None], (B, K)),
                     n_contact, rel)
    u = rng.random((B, K, 2))
    u_p = rng.random((B, K))
    gvals = dyn.grid.array
    v_new = np.zeros((B, K, 2))
    still = bs.present.copy()
    for k in range(K):
        live = bs.present[:, k]
        if not live.any():
            continue
        Xk = X[live, k]
        probs = dyn.dist(k, Xk)
        v_new[live, k] = gvals[_sample_bins(probs, u[live, k])]
        if presence is not None:
            still[live, k] = u_p[live, k] < presence.p_present(k, Xk)
    h, w = shape
    p_new = bs.p + v_new
    p_new[..., 0] = np.clip(p_new[..., 0], 0, w - 1)
    p_new[..., 1] = np.clip(p_new[..., 1], 0, h - 1)
    v_real = np.where(bs.present[..., None], p_new - bs.p, np.nan)
    a_new = np.where(bs.v_ok[..., None], v_real - bs.v, np.nan)
    disp = bs.disp + np.where(bs.present[..., None], p_new - bs.p, 0.0)
    p_new = np.where(still[..., None], p_new, np.nan)
    v_real = np.where(still[..., None], v_real, np.nan)
    a_new = np.where(still[..., None], a_new, np.nan)
    return BatchState(still, p_new, v_real, a_new, still.copy(), still & bs.v_ok, disp,
                      tables.contacts(still, disp))


def sample_transition(dyn: DynamicsModel, state: ObjectState, action: int, rng: np.random.Generator,
                      presence: PresenceModel | None = None, shape=(64, 64),
                      tables: ContactTables | None = None) -> ObjectState:
    """One sampled successor ObjectState."""
    _check_tracks(dyn, state)
    tables = tables or ContactTables(state)
    nb = sample_batch(dyn, presence, BatchState.from_state(state), [action], rng, tables, shape)
    return ObjectState(t=state.t + 1, track_ids=list(state.track_ids), present=nb.present[0],
                       p_a=nb.p[0], v_a=nb.v[0], a_a=nb.a[0], v_ok=nb.v_ok[0], a_ok=nb.a_ok[0],
                       contacts=nb.contacts[0], clouds=state.clouds, disp=nb.disp[0],
                       contact_radius=state.contact_radius)


def predict_pairwise_batch(pw: PairwiseModel, bs: BatchState, actions) -> np.ndarray:
    B = bs.present.shape[0]
    actions = np.broadcast_to(np.asarray(actions, dtype=np.int64), (B,))
    total = np.zeros(B)
    count = np.zeros(B)
    for (i, j), m in pw.models.items():
        c = bs.contacts[:, i, j]
        if not c.any():
            continue
        X = pair_features(bs.p[c, i], bs.v[c, i], bs.a[c, i], bs.p[c, j], bs.v[c, j], bs.a[c, j],
                          bs.v_ok[c, i] & bs.v_ok[c, j], bs.a_ok[c, i] & bs.a_ok[c, j], actions[c])
        total[c] += m.predict(X)
        count[c] += 1
    return np.where(count > 0, total / np.maximum(count, 1), pw.fallback)


# -- bundles and snapshots -----------------------------------------------------
@dataclass
class ModelBundle:
    dynamics: DynamicsModel
    presence: PresenceModel
    reward: PairwiseModel
    value: PairwiseModel
    groups: list

    def to_dict(self) -> dict:
        return {"groups": self.groups, "dynamics": self.dynamics.to_dict(),
                "presence": self.presence.to_dict(), "reward": self.reward.to_dict(),
                "value": self.value.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "ModelBundle":
        return cls(DynamicsModel.from_dict(d["dynamics"]), PresenceModel.from_dict(d["presence"]),
                   PairwiseModel.from_dict(d["reward"]), PairwiseModel.from_dict(d["value"]),
                   d["groups"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_all(table: StateTable, gamma: float = 0.95, split_seed: int = 0, shape=(64, 64),
            rows: np.ndarray | None = None, alpha: float = 1.0,
            cache: FitCache | None = None) -> ModelBundle:
    return ModelBundle(
        fit_dynamics(table, VelocityGrid(), split_seed, rows, alpha, cache),
        fit_presence_and_appearance(table, shape, rows, 1.0, cache),
        fit_pairwise(table, "reward", gamma, split_seed, rows, cache),
        fit_pairwise(table, "value", gamma, split_seed, rows, cache),
        table.groups)
