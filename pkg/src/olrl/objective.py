"""Tracklet-map objective O(M) = E_D + E_R + E_V and greedy merging.

A map is scored by fitting dynamics, reward and value models on the
experience store viewed under that map, then measuring their errors on a
seeded holdout of frames. The holdout depends only on the seed and the
round, never on the map, so candidates within a round are comparable.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .models import (
    DynamicsModel,
    PairwiseModel,
    VelocityGrid,
    dynamics_rows,
    fit_dynamics,
    fit_pairwise,
    holdout_mask,
    table_dyn_features,
    table_predict_pairwise,
    table_returns,
)
from .objstate import Archive, StateTable, TrackletMap, build_table
from .trees import FitCache

TRACE_COLUMNS = ["round", "track_i", "track_j", "E_D", "E_R", "E_V", "O_before", "O_after", "accepted"]


@dataclass
class ObjectiveConfig:
    holdout_fraction: float = 0.2
    c: float = 0.02
    proposals_per_round: int = 20
    split_seed: int = 0
    gamma: float = 0.95
    dynamics_alpha: float = 1.0 / 61
    relative_c: bool = True

    def __post_init__(self):
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        if self.c < 0:
            raise ConfigError("c must be non-negative")
        if self.proposals_per_round < 0:
            raise ConfigError("proposals_per_round must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.dynamics_alpha <= 0:
            raise ConfigError("dynamics_alpha must be positive")


@dataclass
class ObjectiveReport:
    E_D: float
    E_R: float
    E_V: float
    dynamics: DynamicsModel
    reward: PairwiseModel
    value: PairwiseModel
    holdout: np.ndarray = field(repr=False)

    @property
    def O(self) -> float:
        return self.E_D + self.E_R + self.E_V


def expected_abs_error(probs, observed, grid_values) -> np.ndarray:
    """sum_v P(v) |observed - v| for each row of ``probs``."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    g = np.asarray(grid_values, dtype=float)
    return (probs * np.abs(np.atleast_1d(np.asarray(observed, float))[:, None] - g[None, :])).sum(1)


def dynamics_error(model: DynamicsModel, table: StateTable, holdout: np.ndarray,
                   archive: Archive | None = None) -> float:
    """Mean expected absolute velocity error over holdout (frame, present track, dim).

    With an ``archive``, each track's prediction is scored against the
    observed velocity of every constituent tracklet that persists across
    the transition (falling back to the track's own velocity at tracklet
    handoffs). A track's median can hide a moving part, e.g. a target
    absorbed into the background; its tracklet cannot.
    """
    total, n = 0.0, 0
    grid = model.grid.array
    for k in range(table.n_tracks):
        r = dynamics_rows(table, k, holdout)
        if len(r) == 0:
            continue
        probs = model.dist(k, table_dyn_features(table, k, r))
        covered = np.zeros(len(r), dtype=bool)
        if archive is not None:
            for tid in table.groups[k]:
                present, vel = archive.tracklet_velocity(tid)
                idx = np.flatnonzero(present[r] & present[r + 1])
                if len(idx) == 0:
                    continue
                for d in range(2):
                    total += float(expected_abs_error(probs[idx, d], vel[r[idx] + 1, d], grid).sum())
                n += 2 * len(idx)
                covered[idx] = True
        rest = np.flatnonzero(~covered)
        for d in range(2):
            total += float(expected_abs_error(probs[rest, d], table.vel[k, r[rest] + 1, d], grid).sum())
        n += 2 * len(rest)
    if n == 0:
        raise UsageError("no track is observed in any holdout transition")
    return total / n


def squared_error(pred, target) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    return float(((pred - target) ** 2).mean()) if len(target) else 0.0


def reward_error(pw: PairwiseModel, table: StateTable, holdout: np.ndarray) -> float:
    rows = np.flatnonzero(holdout & table.exp)
    return squared_error(table_predict_pairwise(pw, table, rows), table.rewards[rows])


def value_error(pw: PairwiseModel, table: StateTable, holdout: np.ndarray,
                returns: np.ndarray) -> float:
    rows = np.flatnonzero(holdout & table.exp & ~np.isnan(returns))
    return squared_error(table_predict_pairwise(pw, table, rows), returns[rows])


def round_holdout(cfg: ObjectiveConfig, n_frames: int, round_index: int = 0) -> np.ndarray:
    return holdout_mask(cfg.split_seed * 1_000_003 + round_index, n_frames, cfg.holdout_fraction)


def evaluate_map(tmap: TrackletMap, store, cfg: ObjectiveConfig, round_index: int = 0,
                 cache: FitCache | None = None) -> ObjectiveReport:
    """Fit models under ``tmap`` on the non-holdout frames and score the holdout.

    ``store`` is an :class:`Archive` or an already built :class:`StateTable`.
    """
    archive = store if isinstance(store, Archive) else None
    table = build_table(store, tmap) if archive is not None else store
    hold = round_holdout(cfg, table.n_frames, round_index) & table.exp
    train = table.exp & ~hold
    if int(train.sum()) < 5:
        raise UsageError("too few training experiences to score a map")
    returns = table_returns(table, cfg.gamma)
    dyn = fit_dynamics(table, VelocityGrid(), cfg.split_seed, train, cfg.dynamics_alpha, cache)
    rew = fit_pairwise(table, "reward", cfg.gamma, cfg.split_seed, train, cache)
    val = fit_pairwise(table, "value", cfg.gamma, cfg.split_seed, train, cache, returns=returns)
    return ObjectiveReport(
        E_D=dynamics_error(dyn, table, hold, archive), E_R=reward_error(rew, table, hold),
        E_V=value_error(val, table, hold, returns), dynamics=dyn, reward=rew, value=val,
        holdout=np.flatnonzero(hold))


def accept_merge(o_before: float, o_after: float, c: float, relative: bool = True) -> bool:
    """Merge rule O(M') <= O(M) + c, with c scaled by O(M) when ``relative``."""
    return o_after <= o_before + (c * o_before if relative else c)


class TraceWriter:
    """Appends objective proposals to a CSV file."""

    def __init__(self, path):
        self.path = path
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(TRACE_COLUMNS)

    def write(self, row: dict):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([row[c] for c in TRACE_COLUMNS])


def optimize_map(tmap: TrackletMap, archive: Archive, cfg: ObjectiveConfig,
                 rng: np.random.Generator, round_index: int = 0, cache: FitCache | None = None,
                 tracker=None, trace: TraceWriter | None = None):
    """One round of random pairwise merge proposals.

    Returns ``(new_map, accepted)`` where ``accepted`` lists the merged
    tracklet groups. Accepted merges are fed to ``tracker`` as positives.
    """
    cache = cache if cache is not None else FitCache()
    current = evaluate_map(tmap, archive, cfg, round_index, cache)
    accepted = []
    for _ in range(cfg.proposals_per_round):
        K = tmap.n_tracks
        if K < 2:
            break
        i, j = sorted(int(x) for x in rng.choice(K, size=2, replace=False))
        cand = tmap.merge(i, j, archive.point_counts)
        rep = evaluate_map(cand, archive, cfg, round_index, cache)
        ok = accept_merge(current.O, rep.O, cfg.c, cfg.relative_c)
        if trace is not None:
            trace.write({"round": round_index, "track_i": i, "track_j": j, "E_D": rep.E_D,
                         "E_R": rep.E_R, "E_V": rep.E_V, "O_before": current.O,
                         "O_after": rep.O, "accepted": int(ok)})
        if ok:
            groups = tmap.groups()
            accepted.append((tuple(groups[i]), tuple(groups[j])))
            tmap, current = cand, rep
    if accepted and tracker is not None:
        tracker.promote(dict(tmap.mapping))
        tracker.refit_classifiers()
    return tmap, accepted
