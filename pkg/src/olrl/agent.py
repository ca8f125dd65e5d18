"""The closed-loop agent: perceive, plan over object models, merge, retrain.

Planning enumerates every action sequence of length ``plan_depth``,
rolls each forward ``samples_per_path`` times through the sampled
dynamics and scores it with the contact-mean reward and value models.
All sequences and samples are advanced together as one batch.
"""
from __future__ import annotations

import csv
import itertools
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .envsim import N_ACTIONS, TabletopEnv
from .errors import ConfigError
from .models import (
    BatchState,
    ContactTables,
    ModelBundle,
    fit_all,
    predict_pairwise_batch,
    sample_batch,
)
from .objective import ObjectiveConfig, TraceWriter, evaluate_map, optimize_map
from .objstate import ObjectState, Perception, TrackletMap, build_table, extract_state
from .trees import FitCache

METRIC_COLUMNS = ["seed", "episode", "total_steps", "score", "n_tracks", "O", "E_D", "E_R", "E_V",
                  "epsilon", "wall_time_ms"]

MIN_FIT_EXPERIENCES = 20


@dataclass
class AgentConfig:
    gamma: float = 0.95
    plan_depth: int = 2
    samples_per_path: int = 10
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 1000
    merge_rounds_per_episode: int = 4
    retrain_per_episode: int = 4
    min_merge_experiences: int = 400
    contact_radius: int = 2
    plan_seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if isinstance(self.objective, dict):
            self.objective = ObjectiveConfig(**self.objective)
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.plan_depth < 1:
            raise ConfigError("plan_depth must be >= 1")
        if self.samples_per_path < 1:
            raise ConfigError("samples_per_path must be >= 1")
        if not (0.0 <= self.eps_end <= 1.0 and 0.0 <= self.eps_start <= 1.0):
            raise ConfigError("epsilon values must lie in [0, 1]")
        if self.eps_decay_steps < 0:
            raise ConfigError("eps_decay_steps must be non-negative")
        if self.contact_radius < 0:
            raise ConfigError("contact_radius must be non-negative")
        if self.merge_rounds_per_episode < 0 or self.retrain_per_episode < 0:
            raise ConfigError("round counts must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown agent config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        return asdict(self)

    def epsilon(self, step: int) -> float:
        if self.eps_decay_steps == 0 or step >= self.eps_decay_steps:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * step / self.eps_decay_steps


@dataclass
class Plan:
    actions: tuple
    states: list
    value: float


def plan_value(rewards, terminal_value: float, gamma: float) -> float:
    """Q = sum_t gamma^t R_t + gamma^h V_h for h = len(rewards)."""
    q = 0.0
    for t, r in enumerate(rewards):
        q += gamma ** t * r
    return q + gamma ** len(rewards) * terminal_value


def action_sequences(depth: int) -> np.ndarray:
    return np.array(list(itertools.product(range(N_ACTIONS), repeat=depth)), dtype=np.int64)


def sequence_values(state: ObjectState, models: ModelBundle, cfg: AgentConfig,
                    rng: np.random.Generator, shape=(64, 64)) -> np.ndarray:
    """Mean sampled Q of every action sequence, in ``action_sequences`` order."""
    seqs = action_sequences(cfg.plan_depth)
    S = cfg.samples_per_path
    acts = np.repeat(seqs, S, axis=0)  # (B, h)
    tables = ContactTables(state)
    bs = BatchState.from_state(state, len(acts))
    q = np.zeros(len(acts))
    for t in range(cfg.plan_depth):
        q += cfg.gamma ** t * predict_pairwise_batch(models.reward, bs, acts[:, t])
        bs = sample_batch(models.dynamics, models.presence, bs, acts[:, t], rng, tables, shape)
    q += cfg.gamma ** cfg.plan_depth * predict_pairwise_batch(models.value, bs, acts[:, -1])
    return q.reshape(len(seqs), S).mean(axis=1)


def select_action(state: ObjectState | None, models: ModelBundle | None, cfg: AgentConfig,
                  rng: np.random.Generator, epsilon: float = 0.0, shape=(64, 64)) -> int:
    if models is None or state is None or rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    values = sequence_values(state, models, cfg, rng, shape)
    best = np.flatnonzero(values >= values.max() - 1e-12)
    seq = action_sequences(cfg.plan_depth)[best[int(rng.integers(len(best)))]]
    return int(seq[0])


def _schedule(n: int, length: int) -> set[int]:
    """Evenly spaced step counts within an episode; the last one is its end."""
    return {int(round(length * (i + 1) / n)) for i in range(n)} if n > 0 else set()


class Agent:
    """Perception, experience archive, tracklet map and models of one run."""

    def __init__(self, cfg: AgentConfig, shape=(64, 64), seed: int = 0, merging: bool = True,
                 trace_path=None):
        self.cfg = cfg
        self.shape = tuple(shape)
        self.merging = merging
        self.perception = Perception(self.shape, contact_radius=cfg.contact_radius)
        self.tmap = TrackletMap({})
        self.models: ModelBundle | None = None
        self.model_map: TrackletMap | None = None
        self.cache = FitCache()
        self.rng = np.random.default_rng([cfg.plan_seed, seed, 0])
        self.merge_rng = np.random.default_rng([cfg.plan_seed, seed, 1])
        self.steps = 0
        self.rounds = 0
        self.last_report = None
        self.trace = TraceWriter(trace_path) if trace_path else None
        self._g = None

    @property
    def archive(self):
        return self.perception.archive

    # -- state -----------------------------------------------------------------
    def current_state(self) -> ObjectState | None:
        """State of the latest frame under the map the models were fit on."""
        if self.models is None:
            return None
        A = self.archive
        g = len(A) - 1
        frames = [h for h in range(max(0, g - 2), g + 1) if A.episode[h] == A.episode[g]]
        mapping = self.model_map.mapping
        history = []
        for h in frames:
            clouds: dict[int, list] = {}
            for tid, xy in A.coords[h].items():
                k = mapping.get(tid)
                if k is not None:
                    clouds.setdefault(k, []).append(xy)
            history.append({k: np.concatenate(v).astype(np.int64) for k, v in clouds.items()})
        K = len(self.models.groups)
        return extract_state(history, int(A.t[g]), track_ids=list(range(K)),
                             contact_radius=A.contact_radius)

    # -- acting ------------------------------------------------------------------
    def act(self, frame: np.ndarray, episode: int, t: int) -> int:
        self._g = self.perception.observe(frame, episode, t)
        eps = self.cfg.epsilon(self.steps)
        if self.models is None or self.rng.random() < eps:
            action = int(self.rng.integers(N_ACTIONS))
        else:
            action = select_action(self.current_state(), self.models, self.cfg, self.rng, 0.0,
                                   self.shape)
        return action

    def feedback(self, action: int, reward: float):
        self.archive.set_transition(self._g, action, reward)
        self.steps += 1

    # -- learning ----------------------------------------------------------------
    def _full_map(self) -> TrackletMap:
        return self.tmap.extend(self.archive.tracklet_ids, self.archive.point_counts)

    def retrain(self):
        A = self.archive
        if int(A.experience_mask().sum()) < MIN_FIT_EXPERIENCES:
            return
        self.tmap = self._full_map()
        table = build_table(A, self.tmap)
        self.models = fit_all(table, self.cfg.gamma, self.cfg.objective.split_seed, self.shape,
                              alpha=self.cfg.objective.dynamics_alpha, cache=self.cache)
        self.model_map = self.tmap

    def merge_round(self):
        A = self.archive
        if int(A.experience_mask().sum()) < max(MIN_FIT_EXPERIENCES, self.cfg.min_merge_experiences):
            return []
        self.tmap = self._full_map()
        self.tmap, accepted = optimize_map(self.tmap, A, self.cfg.objective, self.merge_rng,
                                           self.rounds, self.cache, self.perception.tracker,
                                           self.trace)
        self.rounds += 1
        return accepted

    def checkpoint(self, t: int, episode_len: int):
        """Merge and retrain at the scheduled points of an episode."""
        merged = self.merging and t in _schedule(self.cfg.merge_rounds_per_episode, episode_len)
        if merged:
            self.merge_round()
        if merged or t in _schedule(self.cfg.retrain_per_episode, episode_len) or t == episode_len:
            self.retrain()

    def end_episode(self, frame: np.ndarray, episode: int, t: int, episode_len: int):
        self.perception.observe(frame, episode, t)
        self.archive.end_episode(episode)
        self.checkpoint(episode_len, episode_len)

    def evaluate(self):
        """Objective of the current map (NaNs until there is enough data)."""
        try:
            rep = evaluate_map(self._full_map(), self.archive, self.cfg.objective, self.rounds,
                               self.cache)
        except Exception:  # too little data to fit a map
            return {"O": np.nan, "E_D": np.nan, "E_R": np.nan, "E_V": np.nan}
        return {"O": rep.O, "E_D": rep.E_D, "E_R": rep.E_R, "E_V": rep.E_V}


@dataclass
class EpisodeLog:
    episode: int
    score: float
    steps: int
    actions: list
    rewards: list
    wall_time_ms: float
    epsilon: float


def run_episode(env: TabletopEnv, agent: Agent, episode: int) -> EpisodeLog:
    t0 = time.perf_counter()
    L = env.config.episode_len
    _, frame = env.reset(episode)
    actions, rewards = [], []
    eps = agent.cfg.epsilon(agent.steps)
    for t in range(L):
        if t > 0:
            agent.checkpoint(t, L)
        a = agent.act(frame, episode, t)
        _, frame, r = env.step(a)
        agent.feedback(a, r)
        actions.append(a)
        rewards.append(r)
    agent.end_episode(frame, episode, L, L)
    return EpisodeLog(episode, float(sum(rewards)), L, actions, rewards,
                      (time.perf_counter() - t0) * 1000.0, eps)


def write_metrics_row(path, row: dict):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRIC_COLUMNS)
        w.writerow([row[c] for c in METRIC_COLUMNS])
