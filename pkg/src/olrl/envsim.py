"""Seeded 2D tabletop environment with RGBD rendering.

One agent disc and ``n_targets`` target discs live on the unit square. The
agent moves along the five discrete actions; targets travel in straight
lines and reflect off the walls. Frames are top-down orthographic RGBD
rasters where each disc has a hemispherical depth profile.

Scoring happens on the state the agent observed: at the start of a step,
every target overlapping the agent pays ``contact_reward``. In ``gather``
those targets are respawned before bodies move, in ``avoid`` they stay.
"""
from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError

TABLE_COLOR = (96.0, 96.0, 96.0)
MIN_COLOR_SEPARATION = 150.0
MAX_PLACEMENT_ATTEMPTS = 1000


class Action(enum.IntEnum):
    NOOP = 0
    PLUS_X = 1
    MINUS_X = 2
    PLUS_Y = 3
    MINUS_Y = 4


N_ACTIONS = len(Action)

_ACTION_DELTA = np.array(
    [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
)


@dataclass
class EnvConfig:
    task: str = "gather"
    randomize: bool = False
    n_targets: int = 2
    agent_speed: float = 0.1
    target_speed: float | None = None
    radius_range: tuple[float, float] = (0.05, 0.1)
    contact_reward: float | None = None
    episode_len: int = 500
    render_h: int = 64
    render_w: int = 64
    seed: int = 0
    noise_std: float = 0.0
    # static bodies that never pay reward; used by the background-absorption scenes
    n_distractors: int = 0

    def __post_init__(self):
        if self.task not in ("gather", "avoid"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.target_speed is None:
            self.target_speed = 0.2 if self.task == "gather" else 0.05
        if self.contact_reward is None:
            self.contact_reward = 1.0 if self.task == "gather" else -1.0
        self.radius_range = tuple(float(r) for r in self.radius_range)
        lo, hi = self.radius_range
        if not (0.0 < lo <= hi <= 0.25):
            raise ConfigError(f"radius_range {self.radius_range} outside (0, 0.25]")
        if self.agent_speed <= 0 or self.target_speed <= 0:
            raise ConfigError("speeds must be positive")
        if self.render_h < 16 or self.render_w < 16:
            raise ConfigError("render dims must be >= 16")
        if self.episode_len < 1:
            raise ConfigError("episode_len must be >= 1")
        if self.n_targets < 0 or self.n_distractors < 0:
            raise ConfigError("body counts must be non-negative")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown EnvConfig keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "EnvConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["radius_range"] = list(self.radius_range)
        return d


@dataclass
class EnvState:
    """Bodies are indexed agent first, then targets, then distractors."""

    config: EnvConfig
    centers: np.ndarray
    headings: np.ndarray
    radii: np.ndarray
    colors: np.ndarray
    step_count: int
    rng: np.random.Generator
    episode_seed: int = 0
    done: bool = False

    @property
    def n_bodies(self) -> int:
        return len(self.radii)

    def copy(self) -> "EnvState":
        rng = np.random.Generator(type(self.rng.bit_generator)())
        rng.bit_generator.state = self.rng.bit_generator.state
        return dataclasses.replace(
            self,
            centers=self.centers.copy(),
            headings=self.headings.copy(),
            radii=self.radii.copy(),
            colors=self.colors.copy(),
            rng=rng,
        )

    def overlapping_targets(self) -> list[int]:
        n_t = self.config.n_targets
        d = np.linalg.norm(self.centers[1 : 1 + n_t] - self.centers[0], axis=1)
        hit = d < self.radii[1 : 1 + n_t] + self.radii[0]
        return [int(i) + 1 for i in np.flatnonzero(hit)]


def _draw_appearance(cfg: EnvConfig, rng: np.random.Generator):
    n = 1 + cfg.n_targets + cfg.n_distractors
    radii = rng.uniform(cfg.radius_range[0], cfg.radius_range[1], size=n)
    colors = np.zeros((n, 3))
    table = np.asarray(TABLE_COLOR)
    for i in range(n):
        for _ in range(10_000):
            c = rng.uniform(0.0, 255.0, size=3)
            if np.linalg.norm(c - table) < MIN_COLOR_SEPARATION:
                continue
            if i and np.min(np.linalg.norm(colors[:i] - c, axis=1)) < MIN_COLOR_SEPARATION:
                continue
            colors[i] = c
            break
        else:  # pragma: no cover - needs >7 mutually separated colors
            raise ConfigError("cannot draw separable body colors")
    return radii, colors


def _place(rng, radius, centers, radii):
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        c = rng.uniform(radius, 1.0 - radius, size=2)
        if len(centers) == 0:
            return c
        d = np.linalg.norm(np.asarray(centers) - c, axis=1)
        if np.all(d > np.asarray(radii) + radius):
            return c
    raise ConfigError("arena too crowded: body placement failed")


def _random_heading(rng):
    theta = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([np.cos(theta), np.sin(theta)])


class TabletopEnv:
    """Stateful wrapper: appearance is fixed at construction unless randomized."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self._base_radii, self._base_colors = _draw_appearance(
            config, np.random.default_rng(config.seed)
        )
        self.state: EnvState | None = None

    def reset(self, episode_seed: int) -> tuple[EnvState, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, episode_seed])
        if cfg.randomize:
            radii, colors = _draw_appearance(cfg, rng)
        else:
            radii, colors = self._base_radii.copy(), self._base_colors.copy()
        centers: list[np.ndarray] = []
        for i in range(len(radii)):
            centers.append(_place(rng, radii[i], centers, radii[:i]))
        headings = np.zeros((len(radii), 2))
        for i in range(1, 1 + cfg.n_targets):
            headings[i] = _random_heading(rng)
        self.state = EnvState(
            config=cfg,
            centers=np.array(centers),
            headings=headings,
            radii=radii,
            colors=colors,
            step_count=0,
            rng=rng,
            episode_seed=episode_seed,
        )
        return self.state, render(self.state)

    def step(self, action) -> tuple[EnvState, np.ndarray, float]:
        if self.state is None:
            raise UsageError("reset() must be called before step()")
        self.state, frame, reward = step(self.state, action)
        return self.state, frame, reward


def reset(config: EnvConfig, episode_seed: int) -> tuple[EnvState, np.ndarray]:
    return TabletopEnv(config).reset(episode_seed)


def _respawn(state: EnvState, i: int):
    others = [j for j in range(state.n_bodies) if j != i]
    state.centers[i] = _place(
        state.rng, state.radii[i], state.centers[others], state.radii[others]
    )
    state.headings[i] = _random_heading(state.rng)


def _reflect(pos, heading, r):
    for d in range(2):
        lo, hi = r, 1.0 - r
        # a target cannot cross the arena in one step, two passes are enough
        for _ in range(2):
            if pos[d] < lo:
                pos[d] = 2 * lo - pos[d]
                heading[d] = -heading[d]
            elif pos[d] > hi:
                pos[d] = 2 * hi - pos[d]
                heading[d] = -heading[d]


def step(state: EnvState, action) -> tuple[EnvState, np.ndarray, float]:
    if state.done or state.step_count >= state.config.episode_len:
        raise UsageError("episode already terminated")
    cfg = state.config
    s = state.copy()
    hits = s.overlapping_targets()
    reward = float(cfg.contact_reward) * len(hits)
    if cfg.task == "gather":
        for i in hits:
            _respawn(s, i)

    r0 = s.radii[0]
    s.centers[0] = np.clip(
        s.centers[0] + cfg.agent_speed * _ACTION_DELTA[int(action)], r0, 1.0 - r0
    )
    for i in range(1, 1 + cfg.n_targets):
        s.centers[i] = s.centers[i] + cfg.target_speed * s.headings[i]
        _reflect(s.centers[i], s.headings[i], s.radii[i])

    s.step_count += 1
    s.done = s.step_count >= cfg.episode_len
    return s, render(s), reward


def body_depths(state: EnvState) -> np.ndarray:
    """Per-body depth rasters, ``inf`` outside each disc. Shape (n, H, W)."""
    cfg = state.config
    h, w = cfg.render_h, cfg.render_w
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    out = np.full((state.n_bodies, h, w), np.inf)
    for i in range(state.n_bodies):
        cx, cy = state.centers[i]
        r = state.radii[i]
        rho2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
        inside = rho2 <= r * r
        depth = 1.0 - np.sqrt(np.maximum(r * r - rho2, 0.0)) / r * 0.5
        out[i][inside] = depth[inside]
    return out


def label_image(state: EnvState) -> np.ndarray:
    """Ground-truth body index per pixel, -1 for the table."""
    depths = body_depths(state)
    if state.n_bodies == 0:
        return np.full((state.config.render_h, state.config.render_w), -1)
    near = np.argmin(depths, axis=0)
    covered = np.isfinite(np.min(depths, axis=0))
    return np.where(covered, near, -1)


def render(state: EnvState) -> np.ndarray:
    cfg = state.config
    h, w = cfg.render_h, cfg.render_w
    frame = np.empty((h, w, 4))
    frame[..., :3] = TABLE_COLOR
    frame[..., 3] = 1.0
    if state.n_bodies:
        depths = body_depths(state)
        near = np.argmin(depths, axis=0)
        dmin = np.min(depths, axis=0)
        covered = np.isfinite(dmin)
        frame[covered, :3] = state.colors[near[covered]]
        frame[covered, 3] = dmin[covered]
    if cfg.noise_std > 0:
        rng = np.random.default_rng([cfg.seed, state.episode_seed, state.step_count, 7])
        noise = rng.normal(0.0, cfg.noise_std, size=frame.shape)
        noise[..., 3] /= 255.0
        frame += noise
        frame[..., :3] = np.clip(frame[..., :3], 0.0, 255.0)
        frame[..., 3] = np.clip(frame[..., 3], 0.0, 1.0)
    return frame


def save_frame_png(frame: np.ndarray, rgb_path, depth_path):
    from PIL import Image

    rgb = np.clip(np.round(frame[..., :3]), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(rgb_path)
    depth = np.clip(np.round(frame[..., 3] * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(depth).save(depth_path)


def dump_frames(config: EnvConfig, steps: int, out_dir, episode_seed: int = 0, policy_seed: int = 0):
    """Roll a random policy and write ``frame_XXXX.png`` / ``depth_XXXX.png``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = TabletopEnv(config)
    _, frame = env.reset(episode_seed)
    rng = np.random.default_rng(policy_seed)
    written = []
    for t in range(steps + 1):
        rgb_p, d_p = out / f"frame_{t:04d}.png", out / f"depth_{t:04d}.png"
        save_frame_png(frame, rgb_p, d_p)
        written.append((rgb_p, d_p))
        if t == steps:
            break
        if env.state.done:
            _, frame = env.reset(episode_seed + t + 1)
            continue
        _, frame, _ = env.step(int(rng.integers(N_ACTIONS)))
    return written
