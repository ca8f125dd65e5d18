"""Experiment runner: agent comparisons, dynamics error curves, SVG reports."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import METRIC_COLUMNS, Agent, AgentConfig, run_episode, write_metrics_row
from .envsim import N_ACTIONS, EnvConfig, TabletopEnv, label_image
from .errors import ConfigError, ParseError
from .models import BatchState, ContactTables, DynamicsModel, sample_batch
from .objstate import ObjectState
from .segtrack import write_tracklet_archive

VARIANTS = ("olrl", "olrl_minus_m", "random")
DYNAMICS_COLUMNS = ["horizon", "model_all", "model_agent", "const_vel_all", "const_vel_agent"]


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    variant: tuple = ("olrl",)
    total_steps: int = 2000
    n_seeds: int = 5
    output_dir: str = "runs"
    workers: int = 1
    # eval-dynamics settings
    trials: int = 100
    horizon: int = 100
    rollouts: int = 10

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig.from_dict(self.env)
        if isinstance(self.agent, dict):
            self.agent = AgentConfig.from_dict(self.agent)
        if isinstance(self.variant, str):
            self.variant = (self.variant,)
        self.variant = tuple(self.variant)
        bad = [v for v in self.variant if v not in VARIANTS]
        if bad or not self.variant:
            raise ConfigError(f"variant must be drawn from {VARIANTS}, got {list(self.variant)}")
        if self.total_steps < self.env.episode_len:
            raise ConfigError("total_steps must be >= episode_len")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.trials < 1 or self.horizon < 1 or self.rollouts < 1:
            raise ConfigError("trials, horizon and rollouts must be >= 1")

    @property
    def n_episodes(self) -> int:
        return self.total_steps // self.env.episode_len

    @property
    def seeds(self) -> list[int]:
        return [self.env.seed + i for i in range(self.n_seeds)]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {"env": self.env.to_dict(), "agent": self.agent.to_dict(),
                "variant": list(self.variant), "total_steps": self.total_steps,
                "n_seeds": self.n_seeds, "output_dir": str(self.output_dir),
                "workers": self.workers, "trials": self.trials, "horizon": self.horizon,
                "rollouts": self.rollouts}


# -- agent comparison ------------------------------------------------------------
def _agent_config(cfg: ExperimentConfig, variant: str) -> AgentConfig:
    if variant == "olrl_minus_m":
        return dataclasses.replace(cfg.agent, merge_rounds_per_episode=0)
    return cfg.agent


def run_random(cfg: ExperimentConfig, seed: int, shard) -> list[dict]:
    """Uniform random actions; nothing is perceived or learned."""
    env = TabletopEnv(dataclasses.replace(cfg.env, seed=seed))
    rng = np.random.default_rng([seed, 2])
    rows, steps = [], 0
    for ep in range(cfg.n_episodes):
        t0 = time.perf_counter()
        env.reset(ep)
        score = 0.0
        for _ in range(cfg.env.episode_len):
            _, _, r = env.step(int(rng.integers(N_ACTIONS)))
            score += r
        steps += cfg.env.episode_len
        row = {"seed": seed, "episode": ep, "total_steps": steps, "score": score, "n_tracks": 0,
               "O": math.nan, "E_D": math.nan, "E_R": math.nan, "E_V": math.nan, "epsilon": 1.0,
               "wall_time_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
        write_metrics_row(shard, row)
        rows.append(row)
    return rows


def run_agent(cfg: ExperimentConfig, variant: str, seed: int, shard, run_dir: Path) -> list[dict]:
    acfg = _agent_config(cfg, variant)
    env = TabletopEnv(dataclasses.replace(cfg.env, seed=seed))
    shape = (cfg.env.render_h, cfg.env.render_w)
    trace = run_dir / "trace.csv" if acfg.merge_rounds_per_episode > 0 else None
    agent = Agent(acfg, shape, seed=seed, trace_path=trace)
    rows = []
    for ep in range(cfg.n_episodes):
        log = run_episode(env, agent, ep)
        obj = agent.evaluate()
        row = {"seed": seed, "episode": ep, "total_steps": agent.steps, "score": log.score,
               "n_tracks": agent.tmap.n_tracks, **obj, "epsilon": log.epsilon,
               "wall_time_ms": round(log.wall_time_ms, 3)}
        write_metrics_row(shard, row)
        rows.append(row)
    write_tracklet_archive(run_dir / "tracklets.jsonl", agent.perception.tracker.tracklets.values())
    agent.archive.to_jsonl(run_dir / "experiences.jsonl", agent.tmap)
    if agent.models is not None:
        agent.models.save(run_dir / "models.json")
    with open(run_dir / "map.json", "w") as fh:
        json.dump(agent.tmap.to_dict(), fh)
    return rows


def _run_one(args):
    cfg, variant, seed = args
    run_dir = Path(cfg.output_dir) / variant / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    shard = run_dir / "metrics.csv"
    if shard.exists():
        shard.unlink()
    if variant == "random":
        return variant, seed, run_random(cfg, seed, shard)
    return variant, seed, run_agent(cfg, variant, seed, shard, run_dir)


def summarize(rows_by_variant: dict) -> dict:
    """Mean and population std of the final-episode score per variant."""
    out = {}
    for variant, rows in rows_by_variant.items():
        last = {}
        for r in rows:
            if r["seed"] not in last or r["episode"] > last[r["seed"]]["episode"]:
                last[r["seed"]] = r
        scores = np.array([last[s]["score"] for s in sorted(last)], dtype=float)
        out[variant] = {"n_seeds": len(scores), "mean": float(scores.mean()),
                        "std": float(scores.std()), "final_scores": scores.tolist()}
    return out


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every variant for every seed, then merge the shards and summarize.

    Each (variant, seed) writes ``<out>/<variant>/seed_<s>/metrics.csv``;
    the merged ``<out>/<variant>/metrics.csv`` is ordered by seed.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
    jobs = [(cfg, v, s) for v in cfg.variant for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    by_variant: dict[str, list] = {v: [] for v in cfg.variant}
    for variant, _, rows in sorted(results, key=lambda x: (x[0], x[1])):
        by_variant[variant].extend(rows)
    for variant, rows in by_variant.items():
        merged = out / variant / "metrics.csv"
        if merged.exists():
            merged.unlink()
        for r in rows:
            write_metrics_row(merged, r)
    summary = summarize(by_variant)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "n_seeds", "mean_final_score", "std_final_score"])
        for v, s in summary.items():
            w.writerow([v, s["n_seeds"], repr(s["mean"]), repr(s["std"])])
    return summary


# -- dynamics evaluation -----------------------------------------------------------
def body_pixels(state) -> np.ndarray:
    """Body centres in pixel coordinates (x = column, y = row)."""
    cfg = state.config
    return state.centers * np.array([cfg.render_w, cfg.render_h]) - 0.5


def rollout_errors(dyn: DynamicsModel, state: ObjectState, actions, actual, rng: np.random.Generator,
                   rollouts: int = 10, shape=(64, 64)) -> np.ndarray:
    """Mean distance between sampled and actual positions, shape (H, K).

    ``actual[h, k]`` is track k's true position after ``actions[:h + 1]``;
    rows of tracks absent from ``state`` are NaN. Presence is not sampled,
    so every present track keeps a position for the whole rollout.
    """
    actions = np.asarray(actions, dtype=np.int64)
    tables = ContactTables(state)
    bs = BatchState.from_state(state, rollouts)
    err = np.full((len(actions), state.n_tracks), np.nan)
    for h, a in enumerate(actions):
        bs = sample_batch(dyn, None, bs, a, rng, tables, shape)
        d = np.linalg.norm(bs.p - np.asarray(actual[h])[None], axis=-1)
        err[h] = d.mean(axis=0)
    err[:, ~np.asarray(state.present, bool)] = np.nan
    return err


def constant_velocity_errors(state: ObjectState, actual) -> np.ndarray:
    """Distance of the last-velocity extrapolation to ``actual``, shape (H, K)."""
    actual = np.asarray(actual, dtype=float)
    v = np.where(np.asarray(state.v_ok)[:, None], np.nan_to_num(state.v_a), 0.0)
    h = np.arange(1, len(actual) + 1, dtype=float)[:, None, None]
    pred = state.p_a[None] + h * v[None]
    return np.linalg.norm(pred - actual, axis=-1)


def _track_bodies(state: ObjectState, labels: np.ndarray) -> dict[int, int]:
    """Majority ground-truth body of each present track (table tracks omitted)."""
    out = {}
    for k, cloud in state.clouds.items():
        if len(cloud) == 0 or not state.present[k]:
            continue
        votes = np.bincount(labels[cloud[:, 1], cloud[:, 0]] + 1)
        b = int(votes.argmax()) - 1
        if b >= 0:
            out[k] = b
    return out


def eval_dynamics(cfg: ExperimentConfig, seed: int | None = None, out_path=None) -> dict:
    """Error vs open-loop horizon of the learned dynamics and the constant-velocity baseline.

    The agent observes ``total_steps`` random actions and fits its models.
    Each trial then starts a fresh episode, plays n ~ U[50, 150] random
    actions, and rolls the model forward for ``horizon`` further random
    actions. Errors are measured on displacements from the start, so the
    gap between a track's visible-pixel median and the body centre cancels.
    """
    seed = cfg.env.seed if seed is None else seed
    if cfg.env.episode_len < 150 + cfg.horizon:
        raise ConfigError("eval-dynamics needs episode_len >= 150 + horizon")
    acfg = dataclasses.replace(cfg.agent, eps_start=1.0, eps_end=1.0)
    if cfg.variant == ("olrl_minus_m",):
        acfg = dataclasses.replace(acfg, merge_rounds_per_episode=0)
    env = TabletopEnv(dataclasses.replace(cfg.env, seed=seed))
    shape = (cfg.env.render_h, cfg.env.render_w)
    agent = Agent(acfg, shape, seed=seed)
    for ep in range(cfg.n_episodes):
        run_episode(env, agent, ep)
    models = agent.models
    rng = np.random.default_rng([seed, 5])
    H = cfg.horizon
    sums = {k: np.zeros(H) for k in DYNAMICS_COLUMNS[1:]}
    counts = {k: np.zeros(H) for k in DYNAMICS_COLUMNS[1:]}
    for trial in range(cfg.trials):
        ep = cfg.n_episodes + trial
        st, frame = env.reset(ep)
        n = int(rng.integers(50, 151))
        for t in range(n):
            a = agent.act(frame, ep, t)
            st, frame, r = env.step(a)
            agent.feedback(a, r)
        agent.perception.observe(frame, ep, n)
        state = agent.current_state()
        bodies = _track_bodies(state, label_image(st))
        actions = rng.integers(N_ACTIONS, size=H)
        start = body_pixels(st)
        actual = np.repeat(state.p_a[None], H, axis=0)
        for h, a in enumerate(actions):
            st, _, _ = env.step(int(a))
            for k, b in bodies.items():
                actual[h, k] = state.p_a[k] + body_pixels(st)[b] - start[b]
        model = rollout_errors(models.dynamics, state, actions, actual, rng, cfg.rollouts, shape)
        const = constant_velocity_errors(state, actual)
        ks = sorted(bodies)
        agent_ks = [k for k in ks if bodies[k] == 0]
        for name, err, sel in (("model_all", model, ks), ("model_agent", model, agent_ks),
                               ("const_vel_all", const, ks), ("const_vel_agent", const, agent_ks)):
            if sel:
                sums[name] += err[:, sel].mean(axis=1)
                counts[name] += 1
    result = {"horizon": list(range(1, H + 1))}
    for name in DYNAMICS_COLUMNS[1:]:
        with np.errstate(invalid="ignore"):
            result[name] = (sums[name] / counts[name]).tolist()
    result["trials_with_agent"] = int(counts["model_agent"][0])
    if out_path is not None:
        write_dynamics_csv(out_path, result)
    return result


def write_dynamics_csv(path, result: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DYNAMICS_COLUMNS)
        for i, h in enumerate(result["horizon"]):
            w.writerow([h] + [repr(float(result[c][i])) for c in DYNAMICS_COLUMNS[1:]])


# -- reports -------------------------------------------------------------------------
def read_numeric_csv(path, columns) -> list[dict]:
    """Rows of a CSV whose header equals ``columns``; every value must parse as a float."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file, expected header", row=0)
    if rows[0] != list(columns):
        raise ParseError(f"{path}: header {rows[0]} != {list(columns)}", row=0)
    out = []
    for i, r in enumerate(rows[1:], start=1):
        if len(r) != len(columns):
            raise ParseError(f"{path}: expected {len(columns)} fields, got {len(r)}", row=i)
        try:
            out.append({c: float(x) for c, x in zip(columns, r)})
        except ValueError as e:
            raise ParseError(f"{path}: {e}", row=i) from e
    return out


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def svg_line_plot(series: dict, title: str, xlabel: str, ylabel: str,
                  width: int = 480, height: int = 320) -> str:
    """Deterministic SVG of named ``[(x, y), ...]`` series; NaN points are skipped."""
    pts = [(x, y) for s in series.values() for x, y in s if math.isfinite(x) and math.isfinite(y)]
    x0, x1 = (min(p[0] for p in pts), max(p[0] for p in pts)) if pts else (0.0, 1.0)
    y0, y1 = (min(0.0, min(p[1] for p in pts)), max(p[1] for p in pts)) if pts else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    ml, mr, mt, mb = 60, 130, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for i in range(5):
        fx, fy = x0 + (x1 - x0) * i / 4, y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{_fmt(sx(fx))}" y="{mt + ph + 16}" text-anchor="middle" '
                   f'font-size="10">{fx:.4g}</text>')
        out.append(f'<text x="{ml - 6}" y="{_fmt(sy(fy) + 3)}" text-anchor="end" '
                   f'font-size="10">{fy:.4g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" '
               f'font-size="12">{xlabel}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>')
    for n, (name, s) in enumerate(series.items()):
        color = PALETTE[n % len(PALETTE)]
        good = [(sx(x), sy(y)) for x, y in s if math.isfinite(x) and math.isfinite(y)]
        if len(good) > 1:
            path = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in good)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a, b in good:
            out.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2.5" fill="{color}"/>')
        ly = mt + 14 * n + 8
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 28}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 32}" y="{ly + 4}" font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def learning_curves(rows: list[dict]) -> list[tuple[float, float]]:
    """Mean score across seeds at each total_steps value."""
    by_step: dict[float, list] = {}
    for r in rows:
        by_step.setdefault(r["total_steps"], []).append(r["score"])
    return [(s, float(np.mean(v))) for s, v in sorted(by_step.items())]


def render_report(in_dir) -> list[Path]:
    """Write ``learning_curves.svg`` and ``dynamics.svg`` for the CSVs found in ``in_dir``."""
    root = Path(in_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    written = []
    metric_files = sorted(p for p in root.glob("*/metrics.csv"))
    if metric_files:
        series = {p.parent.name: learning_curves(read_numeric_csv(p, METRIC_COLUMNS))
                  for p in metric_files}
        path = root / "learning_curves.svg"
        path.write_text(svg_line_plot(series, "Episode score", "total steps", "mean score"))
        written.append(path)
    dyn = root / "dynamics.csv"
    if dyn.exists():
        rows = read_numeric_csv(dyn, DYNAMICS_COLUMNS)
        series = {c: [(r["horizon"], r[c]) for r in rows] for c in DYNAMICS_COLUMNS[1:]}
        path = root / "dynamics.svg"
        path.write_text(svg_line_plot(series, "Position error", "horizon", "mean distance (px)"))
        written.append(path)
    if not written:
        raise FileNotFoundError(f"no metrics.csv or dynamics.csv under {root}")
    return written
