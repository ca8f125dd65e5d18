"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4-6 run the full experiments from ``configs/`` and take tens of
minutes on one core.
"""
import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np

from olrl.agent import METRIC_COLUMNS, AgentConfig, plan_value, select_action, sequence_values
from olrl.bench import ExperimentConfig, eval_dynamics, run_experiment
from olrl.envsim import EnvConfig, TabletopEnv
from olrl.models import (
    ModelBundle,
    PairwiseModel,
    VelocityGrid,
    fit_dynamics,
    mc_returns,
    predict_pairwise,
    table_dyn_features,
)
from olrl.objective import (
    ObjectiveConfig,
    accept_merge,
    dynamics_error,
    evaluate_map,
    expected_abs_error,
    optimize_map,
    round_holdout,
    squared_error,
)
from olrl.objstate import TrackletMap, build_table, compute_contacts, extract_state
from olrl.scenes import distractor_scene, handoff_scene, perceive_rollout
from olrl.segtrack import SegmentMask, Tracklet, TrackWeights, segment_labels, tracking_error
from olrl.trees import Constant, FitCache

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = range(5)


def _experiment(name, out):
    d = json.loads((CONFIGS / name).read_text())
    d["output_dir"] = str(out)
    d["workers"] = os.cpu_count() or 1
    return ExperimentConfig.from_dict(d)


def _close(a, b, tol=1e-9):
    return abs(a - b) <= tol


# -- 1 -------------------------------------------------------------------------------
def _brute_dynamics_error(A):
    tm = TrackletMap.identity(A.tracklet_ids, A.point_counts)
    T = build_table(A, tm)
    hold = round_holdout(ObjectiveConfig(), T.n_frames) & T.exp
    dyn = fit_dynamics(T, VelocityGrid(), 0, T.exp & ~hold, 1 / 61)
    grid = np.arange(-30, 31)
    total, n = 0.0, 0
    for g in np.flatnonzero(hold):
        for k in range(T.n_tracks):
            if T.present[k, g] and T.present[k, g + 1]:
                probs = dyn.dist(k, table_dyn_features(T, k, np.array([g])))[0]
                for d in range(2):
                    total += sum(p * abs(T.vel[k, g + 1, d] - v) for p, v in zip(probs[d], grid))
                    n += 1
    return dynamics_error(dyn, T, hold), total / n


def test_criterion_1_formula_oracles(verdict):
    t0 = time.perf_counter()
    checks = {}
    checks["plan_value"] = (_close(plan_value([0, 1], 2.0, 0.95), 2.755, 1e-12)
                            and plan_value([0, 0], 0.0, 0.95) == 0.0
                            and plan_value([0.3, 9.0], 4.0, 0.0) == 0.3)
    G = mc_returns([0, 0, 1], 0.95)
    checks["mc_returns"] = (all(_close(g, w, 1e-12) for g, w in zip(G, [0.9025, 0.95, 1.0]))
                            and mc_returns([0, 0], 0.9).tolist() == [0, 0]
                            and mc_returns([2, -1], 0.0).tolist() == [2, -1])
    g = [-1, 0, 1]
    got, oracle = _brute_dynamics_error(perceive_rollout(EnvConfig(seed=2, episode_len=40), 2).archive)
    checks["E_D"] = (_close(expected_abs_error([0.1, 0.8, 0.1], [1.0], g)[0], 1.0, 1e-12)
                     and expected_abs_error([0, 0, 1], [1.0], g)[0] == 0.0
                     and _close(expected_abs_error([1 / 3] * 3, [0.0], g)[0], 2 / 3, 1e-12)
                     and _close(got, oracle))
    checks["E_R/E_V"] = (squared_error([1, 2], [1, 2]) == 0.0
                         and _close(squared_error([0, 1], [1, 1]), 0.5, 1e-12)
                         and _close(squared_error([0, 0], [1, -1]), 1.0, 1e-12))
    pw = PairwiseModel("reward", {(0, 1): Constant([1.0]), (1, 2): Constant([0.0])}, fallback=0.0)
    both = extract_state([{0: np.array([[10, 10]]), 1: np.array([[11, 10]]), 2: np.array([[12, 10]])}], 0)
    one = extract_state([{0: np.array([[10, 10]]), 1: np.array([[11, 10]]), 2: np.array([[40, 10]])}], 0)
    none = extract_state([{0: np.array([[10, 10]]), 1: np.array([[30, 10]]), 2: np.array([[50, 10]])}], 0)
    checks["contact mean"] = (_close(predict_pairwise(pw, both, 0), 0.5, 1e-12)
                              and predict_pairwise(pw, one, 0) == 1.0
                              and predict_pairwise(pw, none, 0) == 0.0)
    m = np.zeros((16, 16), bool)
    m[4:7, 4:7] = True
    seg = SegmentMask.from_mask(m)
    tr = Tracklet(id=0)
    tr.entries.append((3, seg))
    tr.last_seen, tr.moves_count, tr.stays_count = 3, 0, 4
    err = tracking_error(tr, seg, 4, TrackWeights(w=(1, 1, 1, 1, 1, 1), w_color=0.0))
    checks["tracking_error"] = _close(err, -math.log(5 / 6), 1e-9)  # only the permanence term is nonzero
    failed = [k for k, ok in checks.items() if not ok]
    verdict(1, "formula oracles", not failed,
            f"{len(checks) - len(failed)}/{len(checks)} groups match"
            + (f", failed {failed}" if failed else "") + f" in {time.perf_counter() - t0:.1f}s")


# -- 2 -------------------------------------------------------------------------------
def test_criterion_2_handoff_discrimination(verdict):
    t0 = time.perf_counter()
    cfg = ObjectiveConfig()
    ok = []
    for seed in SEEDS:
        scene, (a, b), other = handoff_scene(seed)
        A = scene.archive
        tm = TrackletMap.identity(A.tracklet_ids, A.point_counts)
        cache = FitCache()
        base = evaluate_map(tm, A, cfg, 0, cache).O
        same = evaluate_map(tm.merge(tm.mapping[a], tm.mapping[b], A.point_counts), A, cfg, 0, cache).O
        cross = evaluate_map(tm.merge(tm.mapping[a], tm.mapping[other], A.point_counts), A, cfg, 0, cache).O
        ok.append(accept_merge(base, same, cfg.c, cfg.relative_c)
                  and not accept_merge(base, cross, cfg.c, cfg.relative_c))
    dt = time.perf_counter() - t0
    verdict(2, "handoff discrimination", sum(ok) >= 4 and dt < 120, f"{sum(ok)}/5 seeds in {dt:.0f}s")


# -- 3 -------------------------------------------------------------------------------
def test_criterion_3_background_absorption(verdict):
    t0 = time.perf_counter()
    cfg = ObjectiveConfig()
    absorbed = []
    for seed in SEEDS:
        scene, d = distractor_scene(seed)
        A = scene.archive
        tm = TrackletMap.identity(A.tracklet_ids, A.point_counts)
        cache, rng = FitCache(), np.random.default_rng(seed)
        for rnd in range(10):
            tm, _ = optimize_map(tm, A, cfg, rng, rnd, cache)
            if tm.mapping[d] == tm.background_track:
                break
        absorbed.append(tm.mapping[d] == tm.background_track)
    dt = time.perf_counter() - t0
    verdict(3, "background absorption", sum(absorbed) >= 4 and dt < 120, f"{sum(absorbed)}/5 seeds in {dt:.0f}s")


# -- 4, 5 ----------------------------------------------------------------------------
def test_criterion_4_gather_efficiency(verdict, tmp_path):
    t0 = time.perf_counter()
    s = run_experiment(_experiment("gather.json", tmp_path))
    dt = time.perf_counter() - t0
    ratio = s["olrl"]["mean"] / s["random"]["mean"]
    verdict(4, "gather olrl vs random", ratio >= 2.0 and dt < 1800,
            f"olrl {s['olrl']['mean']:.1f}±{s['olrl']['std']:.1f}, random {s['random']['mean']:.1f}"
            f"±{s['random']['std']:.1f}, ratio {ratio:.2f} (need 2.0) in {dt / 60:.1f}min")


def test_criterion_5_randomization_ablation(verdict, tmp_path):
    t0 = time.perf_counter()
    s = run_experiment(_experiment("gather_r.json", tmp_path))
    dt = time.perf_counter() - t0
    ratio = s["olrl"]["mean"] / s["olrl_minus_m"]["mean"]
    verdict(5, "gather+r olrl vs olrl-m", ratio >= 1.5 and dt < 2700,
            f"olrl {s['olrl']['mean']:.1f}±{s['olrl']['std']:.1f}, olrl-m {s['olrl_minus_m']['mean']:.1f}"
            f"±{s['olrl_minus_m']['std']:.1f}, ratio {ratio:.2f} (need 1.5) in {dt / 60:.1f}min")


# -- 6 -------------------------------------------------------------------------------
def test_criterion_6_dynamics_quality(verdict, tmp_path):
    t0 = time.perf_counter()
    cfg = _experiment("dynamics.json", tmp_path)
    res = eval_dynamics(cfg, out_path=tmp_path / "dynamics.csv")
    dt = time.perf_counter() - t0
    half_diag = 0.5 * math.hypot(cfg.env.render_h, cfg.env.render_w)
    m10, c10 = res["model_agent"][9], res["const_vel_agent"][9]
    m100 = res["model_agent"][cfg.horizon - 1]
    ok = m10 <= c10 and math.isfinite(m100) and m100 < half_diag and dt < 900
    verdict(6, "dynamics quality", ok,
            f"agent h10 model {m10:.2f} vs const-vel {c10:.2f}, h100 model {m100:.2f} "
            f"(< {half_diag:.1f}), {res['trials_with_agent']} trials in {dt / 60:.1f}min")


# -- 7 -------------------------------------------------------------------------------
def test_criterion_7_tracker_purity(verdict):
    t0 = time.perf_counter()
    n = impure = 0
    for seed in SEEDS:
        for task, randomize in (("gather", False), ("gather", True), ("avoid", False)):
            scene = perceive_rollout(EnvConfig(task=task, seed=seed, episode_len=40, randomize=randomize), 1)
            for counts in scene.overlap.values():
                n += 1
                impure += int((counts[1:] > 0).sum() > 1)  # index 0 is the table
    dt = time.perf_counter() - t0
    verdict(7, "tracker purity", impure == 0 and dt < 60,
            f"{n - impure}/{n} tracklets touch at most one body in {dt:.0f}s")


# -- 8 -------------------------------------------------------------------------------
def _toy_planning(shift):
    from test_agent import _ToyDynamics

    reward = PairwiseModel("reward", {(0, 1): Constant([1.0])}, fallback=0.0)
    value = PairwiseModel("value", {(0, 1): Constant([shift])}, fallback=shift)
    models = ModelBundle(_ToyDynamics(), None, reward, value, [[0], [1]])
    return extract_state([{0: np.array([[10, 10]]), 1: np.array([[16, 10]])}], 0), models


def _metric_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    i = METRIC_COLUMNS.index("wall_time_ms")
    return [r[:i] + r[i + 1:] for r in rows]


def test_criterion_8_invariants(verdict, tmp_path):
    t0 = time.perf_counter()
    checks = {}
    env = TabletopEnv(EnvConfig(seed=4, episode_len=30, n_targets=4))
    _, frame = env.reset(0)
    rng = np.random.default_rng(0)
    part = True
    for _ in range(10):
        labels = segment_labels(frame)
        part &= labels.min() == 0 and set(np.unique(labels)) == set(range(labels.max() + 1))
        _, frame, _ = env.step(int(rng.integers(5)))
    checks["segmentation partition"] = bool(part)

    scene = perceive_rollout(EnvConfig(seed=1, episode_len=60), 2)
    A = scene.archive
    tm = TrackletMap.identity(A.tracklet_ids, A.point_counts)
    rep = evaluate_map(tm, A, ObjectiveConfig())
    T = build_table(A, tm)
    sums = [rep.dynamics.dist(k, table_dyn_features(T, k, np.arange(T.n_frames))).sum(-1)
            for k in range(T.n_tracks)]
    checks["distribution normalization"] = all(np.allclose(s, 1.0, atol=1e-9) for s in sums)
    checks["objective decomposition"] = rep.O == rep.E_D + rep.E_R + rep.E_V and rep.O >= 0

    clouds = [rng.integers(0, 20, size=(rng.integers(1, 6), 2)) for _ in range(6)]
    c = compute_contacts(clouds)
    checks["contact symmetry"] = bool(np.array_equal(c, c.T))

    ids = A.tracklet_ids
    maps = [tm, TrackletMap.from_groups([ids]),
            TrackletMap.from_groups([list(g) for g in np.array_split(rng.permutation(ids), 3) if len(g)])]
    checks["pixel conservation"] = all(
        sum(int(m.sum()) for m in A.track_masks(M, g).values()) == sum(len(xy) for xy in A.coords[g].values())
        for M in maps for g in range(0, len(A), 7))

    r = rng.normal(size=40)
    G = mc_returns(r, 0.95)
    checks["Bellman recurrence"] = G[-1] == r[-1] and all(G[t] == r[t] + 0.95 * G[t + 1] for t in range(39))

    cfg = AgentConfig(samples_per_path=3)
    (s0, m0), (s1, m1) = _toy_planning(0.0), _toy_planning(7.5)
    v0 = sequence_values(s0, m0, cfg, np.random.default_rng(2))
    v1 = sequence_values(s1, m1, cfg, np.random.default_rng(2))
    checks["argmax invariance"] = (np.allclose(v1 - v0, cfg.gamma ** 2 * 7.5, atol=1e-9)
                                   and select_action(s0, m0, cfg, np.random.default_rng(2))
                                   == select_action(s1, m1, cfg, np.random.default_rng(2)))

    small = {"env": {"episode_len": 60, "seed": 7}, "agent": {"eps_decay_steps": 60, "min_merge_experiences": 40},
             "variant": ["olrl", "random"], "total_steps": 120, "n_seeds": 1}
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        run_experiment(ExperimentConfig.from_dict({**small, "output_dir": str(out)}))
    seed_dir = Path("olrl") / "seed_7"
    checks["bit-determinism"] = (
        all(_metric_rows(outs[0] / v / "metrics.csv") == _metric_rows(outs[1] / v / "metrics.csv")
            for v in small["variant"])
        and all((outs[0] / seed_dir / f).read_bytes() == (outs[1] / seed_dir / f).read_bytes()
                for f in ("trace.csv", "tracklets.jsonl", "experiences.jsonl", "models.json", "map.json")))
    dt = time.perf_counter() - t0
    failed = [k for k, ok in checks.items() if not ok]
    verdict(8, "invariant suite", not failed and dt < 300,
            f"{len(checks) - len(failed)}/{len(checks)} invariants hold"
            + (f", failed {failed}" if failed else "") + f" in {dt:.0f}s")
