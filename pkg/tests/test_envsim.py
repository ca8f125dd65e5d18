import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from olrl.envsim import (
    Action,
    EnvConfig,
    N_ACTIONS,
    TabletopEnv,
    dump_frames,
    label_image,
    render,
    step,
)
from olrl.errors import ConfigError, UsageError


def _state(cfg=None, episode=0):
    env = TabletopEnv(cfg or EnvConfig(seed=3))
    s, _ = env.reset(episode)
    return env, s


def test_exactly_five_actions():
    assert N_ACTIONS == 5
    assert [a.name for a in Action] == ["NOOP", "PLUS_X", "MINUS_X", "PLUS_Y", "MINUS_Y"]


def test_default_speeds_follow_task():
    assert EnvConfig(task="gather").target_speed == 0.2
    assert EnvConfig(task="avoid").target_speed == 0.05
    assert EnvConfig(task="avoid").contact_reward == -1.0


@pytest.mark.parametrize("bad", [
    {"task": "fetch"},
    {"agent_speed": 0.0},
    {"radius_range": (0.0, 0.1)},
    {"radius_range": (0.1, 0.3)},
    {"render_h": 8},
    {"episode_len": 0},
    {"noise_std": -1.0},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        EnvConfig(**bad)


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        EnvConfig.from_dict({"task": "gather", "speed": 1})


def test_fixed_appearance_across_episodes():
    env = TabletopEnv(EnvConfig(seed=5))
    a, _ = env.reset(0)
    b, _ = env.reset(1)
    np.testing.assert_array_equal(a.colors, b.colors)
    np.testing.assert_array_equal(a.radii, b.radii)


def test_randomized_appearance_changes():
    env = TabletopEnv(EnvConfig(seed=5, randomize=True))
    a, _ = env.reset(0)
    b, _ = env.reset(1)
    assert not np.allclose(a.colors, b.colors)


def test_crowded_arena_is_config_error():
    cfg = EnvConfig(radius_range=(0.2, 0.25), n_targets=8)
    with pytest.raises(ConfigError):
        TabletopEnv(cfg).reset(0)


def test_agent_moves_along_action():
    _, s = _state()
    s.centers[0] = [0.5, 0.5]
    s.centers[1:] = [[0.1, 0.1], [0.9, 0.9]][: len(s.centers) - 1]
    nxt, _, r = step(s, Action.PLUS_X)
    np.testing.assert_allclose(nxt.centers[0], [0.6, 0.5], atol=1e-12)
    assert r == 0.0


def test_noop_keeps_agent():
    _, s = _state()
    s.centers[0] = [0.5, 0.5]
    s.centers[1:] = [[0.1, 0.1], [0.9, 0.9]]
    nxt, _, r = step(s, Action.NOOP)
    np.testing.assert_array_equal(nxt.centers[0], [0.5, 0.5])
    assert r == 0.0


def test_gather_contact_pays_and_respawns():
    _, s = _state()
    s.centers[0] = [0.5, 0.5]
    s.centers[1] = [0.5 + 0.5 * (s.radii[0] + s.radii[1]), 0.5]
    s.centers[2] = [0.1 + s.radii[2], 0.9 - s.radii[2]]
    nxt, _, r = step(s, Action.NOOP)
    assert r == 1.0
    d = np.linalg.norm(nxt.centers[1] - nxt.centers[0])
    assert d > 0.0 and not np.allclose(nxt.centers[1], s.centers[1] + 0.2 * s.headings[1])


def test_avoid_contact_penalizes_without_respawn():
    _, s = _state(EnvConfig(task="avoid", seed=3))
    s.centers[0] = [0.5, 0.5]
    s.centers[1] = [0.5 + 0.5 * (s.radii[0] + s.radii[1]), 0.5]
    s.centers[2] = [0.1 + s.radii[2], 0.9 - s.radii[2]]
    nxt, _, r = step(s, Action.NOOP)
    assert r == -1.0
    np.testing.assert_allclose(nxt.centers[1], s.centers[1] + 0.05 * s.headings[1])


def test_terminated_episode_cannot_step():
    env = TabletopEnv(EnvConfig(seed=1, episode_len=2))
    env.reset(0)
    env.step(0)
    env.step(0)
    with pytest.raises(UsageError):
        env.step(0)


def test_empty_arena_render():
    _, s = _state()
    s = dataclasses.replace(s, centers=np.zeros((0, 2)), radii=np.zeros(0), colors=np.zeros((0, 3)),
                            headings=np.zeros((0, 2)))
    f = render(s)
    assert np.all(f[..., 3] == 1.0)
    assert np.all(f[..., :3] == 96.0)


def test_body_center_depth_is_half():
    _, s = _state(EnvConfig(seed=3, render_h=64, render_w=64))
    s.centers[0] = [(20 + 0.5) / 64, (30 + 0.5) / 64]
    f = render(s)
    assert f[30, 20, 3] == pytest.approx(0.5)


def test_render_is_deterministic():
    _, s = _state()
    np.testing.assert_array_equal(render(s), render(s))


def _rollout(cfg, actions):
    env = TabletopEnv(cfg)
    _, f = env.reset(0)
    frames, rewards = [f], []
    for a in actions:
        _, f, r = env.step(a)
        frames.append(f)
        rewards.append(r)
    return np.stack(frames), rewards


def test_rollouts_bit_identical():
    acts = np.random.default_rng(0).integers(5, size=60).tolist()
    cfg = EnvConfig(seed=9, noise_std=2.0)
    fa, ra = _rollout(cfg, acts)
    fb, rb = _rollout(cfg, acts)
    assert fa.tobytes() == fb.tobytes()
    assert ra == rb


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), actions=st.lists(st.integers(0, 4), min_size=1, max_size=40))
def test_invariants_along_rollouts(seed, actions):
    cfg = EnvConfig(seed=seed)
    env = TabletopEnv(cfg)
    s, f = env.reset(0)
    speeds0 = np.linalg.norm(s.headings[1:], axis=1)
    for a in actions:
        prev = s
        s, f, r = env.step(a)
        lo, hi = cfg.radius_range
        assert np.all((s.radii >= lo) & (s.radii <= hi))
        assert np.all(s.centers >= 0) and np.all(s.centers <= 1)
        np.testing.assert_allclose(np.linalg.norm(s.headings[1:], axis=1), speeds0, atol=1e-12)
        if r != 0:
            assert prev.overlapping_targets()
        assert f[..., 3].min() >= 0.5 and f[..., 3].max() <= 1.0
        bg = label_image(s) == -1
        assert np.all(f[bg, 3] == 1.0)


def test_dump_frames_writes_rgb_and_16bit_depth(tmp_path):
    written = dump_frames(EnvConfig(seed=2), 3, tmp_path)
    assert len(written) == 4
    rgb = np.asarray(Image.open(written[0][0]))
    depth = Image.open(written[0][1])
    assert rgb.shape == (64, 64, 3)
    assert depth.mode.startswith("I;16") or depth.mode == "I"
    assert np.asarray(depth).max() == 65535
