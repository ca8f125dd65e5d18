"""Scripted scenes with ground truth for checking the objective without RL."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envsim import N_ACTIONS, EnvConfig, TabletopEnv, label_image
from .objstate import Archive, Perception


@dataclass
class Scene:
    archive: Archive
    # tracklet id -> majority ground-truth body (-1 = table)
    labels: dict
    config: EnvConfig
    # tracklet id -> pixel counts per body over its lifetime, index 0 = table
    overlap: dict | None = None

    def tracklets_of(self, body: int, min_frames: int = 1) -> list[int]:
        """Tracklets of ``body``, longest first."""
        A = self.archive
        ids = [t for t, b in self.labels.items()
               if b == body and len(A.tracklet_frames[t]) >= min_frames]
        return sorted(ids, key=lambda t: (-len(A.tracklet_frames[t]), t))


def perceive_rollout(config: EnvConfig, episodes: int, policy_seed: int = 0) -> Scene:
    """Random-action rollout of whole episodes through perception."""
    env = TabletopEnv(config)
    P = Perception((config.render_h, config.render_w))
    rng = np.random.default_rng([config.seed, policy_seed, 11])
    votes: dict[int, np.ndarray] = {}
    n_bodies = 1 + config.n_targets + config.n_distractors

    def observe(st, frame, ep, t):
        g = P.observe(frame, ep, t)
        gt = label_image(st)
        for tid, seg in zip(P.last_owner, P.last_segments):
            v = votes.setdefault(tid, np.zeros(n_bodies + 1))
            v += np.bincount(gt[seg.mask] + 1, minlength=n_bodies + 1)
        return g

    for ep in range(episodes):
        st, frame = env.reset(ep)
        for t in range(config.episode_len):
            g = observe(st, frame, ep, t)
            a = int(rng.integers(N_ACTIONS))
            st, frame, r = env.step(a)
            P.archive.set_transition(g, a, r)
        observe(st, frame, ep, config.episode_len)
        P.archive.end_episode(ep)
    labels = {tid: int(v.argmax()) - 1 for tid, v in votes.items()}
    return Scene(P.archive, labels, config, votes)


def relabel(archive: Archive, rename) -> Archive:
    """Copy of ``archive`` with tracklet ``tid`` of frame ``g`` renamed to ``rename(g, tid)``."""
    out = Archive(archive.shape, archive.contact_radius)
    out.episode = list(archive.episode)
    out.t = list(archive.t)
    out.actions = list(archive.actions)
    out.rewards = list(archive.rewards)
    out.completed = set(archive.completed)
    for g in range(len(archive)):
        coords, meds = {}, {}
        for tid, xy in archive.coords[g].items():
            new = rename(g, tid)
            coords[new] = xy
            meds[new] = archive.medians[g][tid]
            out.tracklet_frames.setdefault(new, []).append(g)
            out.point_counts[new] = out.point_counts.get(new, 0) + len(xy)
        out.coords.append(coords)
        out.medians.append(meds)
    for (a, b), frames in archive.pair_contacts.items():
        for g in frames:
            na, nb = rename(g, a), rename(g, b)
            if na != nb:
                out.pair_contacts.setdefault((min(na, nb), max(na, nb)), []).append(g)
    out.version = archive.version + 1
    return out


def handoff_scene(seed: int, episodes: int = 2, episode_len: int = 150, block: int = 40):
    """Gather rollout whose agent tracklet is cut into two ids alternating every ``block`` frames.

    Returns ``(scene, (part_a, part_b), other)`` where ``other`` is the
    longest tracklet of a target, a behaviorally distinct object.
    """
    cfg = EnvConfig(task="gather", seed=seed, episode_len=episode_len)
    scene = perceive_rollout(cfg, episodes)
    agent = scene.tracklets_of(0)[0]
    other = scene.tracklets_of(1)[0]
    split = max(scene.labels) + 1

    def rename(g, tid):
        return split if tid == agent and (g // block) % 2 == 1 else tid

    labels = dict(scene.labels)
    labels[split] = 0
    return Scene(relabel(scene.archive, rename), labels, cfg), (agent, split), other


def distractor_scene(seed: int, episodes: int = 2, episode_len: int = 150):
    """Gather rollout with one static distractor body; returns ``(scene, distractor_tracklet)``."""
    cfg = EnvConfig(task="gather", seed=seed, episode_len=episode_len, n_distractors=1)
    scene = perceive_rollout(cfg, episodes)
    body = 1 + cfg.n_targets
    return scene, scene.tracklets_of(body)[0]
