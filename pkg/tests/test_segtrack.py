import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olrl.envsim import EnvConfig, TabletopEnv, label_image
from olrl.errors import UsageError
from olrl.segtrack import (
    SegmentMask,
    Tracker,
    Tracklet,
    TrackWeights,
    fit_track_classifier,
    greedy_assign,
    match,
    read_tracklet_archive,
    segment,
    segment_labels,
    segment_neighbors,
    tracking_error,
    tracking_features,
    write_tracklet_archive,
    zernike_descriptor,
)
from olrl.segtrack.tracking import rle_decode, rle_encode

ONES = TrackWeights(w=(1, 1, 1, 1, 1, 1), w_color=0.0)


def _frame(rgb, depth=None):
    rgb = np.asarray(rgb, dtype=float)
    f = np.empty(rgb.shape[:2] + (4,))
    f[..., :3] = rgb
    f[..., 3] = 1.0 if depth is None else depth
    return f


def _square(y, x, size=3, shape=(16, 16)):
    m = np.zeros(shape, dtype=bool)
    m[y:y + size, x:x + size] = True
    return SegmentMask.from_mask(m)


def test_uniform_frame_is_one_segment():
    segs = segment(_frame(np.full((10, 12, 3), 50.0)))
    assert len(segs) == 1 and segs[0].pixel_count == 120


def test_black_white_halves_two_segments():
    rgb = np.zeros((8, 8, 3))
    rgb[:, 4:] = 255.0
    segs = segment(_frame(rgb), scale=1000, sigma=0, min_size=1)
    assert len(segs) == 2
    assert sorted(s.pixel_count for s in segs) == [32, 32]
    # the crossing edge weight is 441.7 > 1000 / 32
    assert math.sqrt(3 * 255.0 ** 2) > 1000 / 32


def test_rendered_scene_segments_are_pure():
    env = TabletopEnv(EnvConfig(seed=4))
    st_, frame = env.reset(0)
    segs = segment(frame)
    assert 4 <= len(segs) <= 40
    gt = label_image(st_)
    for s in segs:
        bodies = set(np.unique(gt[s.mask]).tolist()) - {-1}
        assert len(bodies) <= 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1.0, 5000.0), min_size=st.integers(1, 20))
def test_segmentation_is_partition(seed, scale, min_size):
    rng = np.random.default_rng(seed)
    f = _frame(rng.integers(0, 4, size=(12, 10, 3)) * 60.0, rng.random((12, 10)))
    labels = segment_labels(f, scale, 0.0, min_size)
    segs = segment(f, scale, 0.0, min_size)
    cover = np.zeros((12, 10), dtype=int)
    for s in segs:
        cover += s.mask
    assert np.all(cover == 1)
    assert labels.min() == 0 and labels.max() == len(segs) - 1


def test_segment_median_and_count():
    m = np.zeros((5, 5), dtype=bool)
    m[1, 1:4] = True
    s = SegmentMask.from_mask(m)
    assert s.pixel_count == 3
    np.testing.assert_array_equal(s.median, [2.0, 1.0])


def _disc(r, shape=(41, 41)):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    c = (shape[0] // 2, shape[1] // 2)
    return (yy - c[0]) ** 2 + (xx - c[1]) ** 2 <= r * r


def test_zernike_has_25_components_and_self_zero():
    z = zernike_descriptor(_disc(8))
    assert z.shape == (25,)
    assert np.abs(np.log(np.maximum(z, 1e-9)) - np.log(np.maximum(z, 1e-9))).sum() == 0


def test_zernike_rotation_invariant():
    m = np.zeros((41, 41), dtype=bool)
    m[10:30, 15:22] = True
    m[25:30, 15:33] = True
    d = np.abs(zernike_descriptor(m) - zernike_descriptor(np.rot90(m)))
    assert d.max() < 5e-2


def test_zernike_disc_z00_matches_integral():
    # |Z_00| = (1/pi) * area(unit disc) = 1 for the full disc
    z = zernike_descriptor(_disc(15))
    assert z[0] == pytest.approx(1.0, rel=0.02)


def _tracklet(seg, moves=0, stays=4, t=3):
    tr = Tracklet(id=0)
    tr.entries.append((t, seg))
    tr.last_seen = t
    tr.moves_count, tr.stays_count = moves, stays
    return tr


def test_tracking_error_static_example():
    s = _square(4, 4)
    tr = _tracklet(s)
    f = tracking_features(tr, s, 4, ONES)
    np.testing.assert_allclose(f[:4], 0.0)
    assert f[4] == pytest.approx(-math.log(5 / 6), abs=1e-12)
    assert tracking_error(tr, s, 4, ONES) == pytest.approx(0.18232155679395462, abs=1e-9)


def test_size_and_permanence_features():
    ten = SegmentMask.from_mask(np.pad(np.ones((2, 5), bool), 4))
    twenty = SegmentMask.from_mask(np.pad(np.ones((4, 5), bool), 4))
    tr = _tracklet(ten, t=3)
    f = tracking_features(tr, twenty, 4, ONES)
    assert f[3] == pytest.approx(1.0)
    assert f[2] == 0.0
    assert tracking_features(tr, twenty, 9, ONES)[2] == 5.0


def test_displacement_feature_uses_neighbors():
    last, seg = _square(4, 4), _square(4, 6)
    nb = _square(10, 4)
    tr = _tracklet(last)
    expected = abs(np.linalg.norm(seg.median - nb.median) - np.linalg.norm(last.median - nb.median))
    assert tracking_features(tr, seg, 4, ONES, [nb])[0] == pytest.approx(expected)


def test_tracking_error_on_empty_tracklet():
    with pytest.raises(UsageError):
        tracking_error(Tracklet(id=1), _square(1, 1), 0, ONES)


@settings(max_examples=40, deadline=None)
@given(w=st.lists(st.floats(0, 5), min_size=6, max_size=6), moves=st.integers(0, 20),
       stays=st.integers(0, 20), dt=st.integers(1, 5), y=st.integers(0, 10), x=st.integers(0, 10))
def test_tracking_error_nonnegative(w, moves, stays, dt, y, x):
    tr = _tracklet(_square(3, 3), moves, stays)
    err = tracking_error(tr, _square(y, x), 3 + dt, TrackWeights(w=tuple(w)))
    assert err >= 0.0


def test_greedy_assign_examples():
    assert sorted(greedy_assign([[0.1, 5.0], [5.0, 0.1]], [1, 2], 1.0)) == [(0, 0), (1, 1)]
    assert greedy_assign([[5.0, 3.0]], [0], 1.0) == []
    assert greedy_assign([[0.1, 0.1]], [0], 1.0) == [(0, 0)]


def test_greedy_assign_matches_exhaustive_order():
    rng = np.random.default_rng(0)
    for _ in range(50):
        e = rng.random((4, 5)) * 2
        got = greedy_assign(e, list(range(4)), 1.0)
        # oracle: repeatedly take the global minimum among free rows/cols
        free_r, free_c, want = set(range(4)), set(range(5)), []
        while True:
            cands = [(e[i, j], i, j) for i in free_r for j in free_c if e[i, j] <= 1.0]
            if not cands:
                break
            _, i, j = min(cands)
            want.append((i, j))
            free_r.discard(i)
            free_c.discard(j)
        assert got == want


def test_match_spawns_unmatched_and_breaks_ties():
    s = _square(4, 4)
    tr = _tracklet(s)
    assignments, new = match([tr], [s, _square(4, 4)], 4, ONES)
    assert assignments == [(0, 0)]
    assert [t.id for t in new] == [1]
    assert tr.last_seen == 4 and tr.stays_count == 5


def test_match_all_above_threshold():
    tr = _tracklet(_square(0, 0))
    far = TrackWeights(w=(1, 1, 1, 1, 1, 1), t_e=1e-6)
    assignments, new = match([tr], [_square(9, 9), _square(1, 9)], 4, far)
    assert assignments == [] and len(new) == 2


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000))
def test_match_is_one_to_one(seed):
    rng = np.random.default_rng(seed)
    trs = [_tracklet(_square(*rng.integers(0, 12, 2))) for _ in range(4)]
    for i, t in enumerate(trs):
        t.id = i
    segs = [_square(*rng.integers(0, 12, 2)) for _ in range(5)]
    w = TrackWeights(w=(0.1, 0.01, 0, 0.2, 0.1, 0.1), t_e=3.0)
    assignments, new = match(trs, segs, 4, w)
    assert len({t for t, _ in assignments}) == len(assignments)
    assert len({j for _, j in assignments}) == len(assignments)
    assert len(assignments) + len(new) == len(segs)


def test_classifier_insufficient_data_is_constant():
    tr = Tracklet(id=0)
    tr.negative_match_log = [(np.ones(6) * i, 1, 9) for i in range(5)]
    clf = fit_track_classifier(tr)
    np.testing.assert_allclose(clf.score(np.random.default_rng(0).random((7, 6))), 0.5)


def test_classifier_learns_permanence_split():
    tr = Tracklet(id=0)
    rng = np.random.default_rng(1)
    neg = [np.r_[rng.random(2), rng.integers(1, 5), rng.random(3)] for _ in range(30)]
    pos = [np.r_[rng.random(2), 0.0, rng.random(3)] for _ in range(30)]
    tr.negative_match_log = [(f, 1, 9) for f in neg]
    clf = fit_track_classifier(tr, pos)
    X = np.array(neg + pos)
    y = np.r_[np.ones(30), np.zeros(30)]
    assert np.all((clf.score(X) > 0.5) == (y == 1))


def test_classifier_all_negative_scores_high():
    tr = Tracklet(id=0)
    rng = np.random.default_rng(2)
    tr.negative_match_log = [(rng.random(6), 1, 3) for _ in range(20)]
    clf = fit_track_classifier(tr)
    assert np.all(clf.score(np.array([f for f, _, _ in tr.negative_match_log])) >= 0.5)


def test_neighbors_ignore_untracked_labels():
    labels = np.array([[0, 0, -1, 1], [0, 0, -1, 1]])
    assert segment_neighbors(labels, 1) == [[], []]
    assert segment_neighbors(labels, 2) == [[1], [0]]


def test_tracker_is_deterministic_and_pure():
    env = TabletopEnv(EnvConfig(seed=6))
    st_, frame = env.reset(0)
    frames, states = [frame], [st_]
    rng = np.random.default_rng(0)
    for _ in range(30):
        st_, frame, _ = env.step(int(rng.integers(5)))
        frames.append(frame)
        states.append(st_)

    def run():
        tr = Tracker()
        owners = []
        for t, f in enumerate(frames):
            labels = segment_labels(f)
            segs = [SegmentMask.from_mask(labels == k, f) for k in range(labels.max() + 1)]
            owners.append(tr.update(t, segs, labels))
        return tr, owners

    (ta, oa), (_, ob) = run(), run()
    assert oa == ob
    for tid, tr in ta.tracklets.items():
        bodies = set()
        for t, seg in tr.entries:
            bodies |= set(np.unique(label_image(states[t])[seg.mask]).tolist()) - {-1}
        assert len(bodies) <= 1


def test_rle_roundtrip_and_archive(tmp_path):
    rng = np.random.default_rng(3)
    m = rng.random((9, 7)) > 0.5
    np.testing.assert_array_equal(rle_decode(rle_encode(m), m.shape), m)
    tr = Tracklet(id=4)
    tr.append(0, SegmentMask.from_mask(m))
    tr.append(2, SegmentMask.from_mask(~m))
    p = tmp_path / "tracklets.jsonl"
    write_tracklet_archive(p, [tr])
    back = read_tracklet_archive(p)
    assert [t for t, _ in back[4]] == [0, 2]
    np.testing.assert_array_equal(back[4][1][1], ~m)
