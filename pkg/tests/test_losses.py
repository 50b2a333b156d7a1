import numpy as np
import pytest

from dualcap import losses as L
from dualcap.calibrator import numeric_gradient
from dualcap import synth
from dualcap.alignment import apply_offset_to_trajectory
from dualcap.errors import EmptyCloud, EmptyCorrespondences, SizeMismatch, SpecInvalid
from dualcap.geometry import Intrinsics, PointCloud, Trajectory, backproject, project_points

from conftest import random_rotation


@pytest.fixture(scope="module")
def bundle():
    return synth.generate(0, synth.SceneSpec(), synth.MotionSpec(n_frames=30, stand_frames=5),
                          obs_spec=synth.ObservationSpec(global_spacing=0.06, cloud_stride=10))


def _problem(b, tracks=True):
    return L.CalibrationProblem(b.native_trajs, b.tracks if tracks else None, b.local_clouds,
                                b.global_cloud, b.landmark_obs, b.landmarks)


def _gt(b):
    return L.OffsetParams.from_transforms(b.offsets)


def _static_traj(view="v", n=1):
    k = Intrinsics(500, 500, 320, 240, 640, 480)
    return Trajectory(view, np.arange(n, dtype=float), np.stack([np.eye(3)] * n), np.zeros((n, 3)), k)


def test_offset_params_vector_roundtrip():
    o = L.OffsetParams([0.1, -4.0], [[1, 2, 3], [4, 5, 6]])
    assert np.array_equal(L.OffsetParams.from_vector(o.to_vector()).to_vector(), o.to_vector())
    assert abs(o.wrapped().yaw[1] - (-4.0 + 2 * np.pi)) < 1e-12
    with pytest.raises(SizeMismatch):
        L.OffsetParams([0.0], np.zeros((2, 3)))
    with pytest.raises(SpecInvalid):
        L.OffsetParams([np.nan], np.zeros((1, 3)))


def test_loss_weights_validation():
    with pytest.raises(SpecInvalid):
        L.LossWeights(0, 0, 0)
    with pytest.raises(SpecInvalid):
        L.LossWeights(-1, 0, 0)


def test_track_loss_zero_at_truth(bundle):
    assert L.track_loss(bundle.tracks, _gt(bundle), bundle.native_trajs) < 1e-12


def test_track_loss_single_pair():
    tr = [_static_traj("a"), _static_traj("b")]
    tracks = L.TrackedCorrespondences([0], [[320, 240]], [1.0], [1.0], [[320, 240]], [1.1], [1.0])
    assert np.isclose(L.track_loss(tracks, L.OffsetParams.zeros(2), tr), 0.01, atol=1e-15)


def test_track_loss_matches_naive_oracle(rng):
    for _ in range(100):
        k = Intrinsics(500, 500, 320, 240, 640, 480)
        trajs = []
        for v in range(2):
            n = 6
            R = np.stack([random_rotation(rng) for _ in range(n)])
            trajs.append(Trajectory(str(v), np.arange(n, dtype=float), R, rng.normal(size=(n, 3)), k))
        m = rng.integers(1, 20)
        tracks = L.TrackedCorrespondences(
            rng.integers(0, 6, m), rng.uniform(0, 640, (m, 2)), rng.uniform(0.5, 5, m),
            rng.uniform(0, 1, m), rng.uniform(0, 640, (m, 2)), rng.uniform(0.5, 5, m),
            rng.uniform(0, 1, m))
        off = L.OffsetParams(rng.uniform(-np.pi, np.pi, 2), rng.normal(size=(2, 3)))
        world = [apply_offset_to_trajectory(t, off.transform(v)) for v, t in enumerate(trajs)]
        ref = 0.0
        for i in range(m):
            f = tracks.frames[i]
            a = backproject(tracks.pixels0[i], tracks.depth0[i], world[0][f], k)
            b = backproject(tracks.pixels1[i], tracks.depth1[i], world[1][f], k)
            ref += min(tracks.conf0[i], tracks.conf1[i]) * np.sum((a - b) ** 2)
        ref /= m
        assert abs(L.track_loss(tracks, off, trajs) - ref) <= 1e-12 * max(1.0, ref)


def test_track_loss_order_invariant(bundle, rng):
    perm = rng.permutation(len(bundle.tracks))
    off = L.OffsetParams(_gt(bundle).yaw + 0.1, _gt(bundle).translation + 0.3)
    a = L.track_loss(bundle.tracks, off, bundle.native_trajs)
    b = L.track_loss(bundle.tracks.take(perm), off, bundle.native_trajs)
    assert np.isclose(a, b, rtol=1e-12)


def test_track_loss_empty():
    tr = [_static_traj("a"), _static_traj("b")]
    empty = L.TrackedCorrespondences([], np.zeros((0, 2)), [], [], np.zeros((0, 2)), [], [])
    with pytest.raises(EmptyCorrespondences):
        L.track_loss(empty, L.OffsetParams.zeros(2), tr)


def test_tracks_validation():
    with pytest.raises(SizeMismatch):
        L.TrackedCorrespondences([0, 1], [[0, 0]], [1.0], [1.0], [[0, 0]], [1.0], [1.0])
    with pytest.raises(SpecInvalid):
        L.TrackedCorrespondences([0], [[0, 0]], [0.0], [1.0], [[0, 0]], [1.0], [1.0])


def test_chamfer_basics(rng):
    a = rng.normal(size=(50, 3))
    assert L.chamfer(a, a) == 0.0
    p, q = np.array([[0, 0, 0.0]]), np.array([[1, 2, 2.0]])
    assert L.chamfer(p, q) == 2 * 9.0
    b = rng.normal(size=(70, 3))
    assert L.chamfer(a, b) == L.chamfer(b, a)
    assert L.chamfer(PointCloud(a), PointCloud(b)) == L.chamfer(a, b)
    with pytest.raises(EmptyCloud):
        L.chamfer(np.zeros((0, 3)), a)


def test_chamfer_tree_equals_brute(rng):
    for _ in range(20):
        a = rng.normal(size=(rng.integers(1, 500), 3))
        b = rng.normal(size=(rng.integers(1, 500), 3))
        assert L.chamfer(a, b) == L.chamfer_brute(a, b)


def test_ba_zero_at_truth(bundle):
    gt = _gt(bundle)
    for v in range(2):
        assert L.ba_loss(bundle.landmark_obs[v], bundle.landmarks, gt, bundle.native_trajs, v) < 1e-10


def test_ba_three_four_five():
    tr = [_static_traj()]
    X = np.array([[0.2, -0.1, 2.0]])
    uv, _ = project_points(X, np.eye(3), np.zeros(3), tr[0].intrinsics)
    obs = L.LandmarkObservations([0], [0], uv + [3.0, 4.0])
    assert np.isclose(L.ba_loss(obs, X, L.OffsetParams.zeros(1), tr), 25.0, atol=1e-9)


def test_ba_matches_naive_oracle(bundle, rng):
    for _ in range(5):
        off = L.OffsetParams(_gt(bundle).yaw + rng.normal(scale=0.02, size=2),
                             _gt(bundle).translation + rng.normal(scale=0.05, size=(2, 3)))
        for v in range(2):
            obs = bundle.landmark_obs[v]
            world = apply_offset_to_trajectory(bundle.native_trajs[v], off.transform(v))
            terms = []
            for f, i, px in zip(obs.frames, obs.landmark_ids, obs.pixels):
                uv, z = project_points(bundle.landmarks[i], world.rotations[f], world.translations[f],
                                       world.intrinsics)
                if z > 1e-9:
                    terms.append(np.sum((uv - px) ** 2))
            ref = float(np.sum(terms) / len(terms))
            val = L.ba_loss(obs, bundle.landmarks, off, bundle.native_trajs, v)
            assert abs(val - ref) <= 1e-12 * max(1.0, ref)


def test_ba_excludes_points_behind_camera():
    tr = [_static_traj()]
    X = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -2.0]])
    obs = L.LandmarkObservations([0, 0], [0, 1], [[323.0, 244.0], [0.0, 0.0]])
    assert np.isclose(L.ba_loss(obs, X, L.OffsetParams.zeros(1), tr), 25.0)


def test_ba_order_invariant(bundle, rng):
    obs = bundle.landmark_obs[0]
    p = rng.permutation(len(obs))
    shuffled = L.LandmarkObservations(obs.frames[p], obs.landmark_ids[p], obs.pixels[p])
    off = L.OffsetParams(_gt(bundle).yaw + 0.01, _gt(bundle).translation + 0.02)
    a = L.ba_loss(obs, bundle.landmarks, off, bundle.native_trajs)
    b = L.ba_loss(shuffled, bundle.landmarks, off, bundle.native_trajs)
    assert np.isclose(a, b, rtol=1e-12)


def test_composite_reduces_to_track(bundle):
    prob = _problem(bundle)
    off = L.OffsetParams(_gt(bundle).yaw + 0.05, _gt(bundle).translation + 0.1)
    bd = L.composite_loss(L.LossWeights(1.0, 0.0, 0.0), prob, off)
    assert bd.total == L.track_loss(bundle.tracks, off, bundle.native_trajs)


def test_composite_breakdown_sums(bundle):
    prob = _problem(bundle)
    w = L.LossWeights()
    off = L.OffsetParams(_gt(bundle).yaw + 0.05, _gt(bundle).translation + 0.1)
    bd = L.composite_loss(w, prob, off)
    parts = w.track * bd.track + w.chamfer * sum(bd.chamfer) + w.ba * sum(bd.ba)
    assert abs(bd.total - parts) <= 1e-12 * max(1.0, bd.total)
    assert set(bd.as_dict()) == {"total", "track", "chamfer", "ba"}


def test_composite_linear_in_weights(bundle):
    prob = _problem(bundle)
    off = L.OffsetParams(_gt(bundle).yaw + 0.05, _gt(bundle).translation + 0.1)
    base = L.LossWeights(1.0, 0.1, 0.01)
    b0 = L.composite_loss(base, prob, off)
    for name, part in (("track", b0.track), ("chamfer", sum(b0.chamfer)), ("ba", sum(b0.ba))):
        w2 = L.LossWeights(**{**base.__dict__, name: 2 * getattr(base, name)})
        delta = L.composite_loss(w2, prob, off).total - b0.total
        assert np.isclose(delta, getattr(base, name) * part, rtol=1e-10)


def test_gradient_matches_finite_differences(bundle, rng):
    prob = _problem(bundle)
    w = L.LossWeights()
    for _ in range(5):
        off = L.OffsetParams(_gt(bundle).yaw + rng.normal(scale=0.03, size=2),
                             _gt(bundle).translation + rng.normal(scale=0.05, size=(2, 3)))
        _, g = prob.evaluate(off, w, grad=True)
        fd = numeric_gradient(prob, off, w)
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_problem_validation(bundle):
    with pytest.raises(SizeMismatch):
        L.CalibrationProblem(bundle.native_trajs[:1], bundle.tracks)
    with pytest.raises(EmptyCloud):
        L.CalibrationProblem(bundle.native_trajs, None, [np.zeros((0, 3)), None])
    with pytest.raises(SizeMismatch):
        L.CalibrationProblem(bundle.native_trajs, None, None, None, bundle.landmark_obs, None)
    with pytest.raises(SizeMismatch):
        _problem(bundle).evaluate(L.OffsetParams.zeros(1), L.LossWeights())


def test_subproblem_drops_tracks(bundle):
    sub = _problem(bundle).subproblem(1)
    assert sub.n_views == 1 and not sub.has_track()
    gt = _gt(bundle)
    one = L.OffsetParams(gt.yaw[1:], gt.translation[1:])
    w = L.LossWeights()
    full = _problem(bundle).evaluate(gt, w)[0]
    assert sub.evaluate(one, w)[0].ba[0] == full.ba[1]
