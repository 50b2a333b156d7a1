import numpy as np
import pytest

from dualcap import metrics, synth
from dualcap import motion_fit as mf
from dualcap.errors import NoContactFrames, NoValidJoints, SizeMismatch, SpecInvalid
from dualcap.skeleton import N_SHAPE, SkeletonParams, forward_kinematics
from dualcap.triangulation import Keypoints2D, Keypoints3D
from dualcap.optim import AdamConfig


@pytest.fixture(scope="module")
def walk():
    return synth.generate(3, synth.SceneSpec(), synth.MotionSpec(n_frames=100),
                          obs_spec=synth.ObservationSpec(global_spacing=0.1, cloud_stride=50))


def _k3d(points, valid=None):
    valid = np.ones(points.shape[:2], dtype=bool) if valid is None else valid
    T, J = points.shape[:2]
    return Keypoints3D(points, valid, np.zeros((T, J)), np.zeros((T, J), dtype=np.int64))


def test_fixed_point_static_pose(walk):
    # a standing frame repeated: every term of the objective is exactly zero
    p = walk.params.slice(0, 1)
    T = 8
    params = SkeletonParams(p.beta, np.repeat(p.pose, T, 0), np.repeat(p.transl, T, 0))
    J = forward_kinematics(walk.model, params)
    trajs = [tr.slice(0, T) for tr in walk.world_trajs]
    kps = []
    for tr in trajs:
        uv, _ = synth.project_sequence(J, tr)
        kps.append(Keypoints2D(tr.view_id, uv, np.ones(J.shape[:2])))
    res = mf.fit_motion(_k3d(J), kps, trajs, params, walk.model)
    assert res.initial.total < 1e-20
    assert np.allclose(res.params.to_vector(), params.wrapped().to_vector(), atol=1e-12)


def test_objective_terms_zero_at_truth(walk):
    prob = mf.FitProblem(walk.model, walk.joints, np.ones(walk.joints.shape[:2], bool), walk.keypoints,
                         walk.world_trajs, walk.params.pose)
    bd, _ = prob.evaluate(walk.params)
    assert bd.kp3d < 1e-20 and bd.reproj < 1e-16 and bd.prior == 0.0 and bd.smooth > 0


def test_fit_gradient_matches_fd(walk, rng):
    T = 4
    p = walk.params.slice(10, 10 + T)
    Y = walk.joints[10:10 + T] + 0.01 * rng.normal(size=(T, 24, 3))
    valid = rng.uniform(size=(T, 24)) > 0.2
    kps = [Keypoints2D(k.view_id, k.pixels[10:10 + T] + rng.normal(size=(T, 24, 2)),
                       rng.uniform(0.3, 1, (T, 24))) for k in walk.keypoints]
    trajs = [tr.slice(10, 10 + T) for tr in walk.world_trajs]
    prob = mf.FitProblem(walk.model, Y, valid, kps, trajs, p.pose + 0.05,
                         mf.FitWeights(1.0, 0.5, 0.01, 1e-2))
    for _ in range(3):
        q = SkeletonParams(p.beta + 0.1 * rng.normal(size=N_SHAPE), p.pose + 0.05 * rng.normal(size=p.pose.shape),
                           p.transl + 0.02 * rng.normal(size=(T, 3)))
        _, g = prob.evaluate(q, grad=True)
        x0 = q.to_vector()
        fd = np.empty_like(x0)
        h = 1e-6
        for i in range(len(x0)):
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (prob.evaluate(SkeletonParams.from_vector(xp, T))[0].total
                     - prob.evaluate(SkeletonParams.from_vector(xm, T))[0].total) / (2 * h)
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_recovers_from_noisy_keypoints(walk):
    rng = np.random.default_rng(11)
    Y = walk.joints + 0.005 * rng.normal(size=walk.joints.shape)
    k3d = _k3d(Y)
    init = mf.init_from_keypoints3d(k3d, walk.model)
    res = mf.fit_motion(k3d, walk.keypoints, walk.world_trajs, init, walk.model)
    J = forward_kinematics(walk.model, res.params)
    assert metrics.mpjpe(J, walk.joints) < 10.0
    assert res.breakdown.total <= res.initial.total


def test_final_loss_not_above_initial(walk):
    rng = np.random.default_rng(2)
    T = 10
    k3d = _k3d(walk.joints[:T] + 0.005 * rng.normal(size=(T, 24, 3)))
    init = mf.init_from_keypoints3d(k3d, walk.model)
    cfg = mf.FitConfig(stage1=AdamConfig(max_iters=50), stage2=AdamConfig(max_iters=50))
    res = mf.fit_motion(k3d, [], [], init, walk.model, cfg)
    assert res.breakdown.total <= res.initial.total
    assert res.params.n_frames == T


def test_init_from_keypoints_recovers_pose(walk):
    k3d = _k3d(walk.joints)
    init = mf.init_from_keypoints3d(k3d, walk.model, smooth_sigma=0)
    J = forward_kinematics(walk.model, init)
    # rest shape against shaped ground truth: only bone-length differences remain
    assert metrics.mpjpe(J, walk.joints) < 60.0
    assert np.allclose(J[:, 0], walk.joints[:, 0], atol=1e-9)


def test_init_fills_frames_without_pelvis(walk):
    valid = np.ones((5, 24), bool)
    valid[2, 0] = False
    init = mf.init_from_keypoints3d(_k3d(walk.joints[:5], valid), walk.model, smooth_sigma=0)
    assert init.n_frames == 5
    with pytest.raises(NoValidJoints):
        mf.init_from_keypoints3d(_k3d(walk.joints[:5], np.zeros((5, 24), bool)), walk.model)


def test_fit_validation(walk):
    with pytest.raises(NoValidJoints):
        mf.FitProblem(walk.model, walk.joints, np.zeros(walk.joints.shape[:2], bool))
    with pytest.raises(SizeMismatch):
        mf.fit_motion(_k3d(walk.joints[:5]), [], [], walk.params, walk.model)
    with pytest.raises(SpecInvalid):
        mf.FitWeights(kp3d=-1)


# --------------------------------------------------------------------------- contact


def _contact_setup(walk, phi, T):
    model = walk.model
    ann = walk.contact
    tf = mf.ContactTransform(phi, np.asarray(T, dtype=float))
    # move the performer away from the markers by the inverse transform
    inv = mf.ContactTransform(-phi, -(mf.yaw_rotation(-phi) @ np.asarray(T, dtype=float)))
    params, trajs = mf.apply_contact_transform(model, walk.params, walk.world_trajs, inv)
    return model, ann, tf, params, trajs


def test_contact_identity(walk):
    tf = mf.solve_contact(walk.model, walk.joints, walk.contact)
    assert abs(tf.yaw) < 1e-9 and np.allclose(tf.translation, 0, atol=1e-9)


def test_contact_recovers_known_transform(walk):
    model, ann, truth, params, trajs = _contact_setup(walk, 0.2, (0.5, -0.3, 0.02))
    new, out, tf = mf.contact_align(params, trajs, ann, model)
    assert abs(tf.yaw - 0.2) < 1e-6
    assert np.allclose(tf.translation, [0.5, -0.3, 0.02], atol=1e-6)
    assert np.allclose(forward_kinematics(model, new), walk.joints, atol=1e-6)


def test_contact_projection_invariance(walk):
    model = walk.model
    tf = mf.ContactTransform(0.7, np.array([1.0, -2.0, 0.1]))
    new, out = mf.apply_contact_transform(model, walk.params, walk.world_trajs, tf)
    J0, J1 = forward_kinematics(model, walk.params), forward_kinematics(model, new)
    for a, b in zip(walk.world_trajs, out):
        uv0, _ = synth.project_sequence(J0, a)
        uv1, _ = synth.project_sequence(J1, b)
        assert np.nanmax(np.abs(uv0 - uv1)) < 1e-9
    assert np.allclose(tf.rotation[2], [0, 0, 1]) and np.allclose(tf.rotation[:, 2], [0, 0, 1])


def test_contact_errors(walk):
    empty = mf.ContactAnnotation([], np.zeros((0, 3)), [])
    with pytest.raises(NoContactFrames):
        mf.solve_contact(walk.model, walk.joints, empty)
    bad = mf.ContactAnnotation([500], [[0, 0, 0.0]], [0.0])
    with pytest.raises(SizeMismatch):
        mf.solve_contact(walk.model, walk.joints, bad)
    with pytest.raises(SizeMismatch):
        mf.ContactAnnotation([0, 1], [[0, 0, 0.0]], [0.0])
