import json

import numpy as np
import pytest

from dualcap import fusion, io, synth
from dualcap.errors import FormatError
from dualcap.geometry import PointCloud, SimilarityTransform, matrix_to_quat_xyzw, so3_exp
from dualcap.losses import OffsetParams


@pytest.fixture(scope="module")
def bundle():
    return synth.generate(1, synth.SceneSpec(), synth.MotionSpec(n_frames=30, stand_frames=5),
                          obs_spec=synth.ObservationSpec(global_spacing=0.2, cloud_stride=15))


def roundtrip(tmp_path, write, read, obj, name="a.json"):
    """write -> read -> write must reproduce the first file byte for byte."""
    p1, p2 = tmp_path / ("1_" + name), tmp_path / ("2_" + name)
    write(p1, obj)
    back = read(p1)
    write(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    return back


def test_trajectory(tmp_path, bundle):
    tr = bundle.native_trajs[0]
    back = roundtrip(tmp_path, io.write_trajectory, io.read_trajectory, tr)
    assert np.array_equal(back.rotations, tr.rotations) and np.array_equal(back.translations, tr.translations)
    assert back.intrinsics == tr.intrinsics and back.view_id == tr.view_id


def test_trajectory_quaternion_input(tmp_path, bundle):
    tr = bundle.native_trajs[1]
    d = io.trajectory_to_dict(tr)
    d.pop("R")
    d["q_xyzw"] = [matrix_to_quat_xyzw(R) for R in tr.rotations]
    p = tmp_path / "q.json"
    io.write_json(p, d)
    back = io.read_trajectory(p)
    assert np.allclose(back.rotations, tr.rotations, atol=1e-12)


def test_keypoints(tmp_path, bundle):
    kp = synth.perturb(bundle, synth.NoiseSpec(dropout=0.3), 0).keypoints[0]
    back = roundtrip(tmp_path, io.write_keypoints2d, io.read_keypoints2d, kp)
    assert np.array_equal(back.pixels, kp.pixels) and np.array_equal(back.conf, kp.conf)


def test_keypoints3d_with_invalid(tmp_path, bundle):
    from dualcap.triangulation import triangulate_sequence
    kps = synth.perturb(bundle, synth.NoiseSpec(dropout=0.5), 2).keypoints
    k3 = triangulate_sequence(kps, bundle.world_trajs)
    assert not k3.valid.all()
    back = roundtrip(tmp_path, io.write_keypoints3d, io.read_keypoints3d, k3)
    assert np.array_equal(back.valid, k3.valid) and np.array_equal(back.reason, k3.reason)
    assert np.array_equal(np.isnan(back.points), np.isnan(k3.points))


def test_joints_params_contact(tmp_path, bundle):
    roundtrip(tmp_path, io.write_joints, io.read_joints, bundle.joints, "j.json")
    p = roundtrip(tmp_path, io.write_params, io.read_params, bundle.params, "p.json")
    assert np.array_equal(p.to_vector(), bundle.params.to_vector())
    c = roundtrip(tmp_path, io.write_contact, io.read_contact, bundle.contact, "c.json")
    assert np.array_equal(c.markers, bundle.contact.markers)


def test_tracks_landmarks(tmp_path, bundle):
    t = roundtrip(tmp_path, io.write_tracks, io.read_tracks, bundle.tracks, "t.json")
    assert np.array_equal(t.pixels1, bundle.tracks.pixels1)
    ids = [tr.view_id for tr in bundle.native_trajs]
    p1, p2 = tmp_path / "l1.json", tmp_path / "l2.json"
    io.write_landmarks(p1, bundle.landmarks, bundle.landmark_obs, ids)
    pts, obs = io.read_landmarks(p1)
    io.write_landmarks(p2, pts, [obs[v] for v in ids], ids)
    assert p1.read_bytes() == p2.read_bytes()


def test_offsets_transforms_registrations(tmp_path, bundle, rng):
    off = OffsetParams(rng.normal(size=2), rng.normal(size=(2, 3)))
    p1, p2 = tmp_path / "o1.json", tmp_path / "o2.json"
    io.write_offsets(p1, off, ["a", "b"])
    back, ids = io.read_offsets(p1)
    io.write_offsets(p2, back, ids)
    assert p1.read_bytes() == p2.read_bytes() and ids == ["a", "b"]
    tfs = [SimilarityTransform(1.5, so3_exp(rng.normal(size=3)), rng.normal(size=3))]
    roundtrip(tmp_path, io.write_transforms, io.read_transforms, tfs, "tf.json")
    regs = [(f, bundle.world_trajs[0][f]) for f in (0, 7, 20)]
    roundtrip(tmp_path, io.write_registrations, io.read_registrations, regs, "r.json")


def test_ply_cloud_and_mesh(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(50, 3)), rng.uniform(size=50))
    back = roundtrip(tmp_path, io.write_cloud, io.read_cloud, cloud, "c.ply")
    assert np.array_equal(back.points, cloud.points) and np.array_equal(back.confidence, cloud.confidence)
    mesh = fusion.Mesh(rng.normal(size=(6, 3)), [[0, 1, 2], [3, 4, 5]])
    m = roundtrip(tmp_path, io.write_mesh, io.read_mesh, mesh, "m.ply")
    assert np.array_equal(m.faces, mesh.faces)


def test_depth_formats(tmp_path, rng):
    d = rng.uniform(0.3, 4.0, (12, 16))
    d[0, 0] = 0.0
    io.write_depth_png(tmp_path / "d.png", d)
    back = io.read_depth_png(tmp_path / "d.png")
    assert np.max(np.abs(back - d)) <= 0.0005 and back[0, 0] == 0
    io.write_depth_raw(tmp_path / "d.bin", d)
    raw = io.read_depth_raw(tmp_path / "d.bin", 16, 12)
    assert np.array_equal(raw, d.astype(np.float32).astype(float))
    with pytest.raises(FormatError):
        io.read_depth_raw(tmp_path / "d.bin", 16, 13)
    with pytest.raises(FormatError):
        io.write_depth_png(tmp_path / "x.png", np.full((2, 2), 70.0))


def test_depth_frames_directory(tmp_path):
    _, frames = synth.cube_frames(3, seed=1)
    io.write_depth_frames(tmp_path / "a", frames)
    back = io.read_depth_frames(tmp_path / "a")
    io.write_depth_frames(tmp_path / "b", back)
    for name in ["frames.json"] + [f"scan_{i:04d}.png" for i in range(3)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert np.max(np.abs(back[0].depth - frames[0].depth)) <= 0.0005


def test_nan_written_as_null(tmp_path):
    text = io.dumps({"x": np.array([1.0, np.nan, np.inf])})
    assert json.loads(text) == {"x": [1.0, None, None]}


def test_format_errors(tmp_path, bundle):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(FormatError):
        io.read_trajectory(p)
    io.write_joints(p, bundle.joints)
    with pytest.raises(FormatError):
        io.read_trajectory(p)  # wrong kind
    d = io.trajectory_to_dict(bundle.world_trajs[0])
    d.pop("R")
    io.write_json(p, d)
    with pytest.raises(FormatError):
        io.read_trajectory(p)
    (tmp_path / "bad.ply").write_text("hello\n")
    with pytest.raises(FormatError):
        io.read_ply(tmp_path / "bad.ply")
    with pytest.raises(FormatError):
        io.read_json(tmp_path / "missing.json")
