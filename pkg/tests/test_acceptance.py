"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed as the tests run (visible with ``-s``) and collected
into an "acceptance criteria" section of the pytest terminal summary.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import os
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from dualcap import alignment as al
from dualcap import fusion, kernels, metrics, synth
from dualcap import losses as L
from dualcap import motion_fit as mf
from dualcap import triangulation as tri
from dualcap.alignment import apply_offset_to_trajectory
from dualcap.calibrator import OptimizerConfig, calibrate, numeric_gradient
from dualcap.geometry import SimilarityTransform, project, yaw_rotation
from dualcap.skeleton import N_SHAPE, SkeletonModel, SkeletonParams, forward_kinematics

from conftest import ACCEPTANCE_LINES, random_similarity
from test_triangulation import K, grid_search, two_views

FEET = [10, 11]


@contextmanager
def criterion(n, title):
    """Record a PASS/FAIL line for criterion ``n``; the body fills ``info``."""
    info = {}
    t0 = time.perf_counter()
    ok = False
    try:
        yield info
        ok = True
    finally:
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        line = (f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  "
                f"[{detail}{', ' if detail else ''}{time.perf_counter() - t0:.1f} s]")
        ACCEPTANCE_LINES[n] = line
        print("\n" + line)


# ---------------------------------------------------------------- criterion 1

def test_c01_procrustes_exactness():
    with criterion(1, "Procrustes exactness (1000 similarity + 1000 yaw-constrained)") as info:
        rng = np.random.default_rng(1)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(1000):
            t = random_similarity(rng)
            X = rng.normal(size=(rng.integers(3, 50), 3))
            est = al.procrustes_similarity(al.CorrespondenceSet(X, t.apply(X)))
            worst = max(worst, abs(est.scale - t.scale), np.max(np.abs(est.rotation - t.rotation)),
                        np.max(np.abs(est.translation - t.translation)))
        for _ in range(1000):
            t = SimilarityTransform(float(np.exp(rng.uniform(-1, 1))), yaw_rotation(rng.uniform(-np.pi, np.pi)),
                                    rng.uniform(-5, 5, 3))
            X = rng.normal(size=(rng.integers(2, 50), 3))
            est = al.procrustes_yaw(al.CorrespondenceSet(X, t.apply(X)), with_scale=True)
            worst = max(worst, abs(est.scale - t.scale), np.max(np.abs(est.rotation - t.rotation)),
                        np.max(np.abs(est.translation - t.translation)))
        elapsed = time.perf_counter() - t0
        info.update(max_err=f"{worst:.1e}")
        assert worst < 1e-9
        assert elapsed < 5.0


# ---------------------------------------------------------------- criterion 2

def test_c02_triangulation_oracle():
    with criterion(2, "DLT matches 1 mm brute-force grid minimum (50 configs, 2 px noise)") as info:
        rng = np.random.default_rng(2)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(50):
            X = rng.uniform(-0.5, 0.5, 3) + [0, 0, 1.0]
            # baselines within the 60-120 deg capture range the generator uses
            poses = two_views(rng.uniform(60, 120), dist=rng.uniform(2.0, 5.0))
            obs = [(project(X, p, K) + rng.normal(scale=2.0, size=2), rng.uniform(0.3, 1.0), p, K)
                   for p in poses]
            est = tri.triangulate_joint(obs).point
            ref = grid_search(obs, np.array([0, 0, 1.0]))
            worst = max(worst, float(np.max(np.abs(est - ref))))
        elapsed = time.perf_counter() - t0
        info.update(max_dev_mm=f"{1000 * worst:.2f}")
        assert worst <= 0.001 + 1e-12
        assert elapsed < 120


# ---------------------------------------------------------------- criterion 3

def test_c03_chamfer_equivalence():
    with criterion(3, "kd-tree Chamfer bit-equal to exact O(nm) (200 pairs)") as info:
        rng = np.random.default_rng(3)
        t0 = time.perf_counter()
        mismatches = 0
        for _ in range(200):
            a = rng.normal(size=(rng.integers(1, 2001), 3))
            b = rng.normal(size=(rng.integers(1, 2001), 3))
            mismatches += L.chamfer(a, b) != L.chamfer_brute(a, b)
        elapsed = time.perf_counter() - t0
        info.update(mismatches=mismatches, backend=kernels.backend())
        assert mismatches == 0
        assert elapsed < 60


# ---------------------------------------------------------------- criterion 4

@pytest.fixture(scope="module")
def small_bundle():
    return synth.generate(0, synth.SceneSpec(), synth.MotionSpec(n_frames=30, stand_frames=5),
                          obs_spec=synth.ObservationSpec(global_spacing=0.06, cloud_stride=10))


def _fd(f, x0, h=1e-6):
    g = np.empty_like(x0)
    for i in range(len(x0)):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_c04_gradient_checks(small_bundle):
    with criterion(4, "analytic gradients match central differences (50 + 50 configs)") as info:
        b = small_bundle
        rng = np.random.default_rng(4)
        t0 = time.perf_counter()
        prob = L.CalibrationProblem(b.native_trajs, b.tracks, b.local_clouds, b.global_cloud,
                                    b.landmark_obs, b.landmarks)
        gt = L.OffsetParams.from_transforms(b.offsets)
        worst_cal = 0.0
        for _ in range(50):
            w = L.LossWeights(*rng.uniform(0.1, 2.0, 3))
            off = L.OffsetParams(gt.yaw + rng.normal(scale=0.03, size=2),
                                 gt.translation + rng.normal(scale=0.05, size=(2, 3)))
            _, g = prob.evaluate(off, w, grad=True)
            fd = numeric_gradient(prob, off, w)
            worst_cal = max(worst_cal, np.linalg.norm(g - fd) / np.linalg.norm(fd))

        model = b.model
        T = 3
        worst_fit = 0.0
        for _ in range(50):
            s = int(rng.integers(0, len(b.joints) - T))
            p = b.params.slice(s, s + T)
            Y = b.joints[s:s + T] + 0.01 * rng.normal(size=(T, 24, 3))
            valid = rng.uniform(size=(T, 24)) > 0.2
            kps = [tri.Keypoints2D(k.view_id, k.pixels[s:s + T] + rng.normal(size=(T, 24, 2)),
                                   rng.uniform(0.3, 1, (T, 24))) for k in b.keypoints]
            trajs = [tr.slice(s, s + T) for tr in b.world_trajs]
            fw = mf.FitWeights(*rng.uniform(0.1, 1.0, 3), float(rng.uniform(1e-4, 1e-2)))
            fprob = mf.FitProblem(model, Y, valid, kps, trajs, p.pose + 0.05 * rng.normal(size=p.pose.shape), fw)
            q = SkeletonParams(p.beta + 0.1 * rng.normal(size=N_SHAPE),
                               p.pose + 0.05 * rng.normal(size=p.pose.shape),
                               p.transl + 0.02 * rng.normal(size=(T, 3)))
            _, g = fprob.evaluate(q, grad=True)
            fd = _fd(lambda x: fprob.evaluate(SkeletonParams.from_vector(x, T))[0].total, q.to_vector())
            worst_fit = max(worst_fit, np.linalg.norm(g - fd) / np.linalg.norm(fd))
        elapsed = time.perf_counter() - t0
        info.update(calibration_rel=f"{worst_cal:.1e}", fit_rel=f"{worst_fit:.1e}")
        assert worst_cal <= 1e-4 and worst_fit <= 1e-4
        assert elapsed < 120


# ---------------------------------------------------------------- criterion 5

def _perturbed_init(gt, seed):
    rng = np.random.default_rng(seed)
    init = gt.copy()
    init.yaw += np.deg2rad(5) * np.sign(rng.normal(size=2))
    d = rng.normal(size=(2, 3))
    init.translation += 0.2 * d / np.linalg.norm(d, axis=1, keepdims=True)
    return init


def test_c05_calibration_recovery():
    with criterion(5, "calibration recovery from 5 deg + 0.2 m (noiseless and noisy)") as info:
        rows = []
        for noisy in (False, True):
            for seed in (0, 1):
                b = synth.generate(seed)
                if noisy:
                    b = synth.perturb(b, synth.NoiseSpec(track_px=2.0, cloud_m=0.005), seed)
                gt = L.OffsetParams.from_transforms(b.offsets)
                prob = L.CalibrationProblem(b.native_trajs, b.tracks, b.local_clouds, b.global_cloud,
                                            b.landmark_obs, b.landmarks)
                t0 = time.perf_counter()
                res = calibrate(prob, _perturbed_init(gt, seed), OptimizerConfig())
                dt = time.perf_counter() - t0
                ye = float(np.max(np.abs(np.degrees(res.offsets.yaw - gt.yaw))))
                te = float(np.max(np.linalg.norm(res.offsets.translation - gt.translation, axis=1)))
                rows.append((noisy, ye, te, dt))
        clean = [r for r in rows if not r[0]]
        noisy = [r for r in rows if r[0]]
        info.update(clean_deg=f"{max(r[1] for r in clean):.4f}", clean_mm=f"{1000 * max(r[2] for r in clean):.2f}",
                    noisy_deg=f"{max(r[1] for r in noisy):.4f}", noisy_mm=f"{1000 * max(r[2] for r in noisy):.2f}",
                    max_run_s=f"{max(r[3] for r in rows):.0f}")
        assert all(r[1] < 0.1 and r[2] < 0.002 for r in clean)
        assert all(r[1] < 0.5 and r[2] < 0.02 for r in noisy)
        assert all(r[3] < 60 for r in rows)


# ------------------------------------------------------ criteria 6 and 7 setup

def ambiguity_bundle(seed):
    b = synth.generate(seed, synth.SceneSpec(kind="ambiguity"), synth.MotionSpec(n_frames=60, speed=0.4),
                       obs_spec=synth.ObservationSpec(global_spacing=0.06, cloud_stride=20))
    return synth.perturb(b, synth.NoiseSpec(track_px=1, landmark_px=1, keypoint_px=1), seed)


ABLATIONS = {"full": L.LossWeights(), "no_track": L.LossWeights(track=0),
             "no_chamfer": L.LossWeights(chamfer=0), "no_ba": L.LossWeights(ba=0)}


@pytest.fixture(scope="module")
def ambiguity_runs():
    """Calibration runs on the ambiguity scene.

    Seeds 0-9 run the full loss and the single-view variant (track weight
    zero, which decouples the two views); seeds 0-4 also drop Chamfer and
    bundle adjustment in turn.
    """
    out = {}
    for seed in range(10):
        b = ambiguity_bundle(seed)
        gt = L.OffsetParams.from_transforms(b.offsets)
        D = b.view_directions()
        init = gt.copy()
        init.yaw += np.deg2rad(5)
        init.translation += 0.2 * D
        prob = L.CalibrationProblem(b.native_trajs, b.tracks, b.local_clouds, b.global_cloud,
                                    b.landmark_obs, b.landmarks)
        names = list(ABLATIONS) if seed < 5 else ["full", "no_track"]
        row = {}
        for name in names:
            res = calibrate(prob, init, OptimizerConfig(weights=ABLATIONS[name]))
            e = res.offsets.translation - gt.translation
            trajs = [apply_offset_to_trajectory(t, res.offsets.transform(v)) for v, t in enumerate(b.native_trajs)]
            k3 = tri.triangulate_sequence(b.keypoints, trajs)
            row[name] = {"depth_err": float(np.mean(np.abs(np.sum(e * D, axis=1)))),
                         "reproj": metrics.reproj_error(k3.points, b.keypoints, trajs)}
        out[seed] = row
    return out


# ---------------------------------------------------------------- criterion 6

def test_c06_depth_ambiguity(ambiguity_runs):
    with criterion(6, "single-view depth error >= 10x dual-view (10 seeds)") as info:
        ratios = [r["no_track"]["depth_err"] / r["full"]["depth_err"] for r in ambiguity_runs.values()]
        info.update(min_ratio=f"{min(ratios):.1f}",
                    dual_mm=f"{1000 * max(r['full']['depth_err'] for r in ambiguity_runs.values()):.1f}",
                    single_mm=f"{1000 * min(r['no_track']['depth_err'] for r in ambiguity_runs.values()):.1f}")
        assert min(ratios) >= 10


# ---------------------------------------------------------------- criterion 7

@pytest.fixture(scope="module")
def fit_ablation():
    out = {}
    for seed in range(5):
        b = ambiguity_bundle(seed)
        k3 = tri.triangulate_sequence(b.keypoints, b.world_trajs)
        init = mf.init_from_keypoints3d(k3, b.model)
        row = {}
        for name, w in (("full", mf.FitWeights()), ("no_smooth", mf.FitWeights(smooth=0)),
                        ("no_kp3d", mf.FitWeights(kp3d=0))):
            r = mf.fit_motion(k3, b.keypoints, b.world_trajs, init, b.model, mf.FitConfig(weights=w))
            J = forward_kinematics(b.model, r.params)
            row[name] = {"jitter": metrics.jitter(J, FEET), "mpjpe": metrics.mpjpe(J, b.joints)}
        out[seed] = row
    return out


def test_c07_ablation_orderings(ambiguity_runs, fit_ablation):
    with criterion(7, "ablation orderings for track, smooth and 3D terms (5 seeds)") as info:
        track_worst = [max(ambiguity_runs[s], key=lambda k: ambiguity_runs[s][k]["reproj"]) == "no_track"
                       for s in range(5)]
        smooth = [fit_ablation[s]["no_smooth"]["jitter"] > fit_ablation[s]["full"]["jitter"] for s in range(5)]
        kp3d = [fit_ablation[s]["no_kp3d"]["mpjpe"] > fit_ablation[s]["full"]["mpjpe"] for s in range(5)]
        info.update(track_most=f"{sum(track_worst)}/5", smooth=f"{sum(smooth)}/5", kp3d=f"{sum(kp3d)}/5")
        assert all(track_worst) and all(smooth) and all(kp3d)


# ---------------------------------------------------------------- criterion 8

def test_c08_metric_monotonicity():
    with criterion(8, "injected drift: W-MPJPE grows with chunk, WA <= W (5 seeds)") as info:
        model = SkeletonModel()
        J = forward_kinematics(model, synth.generate_motion(model, synth.MotionSpec(n_frames=1000), seed=0))
        order_ok, wa_ok = 0, 0
        for seed in range(5):
            d = synth.inject_drift(J, seed)
            w = [metrics.w_mpjpe(d, J, c) for c in (100, 500, 1000)]
            wa = [metrics.wa_mpjpe(d, J, c) for c in (100, 500, 1000)]
            order_ok += w[0] < w[1] < w[2]
            wa_ok += all(a <= b for a, b in zip(wa, w))
        info.update(ordered=f"{order_ok}/5", wa_le_w=f"{wa_ok}/5")
        assert order_ok == 5 and wa_ok == 5


# ---------------------------------------------------------------- criterion 9

def test_c09_fusion_oracle():
    with criterion(9, "20-view cube fused at 2 cm: RMS < voxel, one component") as info:
        t0 = time.perf_counter()
        _, frames = synth.cube_frames(20, seed=0)
        vol = fusion.TsdfVolume.from_bounds([-0.6] * 3, [0.6] * 3, voxel_size=0.02)
        fusion.integrate_all(vol, frames)
        mesh = fusion.clean_mesh(fusion.extract_mesh(vol))
        q = np.abs(mesh.vertices) - 0.5  # unit cube centered at the origin
        dist = np.abs(np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0))
        rms = float(np.sqrt(np.mean(dist ** 2)))
        n, _ = fusion.connected_face_components(mesh)
        elapsed = time.perf_counter() - t0
        info.update(rms_mm=f"{1000 * rms:.2f}", components=n)
        assert rms < vol.voxel_size and n == 1
        assert elapsed < 60


# ---------------------------------------------------------------- criterion 10

def test_c10_contact_alignment():
    with criterion(10, "contact transform recovered, projections invariant") as info:
        b = synth.generate(3, synth.SceneSpec(), synth.MotionSpec(n_frames=100),
                           obs_spec=synth.ObservationSpec(global_spacing=0.1, cloud_stride=50))
        phi, T = 0.2, np.array([0.5, -0.3, 0.02])
        inv = mf.ContactTransform(-phi, -(yaw_rotation(-phi) @ T))
        params, trajs = mf.apply_contact_transform(b.model, b.params, b.world_trajs, inv)
        new, out, tf = mf.contact_align(params, trajs, b.contact, b.model)
        err = max(abs(tf.yaw - phi), float(np.max(np.abs(tf.translation - T))))
        J0, J1 = forward_kinematics(b.model, params), forward_kinematics(b.model, new)
        px = 0.0
        for a, c in zip(trajs, out):
            uv0, _ = synth.project_sequence(J0, a)
            uv1, _ = synth.project_sequence(J1, c)
            px = max(px, float(np.nanmax(np.abs(uv0 - uv1))))
        info.update(transform_err=f"{err:.1e}", reproj_change_px=f"{px:.1e}")
        assert err < 1e-6 and px < 1e-9


# ---------------------------------------------------------------- criterion 11

STAGES = ["synth --seed 7", "fuse", "align-init", "calibrate", "triangulate", "fit", "contact-align",
          "stitch", "metrics --quiet"]


def _run_pipeline(root):
    for stage in STAGES:
        r = subprocess.run([sys.executable, "-m", "dualcap.cli", *stage.split(), "-s", root],
                           capture_output=True, text=True)
        assert r.returncode == 0, f"{stage}: {r.stderr}"


def _snapshot(root):
    out = {}
    for d, _, names in os.walk(root):
        rel = os.path.relpath(d, root)
        if rel.split(os.sep)[0] == "logs":
            continue
        for n in names:
            with open(os.path.join(d, n), "rb") as f:
                out[os.path.join(rel, n)] = f.read()
    return out


def test_c11_end_to_end_determinism(tmp_path):
    with criterion(11, "synth --seed 7 pipeline twice gives byte-identical outputs") as info:
        a, b = str(tmp_path / "run_a"), str(tmp_path / "run_b")
        _run_pipeline(a)
        _run_pipeline(b)
        sa, sb = _snapshot(a), _snapshot(b)
        differ = sorted(k for k in sa.keys() | sb.keys() if sa.get(k) != sb.get(k))
        info.update(files=len(sa), differing=len(differ))
        assert sa and not differ, differ[:5]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
