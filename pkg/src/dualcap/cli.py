"""Batch pipeline driver.

Every stage reads and writes files inside a session directory::

    dualcap synth --session S --seed 7       # synthetic session + ground truth
    dualcap fuse --session S                 # depth scan -> mesh
    dualcap align-init --session S           # registrations -> initial offsets
    dualcap calibrate --session S            # offsets refined on the scene
    dualcap triangulate --session S          # 2D keypoints -> 3D joints
    dualcap fit --session S                  # skeleton fit in the world frame
    dualcap contact-align --session S        # snap the feet to contact markers
    dualcap stitch --session S               # chain overlapping trajectory chunks
    dualcap metrics --session S              # evaluation against ground truth

Stage outputs go to ``S/<stage>/`` (or ``--out``); each run also writes
``S/logs/<stage>.json`` with the resolved configuration, loss curves and
timing.  Only the log files contain timing, so everything outside ``logs/``
is byte-identical across repeated runs.

Configuration precedence: command-line flags, then the manifest's
``config.<stage>`` section, then built-in defaults.

Exit codes: 0 success, 2 usage errors, 3 input or format errors, 4 numerical
failures.  ``DUALCAP_THREADS`` limits the number of BLAS/OpenMP threads.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from typing import List, Optional

import numpy as np

from . import io, kernels
from .alignment import Overlap, apply_offset_to_trajectory, stitch_chunks
from .calibrator import OptimizerConfig, calibrate, initialize_offsets
from .errors import FormatError, InputError, NumericalError, SizeMismatch
from .fusion import TsdfVolume, clean_mesh, connected_face_components, extract_mesh, integrate_all
from .geometry import PointCloud, SimilarityTransform, Trajectory
from .losses import CalibrationProblem, LossWeights, OffsetParams
from .metrics import report as metrics_report
from .motion_fit import FitConfig, FitWeights, contact_align, fit_motion, init_from_keypoints3d
from .optim import AdamConfig
from .skeleton import SkeletonModel, forward_kinematics
from .triangulation import Keypoints2D, triangulate_sequence

log = logging.getLogger("dualcap")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4

MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad flag combination or reference (exit code 2)."""


# --------------------------------------------------------------------------- session helpers


class Session:
    def __init__(self, root: str, manifest: Optional[str] = None):
        self.root = os.path.abspath(root)
        self.manifest_path = os.path.abspath(manifest) if manifest else os.path.join(self.root, MANIFEST)
        self._m = None

    @property
    def manifest(self) -> dict:
        if self._m is None:
            if not os.path.exists(self.manifest_path):
                raise FormatError(f"manifest not found: {self.manifest_path}")
            m = io.read_json(self.manifest_path)
            if m.get("kind") != "manifest":
                raise FormatError(f"{self.manifest_path}: not a manifest")
            self._m = m
        return self._m

    def path(self, rel: str) -> str:
        """Resolve a manifest-relative path."""
        base = os.path.dirname(self.manifest_path)
        return rel if os.path.isabs(rel) else os.path.join(base, rel)

    def stage_dir(self, stage: str, out: Optional[str] = None) -> str:
        d = os.path.abspath(out) if out else os.path.join(self.root, stage)
        os.makedirs(d, exist_ok=True)
        return d

    def stage_file(self, stage: str, name: str) -> str:
        return os.path.join(self.root, stage, name)

    def views(self) -> List[dict]:
        v = self.manifest.get("views")
        if not v or len(v) < 1:
            raise FormatError("manifest lists no views")
        return v

    def view_ids(self) -> List[str]:
        return [str(v["view_id"]) for v in self.views()]

    def config(self, stage: str) -> dict:
        return dict(self.manifest.get("config", {}).get(stage, {}))

    def frame_offset(self) -> int:
        off = self.manifest.get("frame_offset", 0)
        if not isinstance(off, int):
            raise FormatError("frame_offset must be an integer")
        return off


def _resolve(defaults: dict, manifest_cfg: dict, args, mapping: dict) -> dict:
    """Flags > manifest > defaults.  ``mapping`` maps config keys to args attributes."""
    cfg = dict(defaults)
    for k, v in manifest_cfg.items():
        if k not in defaults:
            raise FormatError(f"unknown config key {k!r}")
        cfg[k] = v
    for k, attr in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _write_log(session: Session, stage: str, payload: dict) -> None:
    d = os.path.join(session.root, "logs")
    os.makedirs(d, exist_ok=True)
    io.write_json(os.path.join(d, f"{stage}.json"), payload)


def synchronize(offset: int, n1: int, n2: int):
    """Frame ranges after temporal sync.

    View 2's frame ``f + offset`` shows the same instant as view 1's frame
    ``f``.  Returns ``((a1, b1), (a2, b2))`` index ranges of equal length.
    """
    a1 = max(0, -offset)
    a2 = max(0, offset)
    n = min(n1 - a1, n2 - a2)
    if n < 1:
        raise SizeMismatch(f"frame offset {offset} leaves no common frames")
    return (a1, a1 + n), (a2, a2 + n)


def _synced(session: Session, keypoints: List[Keypoints2D], trajs: List[Trajectory]):
    """Apply the manifest frame offset to view 2 (and trim to common frames)."""
    if len(keypoints) != 2:
        return keypoints, trajs
    off = session.frame_offset()
    n1 = min(keypoints[0].n_frames, len(trajs[0]))
    n2 = min(keypoints[1].n_frames, len(trajs[1]))
    (a1, b1), (a2, b2) = synchronize(off, n1, n2)
    return ([keypoints[0].slice(a1, b1), keypoints[1].slice(a2, b2)],
            [trajs[0].slice(a1, b1), trajs[1].slice(a2, b2)])


def _read_view_trajs(session: Session, directory: str) -> List[Trajectory]:
    out = []
    for v in session.view_ids():
        p = os.path.join(directory, f"{v}_trajectory.json")
        if not os.path.exists(p):
            raise FormatError(f"missing trajectory {p}; run the producing stage first")
        out.append(io.read_trajectory(p))
    return out


def _read_keypoints(session: Session) -> List[Keypoints2D]:
    return [io.read_keypoints2d(session.path(v["keypoints"])) for v in session.views()]


def _native_trajs(session: Session) -> List[Trajectory]:
    return [io.read_trajectory(session.path(v["trajectory"])) for v in session.views()]


# --------------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    from . import synth

    t0 = time.perf_counter()
    root = os.path.abspath(args.session)
    os.makedirs(root, exist_ok=True)
    scene_spec = synth.SceneSpec(kind=args.kind)
    motion_spec = synth.MotionSpec(n_frames=args.frames, stand_frames=min(12, max(1, args.frames // 8)))
    bundle = synth.generate(args.seed, scene_spec, motion_spec)
    noise = synth.NoiseSpec(keypoint_px=args.keypoint_px, track_px=args.track_px,
                            landmark_px=args.landmark_px, cloud_m=args.cloud_m,
                            depth_rel=args.depth_rel, traj_m=args.traj_m, traj_rad=args.traj_rad,
                            dropout=args.dropout, registration_m=args.registration_m,
                            registration_rad=args.registration_rad)
    obs = synth.perturb(bundle, noise, args.seed)
    ids = [tr.view_id for tr in bundle.world_trajs]

    def w(rel):
        p = os.path.join(root, rel)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    views = []
    for i, v in enumerate(ids):
        io.write_trajectory(w(f"views/{v}/trajectory.json"), obs.native_trajs[i])
        io.write_keypoints2d(w(f"views/{v}/keypoints.json"), obs.keypoints[i])
        io.write_cloud(w(f"views/{v}/local_cloud.ply"), obs.local_clouds[i])
        io.write_registrations(w(f"views/{v}/registrations.json"), obs.registrations[i])
        views.append({"view_id": v, "trajectory": f"views/{v}/trajectory.json",
                      "keypoints": f"views/{v}/keypoints.json",
                      "local_cloud": f"views/{v}/local_cloud.ply",
                      "registrations": f"views/{v}/registrations.json"})
    io.write_cloud(w("scene/global_cloud.ply"), bundle.global_cloud)
    io.write_tracks(w("tracks.json"), obs.tracks)
    io.write_landmarks(w("landmarks.json"), bundle.landmarks, obs.landmark_obs, ids)
    io.write_contact(w("contact.json"), bundle.contact)

    depth_dir = None
    if scene_spec.kind == "room":
        from .geometry import Intrinsics

        k = Intrinsics(150.0, 150.0, 80.0, 60.0, 160, 120)
        frames = synth.scan_frames(bundle.scene, bundle.params.transl[:, :2].mean(axis=0), k)
        io.write_depth_frames(os.path.join(root, "scene", "scan"), frames)
        depth_dir = "scene/scan"

    chunks_entry = None
    length, overlap = 40, 10
    n_chunks = (bundle.n_frames - length) // (length - overlap) + 1
    if n_chunks >= 2:
        chunks, overlaps, truth = synth.make_chunks(obs.native_trajs[0], n_chunks, length, overlap,
                                                    args.seed)
        files = []
        for k_, (tr, _) in enumerate(chunks):
            name = f"chunks/chunk_{k_:02d}.json"
            io.write_trajectory(w(name), tr)
            files.append(name)
        io.write_transforms(w("ground_truth/chunk_transforms.json"), truth)
        chunks_entry = {"trajectories": files,
                        "overlaps": [[o.prev_start, o.cur_start, o.length] for o in overlaps]}

    for i, v in enumerate(ids):
        io.write_trajectory(w(f"ground_truth/{v}_trajectory.json"), bundle.world_trajs[i])
    io.write_offsets(w("ground_truth/offsets.json"), OffsetParams.from_transforms(bundle.offsets), ids)
    io.write_params(w("ground_truth/params.json"), bundle.params)
    io.write_joints(w("ground_truth/joints.json"), bundle.joints)

    manifest = {
        "kind": "manifest", "version": io.FORMAT_VERSION,
        "seed": args.seed, "fps": bundle.fps, "scene_class": scene_spec.scene_class,
        "frame_offset": 0,
        "views": views,
        "global_cloud": "scene/global_cloud.ply",
        "depth_dir": depth_dir,
        "tracks": "tracks.json", "landmarks": "landmarks.json", "contact": "contact.json",
        "chunks": chunks_entry,
        "ground_truth": {"offsets": "ground_truth/offsets.json", "joints": "ground_truth/joints.json",
                         "params": "ground_truth/params.json",
                         "chunk_transforms": "ground_truth/chunk_transforms.json" if chunks_entry else None,
                         "trajectories": {v: f"ground_truth/{v}_trajectory.json" for v in ids}},
        "config": {},
    }
    io.write_json(os.path.join(root, MANIFEST), manifest)
    sess = Session(root)
    _write_log(sess, "synth", {"command": "synth", "config": vars_clean(args),
                               "noise": noise.__dict__, "timing_s": time.perf_counter() - t0})
    return EXIT_OK


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# --------------------------------------------------------------------------- fuse


def cmd_fuse(args) -> int:
    from .geometry import backproject_points

    s = Session(args.session, args.manifest)
    cfg = _resolve({"voxel": 0.05, "min_component_fraction": 0.05, "k_sigma": 3.0},
                   s.config("fuse"), args, {"voxel": "voxel"})
    depth_dir = args.depth_dir or s.manifest.get("depth_dir")
    if not depth_dir:
        raise FormatError("no depth frames: manifest depth_dir is empty and --depth-dir not given")
    t0 = time.perf_counter()
    frames = io.read_depth_frames(s.path(depth_dir))
    if not frames:
        raise FormatError("depth directory holds no frames")
    pts = []
    for f in frames:
        v, u = np.nonzero(f.depth > 0)
        if len(v):
            q = np.stack([u, v], axis=1).astype(float)
            pts.append(backproject_points(q, f.depth[v, u], f.pose.rotation, f.pose.translation,
                                          f.intrinsics))
    if not pts:
        raise FormatError("every depth frame is empty")
    P = np.concatenate(pts)
    vol = TsdfVolume.from_bounds(P.min(axis=0), P.max(axis=0), float(cfg["voxel"]))
    integrate_all(vol, frames)
    raw = extract_mesh(vol)
    mesh = clean_mesh(raw, float(cfg["min_component_fraction"]), float(cfg["k_sigma"]))
    out = s.stage_dir("fused", args.out)
    io.write_mesh(os.path.join(out, "mesh.ply"), mesh)
    io.write_cloud(os.path.join(out, "scene_cloud.ply"), PointCloud(mesh.vertices))
    n_comp, _ = connected_face_components(mesh)
    _write_log(s, "fuse", {"command": "fuse", "config": cfg, "frames": len(frames),
                           "volume_dims": list(vol.dims), "raw_faces": raw.n_faces,
                           "faces": mesh.n_faces, "components": n_comp,
                           "timing_s": time.perf_counter() - t0})
    return EXIT_OK


# --------------------------------------------------------------------------- align-init


def cmd_align_init(args) -> int:
    s = Session(args.session, args.manifest)
    t0 = time.perf_counter()
    trajs = _native_trajs(s)
    yaw, trans, resid = [], [], {}
    for v, tr in zip(s.views(), trajs):
        regs = io.read_registrations(s.path(v["registrations"]))
        off = initialize_offsets(tr, regs)
        yaw.append(off.yaw)
        trans.append(off.translation)
        frames = np.array([f for f, _ in regs])
        c = off.apply(tr.centers[frames])
        resid[v["view_id"]] = float(np.sqrt(np.mean(np.sum(
            (c - np.stack([p.center for _, p in regs])) ** 2, axis=1))))
    out = s.stage_dir("align_init", args.out)
    io.write_offsets(os.path.join(out, "offsets.json"), OffsetParams(yaw, trans), s.view_ids())
    _write_log(s, "align-init", {"command": "align-init", "rms_center_residual_m": resid,
                                 "timing_s": time.perf_counter() - t0})
    return EXIT_OK


# --------------------------------------------------------------------------- calibrate


def cmd_calibrate(args) -> int:
    s = Session(args.session, args.manifest)
    defaults = {"lr": 1e-3, "max_iters": 2000, "clip_norm": 1.0, "w_track": 1.0, "w_chamfer": 0.1,
                "w_ba": 0.01, "crop_margins": [0.5, 0.1], "check_gradients": False}
    cfg = _resolve(defaults, s.config("calibrate"), args,
                   {"lr": "lr", "max_iters": "max_iters", "w_track": "w_track",
                    "w_chamfer": "w_chamfer", "w_ba": "w_ba", "check_gradients": "check_gradients"})
    ids = s.view_ids()
    init_path = args.init or s.stage_file("align_init", "offsets.json")
    if not os.path.exists(init_path):
        raise FormatError(f"initial offsets not found: {init_path}; run align-init first")
    init, init_ids = io.read_offsets(init_path)
    if init_ids != ids:
        raise FormatError("initial offsets list different views than the manifest")
    trajs = _native_trajs(s)
    kps = _read_keypoints(s)
    kps, synced = _synced(s, kps, trajs)
    clouds = [io.read_cloud(s.path(v["local_cloud"])) for v in s.views()]
    scene = io.read_cloud(args.scene) if args.scene else io.read_cloud(s.path(s.manifest["global_cloud"]))
    landmarks, lobs = io.read_landmarks(s.path(s.manifest["landmarks"]))
    lobs_list = [lobs.get(v) for v in ids]
    if any(o is None for o in lobs_list):
        raise FormatError("landmark file lacks observations for some view")
    tracks = io.read_tracks(s.path(s.manifest["tracks"])) if s.manifest.get("tracks") else None
    problem = CalibrationProblem(synced, tracks, clouds, scene, lobs_list, landmarks)
    ocfg = OptimizerConfig(
        adam=AdamConfig(lr=float(cfg["lr"]), max_iters=int(cfg["max_iters"]),
                        clip_norm=float(cfg["clip_norm"])),
        weights=LossWeights(float(cfg["w_track"]), float(cfg["w_chamfer"]), float(cfg["w_ba"])),
        check_gradients=bool(cfg["check_gradients"]),
        crop_margins=tuple(float(m) for m in cfg["crop_margins"]))
    t0 = time.perf_counter()
    if args.single_view:
        if args.single_view not in ids:
            raise UsageError(f"--single-view {args.single_view!r} is not one of {ids}")
        v = ids.index(args.single_view)
        sub = problem.subproblem(v)
        res = calibrate(sub, OffsetParams(init.yaw[v:v + 1], init.translation[v:v + 1]), ocfg)
        out_ids = [args.single_view]
        out_trajs = [trajs[v]]
    else:
        res = calibrate(problem, init, ocfg)
        out_ids = ids
        out_trajs = trajs
    out = s.stage_dir("calibration", args.out)
    mode = "single-view" if args.single_view else "dual-view"
    io.write_offsets(os.path.join(out, "offsets.json"), res.offsets, out_ids, {"mode": mode})
    for i, (v, tr) in enumerate(zip(out_ids, out_trajs)):
        io.write_trajectory(os.path.join(out, f"{v}_trajectory.json"),
                            apply_offset_to_trajectory(tr, res.offsets.transform(i)))
    _write_log(s, "calibrate", {"command": "calibrate", "mode": mode, "config": cfg,
                                "iterations": res.iterations, "loss_history": res.history,
                                "final": res.breakdown.as_dict(),
                                "timing_s": time.perf_counter() - t0})
    return EXIT_OK


# --------------------------------------------------------------------------- triangulate


def cmd_triangulate(args) -> int:
    s = Session(args.session, args.manifest)
    cfg = _resolve({"conf_gate": 0.3, "min_angle_deg": 2.0}, s.config("triangulate"), args,
                   {"conf_gate": "conf_gate", "min_angle_deg": "min_angle_deg"})
    t0 = time.perf_counter()
    trajs = _read_view_trajs(s, args.trajs or os.path.join(s.root, "calibration"))
    kps, trajs = _synced(s, _read_keypoints(s), trajs)
    k3 = triangulate_sequence(kps, trajs, float(cfg["conf_gate"]), float(cfg["min_angle_deg"]))
    out = s.stage_dir("triangulation", args.out)
    io.write_keypoints3d(os.path.join(out, "keypoints3d.json"), k3)
    counts = {str(r): int(np.count_nonzero(k3.reason == r)) for r in np.unique(k3.reason)}
    _write_log(s, "triangulate", {"command": "triangulate", "config": cfg,
                                  "valid_fraction": float(k3.valid.mean()), "reason_counts": counts,
                                  "median_residual_px": float(np.nanmedian(k3.residual))
                                  if k3.valid.any() else None,
                                  "timing_s": time.perf_counter() - t0})
    return EXIT_OK


# --------------------------------------------------------------------------- fit


def cmd_fit(args) -> int:
    s = Session(args.session, args.manifest)
    d = FitConfig()
    defaults = {"w_kp3d": d.weights.kp3d, "w_smooth": d.weights.smooth, "w_prior": d.weights.prior,
                "w_reproj": d.weights.reproj, "stage1_iters": d.stage1.max_iters,
                "stage2_iters": d.stage2.max_iters, "stage1_lr": d.stage1.lr, "stage2_lr": d.stage2.lr}
    cfg = _resolve(defaults, s.config("fit"), args,
                   {"w_kp3d": "w_kp3d", "w_smooth": "w_smooth", "w_prior": "w_prior",
                    "w_reproj": "w_reproj", "stage1_iters": "stage1_iters",
                    "stage2_iters": "stage2_iters"})
    fcfg = FitConfig(
        FitWeights(float(cfg["w_kp3d"]), float(cfg["w_smooth"]), float(cfg["w_prior"]),
                   float(cfg["w_reproj"])),
        replace(d.stage1, lr=float(cfg["stage1_lr"]), max_iters=int(cfg["stage1_iters"])),
        replace(d.stage2, lr=float(cfg["stage2_lr"]), max_iters=int(cfg["stage2_iters"])))
    t0 = time.perf_counter()
    k3 = io.read_keypoints3d(args.k3d or s.stage_file("triangulation", "keypoints3d.json"))
    trajs = _read_view_trajs(s, args.trajs or os.path.join(s.root, "calibration"))
    kps, trajs = _synced(s, _read_keypoints(s), trajs)
    model = SkeletonModel()
    init = init_from_keypoints3d(k3, model)
    res = fit_motion(k3, kps, trajs, init, model, fcfg)
    out = s.stage_dir("fit", args.out)
    io.write_params(os.path.join(out, "params.json"), res.params)
    io.write_joints(os.path.join(out, "joints.json"), forward_kinematics(model, res.params))
    _write_log(s, "fit", {"command": "fit", "config": cfg, "initial": res.initial.as_dict(),
                          "final": res.breakdown.as_dict(), "loss_history": res.history,
                          "timing_s": time.perf_counter() - t0})
    return EXIT_OK


# --------------------------------------------------------------------------- contact-align


def cmd_contact_align(args) -> int:
    s = Session(args.session, args.manifest)
    t0 = time.perf_counter()
    params = io.read_params(args.params or s.stage_file("fit", "params.json"))
    trajs = _read_view_trajs(s, args.trajs or os.path.join(s.root, "calibration"))
    ann = io.read_contact(args.contact or s.path(s.manifest["contact"]))
    model = SkeletonModel()
    new, new_trajs, tf = contact_align(params, trajs, ann, model)
    out = s.stage_dir("contact", args.out)
    io.write_params(os.path.join(out, "params.json"), new)
    io.write_joints(os.path.join(out, "joints.json"), forward_kinematics(model, new))
    for tr in new_trajs:
        io.write_trajectory(os.path.join(out, f"{tr.view_id}_trajectory.json"), tr)
    io.write_json(os.path.join(out, "transform.json"),
                  {"kind": "contact_transform", "version": io.FORMAT_VERSION,
                   "yaw": tf.yaw, "translation": tf.translation})
    _write_log(s, "contact-align", {"command": "contact-align", "yaw": tf.yaw,
                                    "translation": tf.translation.tolist(),
                                    "timing_s": time.perf_counter() - t0})
    return EXIT_OK


# --------------------------------------------------------------------------- stitch


def _map_trajectory(tr: Trajectory, m: SimilarityTransform) -> Trajectory:
    """Express a trajectory in another frame related by a similarity ``m``."""
    c = m.apply(tr.centers)
    R = tr.rotations @ m.rotation.T
    return Trajectory(tr.view_id, tr.timestamps, R, -np.einsum("nij,nj->ni", R, c), tr.intrinsics)


def cmd_stitch(args) -> int:
    s = Session(args.session, args.manifest)
    entry = s.manifest.get("chunks")
    if not entry:
        raise FormatError("manifest lists no trajectory chunks")
    t0 = time.perf_counter()
    trajs = [io.read_trajectory(s.path(p)) for p in entry["trajectories"]]
    overlaps = [Overlap(int(a), int(b), int(n)) for a, b, n in entry["overlaps"]]
    al = stitch_chunks([(t, None) for t in trajs], overlaps, with_scale=not args.no_scale)
    mapped = [_map_trajectory(t, m) for t, m in zip(trajs, al.cumulative)]
    # keep chunk 0 whole, then each later chunk from the end of its overlap
    parts = [mapped[0]]
    for t, ov in zip(mapped[1:], overlaps):
        parts.append(t.slice(ov.cur_start + ov.length))
    stitched = Trajectory(trajs[0].view_id, np.concatenate([p.timestamps for p in parts]),
                          np.concatenate([p.rotations for p in parts]),
                          np.concatenate([p.translations for p in parts]), trajs[0].intrinsics)
    out = s.stage_dir("stitch", args.out)
    io.write_transforms(os.path.join(out, "transforms.json"), list(al.cumulative))
    io.write_trajectory(os.path.join(out, "trajectory.json"), stitched)
    _write_log(s, "stitch", {"command": "stitch", "chunks": len(trajs), "frames": len(stitched),
                             "scales": [m.scale for m in al.cumulative],
                             "timing_s": time.perf_counter() - t0})
    return EXIT_OK


# --------------------------------------------------------------------------- metrics


def cmd_metrics(args) -> int:
    s = Session(args.session, args.manifest)
    t0 = time.perf_counter()
    pred_path = args.pred
    if pred_path is None:
        for cand in (s.stage_file("contact", "joints.json"), s.stage_file("fit", "joints.json")):
            if os.path.exists(cand):
                pred_path = cand
                break
    if pred_path is None:
        raise FormatError("no predicted joints found; run fit first or pass --pred")
    gt = s.manifest.get("ground_truth") or {}
    gt_path = args.gt or (s.path(gt["joints"]) if gt.get("joints") else None)
    if gt_path is None:
        raise FormatError("no ground-truth joints; pass --gt")
    pred = io.read_joints(pred_path)
    truth = io.read_joints(gt_path)
    if pred.shape != truth.shape:
        # predictions live on the synchronized timeline
        (a1, b1), _ = synchronize(s.frame_offset(), len(truth), len(truth))
        truth = truth[a1:a1 + len(pred)]
    model = SkeletonModel()
    feet = [j for pair in model.foot_joints for j in pair]
    chunks = args.chunks or [100]
    chunks = [min(c, len(pred)) for c in chunks]
    traj_dir = os.path.dirname(pred_path)
    trajs = None
    if all(os.path.exists(os.path.join(traj_dir, f"{v}_trajectory.json")) for v in s.view_ids()):
        trajs = _read_view_trajs(s, traj_dir)
    elif os.path.isdir(os.path.join(s.root, "calibration")):
        with contextlib.suppress(FormatError):
            trajs = _read_view_trajs(s, os.path.join(s.root, "calibration"))
    kps = None
    if trajs is not None:
        kps, trajs = _synced(s, _read_keypoints(s), trajs)
    rep = metrics_report(pred, truth, feet, chunks, kps, trajs)
    rep = {"kind": "metrics", "version": io.FORMAT_VERSION,
           "units": {"mpjpe": "mm", "rte": "percent", "jitter": "m/frame", "reproj_px": "px"},
           "prediction": os.path.relpath(pred_path, s.root), **rep}
    cal = s.stage_file("calibration", "offsets.json")
    if gt.get("offsets") and os.path.exists(cal):
        est, ids = io.read_offsets(cal)
        ref, ref_ids = io.read_offsets(s.path(gt["offsets"]))
        errs = {}
        for i, v in enumerate(ids):
            j = ref_ids.index(v)
            dy = float(np.degrees(abs((est.yaw[i] - ref.yaw[j] + np.pi) % (2 * np.pi) - np.pi)))
            errs[v] = {"yaw_deg": dy,
                       "translation_m": float(np.linalg.norm(est.translation[i] - ref.translation[j]))}
        rep["calibration_error"] = errs
    out = s.stage_dir("metrics", args.out)
    io.write_json(os.path.join(out, "report.json"), rep)
    _write_log(s, "metrics", {"command": "metrics", "timing_s": time.perf_counter() - t0})
    if not args.quiet:
        print(json.dumps({k: v for k, v in rep.items() if k not in ("units", "kind", "version")},
                         indent=1, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualcap", description=__doc__.split("\n\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog="Exit codes: 0 ok, 2 usage, 3 input/format, 4 numerical. "
                                       "DUALCAP_THREADS limits BLAS/OpenMP threads.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("--backend", choices=("cython", "python"), default=None,
                   help="kernel backend (default: compiled when available)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def common(sp, out=True):
        sp.add_argument("--session", "-s", required=True, help="session directory")
        sp.add_argument("--manifest", default=None,
                        help=f"manifest path (default: SESSION/{MANIFEST})")
        if out:
            sp.add_argument("--out", default=None, help="output directory (default: SESSION/<stage>)")

    sp = sub.add_parser("synth", help="generate a synthetic session with ground truth")
    sp.add_argument("--session", "-s", required=True, help="output session directory")
    sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    sp.add_argument("--kind", choices=("room", "ambiguity"), default="room", help="scene kind")
    sp.add_argument("--frames", type=int, default=100, help="number of frames (default 100)")
    sp.add_argument("--keypoint-px", type=float, default=1.0, help="2D keypoint noise, px")
    sp.add_argument("--track-px", type=float, default=1.0, help="track pixel noise, px")
    sp.add_argument("--landmark-px", type=float, default=0.5, help="landmark pixel noise, px")
    sp.add_argument("--cloud-m", type=float, default=0.0, help="local cloud noise, m")
    sp.add_argument("--depth-rel", type=float, default=0.0, help="relative track depth noise")
    sp.add_argument("--traj-m", type=float, default=0.0, help="native camera center noise, m")
    sp.add_argument("--traj-rad", type=float, default=0.0, help="native camera rotation noise, rad")
    sp.add_argument("--dropout", type=float, default=0.0, help="confidence dropout rate")
    sp.add_argument("--registration-m", type=float, default=0.02,
                    help="noise on registered camera centers, m (default 0.02)")
    sp.add_argument("--registration-rad", type=float, default=0.01,
                    help="noise on registered camera rotations, rad (default 0.01)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fuse", help="TSDF-fuse the depth scan into a mesh")
    common(sp)
    sp.add_argument("--depth-dir", default=None, help="depth frame directory (default: manifest)")
    sp.add_argument("--voxel", type=float, default=None, help="voxel size in m (default 0.05)")
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("align-init", help="initial per-view offsets from registered frames")
    common(sp)
    sp.set_defaults(func=cmd_align_init)

    sp = sub.add_parser("calibrate", help="refine per-view offsets against the scene")
    common(sp)
    sp.add_argument("--init", default=None, help="initial offsets (default: align_init/offsets.json)")
    sp.add_argument("--scene", default=None, help="scene cloud PLY (default: manifest global_cloud)")
    sp.add_argument("--single-view", default=None, metavar="VIEW",
                    help="calibrate only VIEW without the track loss (single-view ablation)")
    sp.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 1e-3)")
    sp.add_argument("--max-iters", type=int, default=None, help="Adam iterations per crop round")
    sp.add_argument("--w-track", type=float, default=None, help="track loss weight (default 1)")
    sp.add_argument("--w-chamfer", type=float, default=None, help="Chamfer weight (default 0.1)")
    sp.add_argument("--w-ba", type=float, default=None, help="landmark loss weight (default 0.01)")
    sp.add_argument("--check-gradients", action="store_true", default=None,
                    help="verify analytic gradients by finite differences before each round")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("triangulate", help="triangulate 2D keypoints with calibrated cameras")
    common(sp)
    sp.add_argument("--trajs", default=None, help="directory of <view>_trajectory.json "
                                                  "(default: SESSION/calibration)")
    sp.add_argument("--conf-gate", type=float, default=None, help="confidence gate (default 0.3)")
    sp.add_argument("--min-angle-deg", type=float, default=None, help="minimum ray angle (default 2)")
    sp.set_defaults(func=cmd_triangulate)

    sp = sub.add_parser("fit", help="fit the skeleton to triangulated joints")
    common(sp)
    sp.add_argument("--k3d", default=None, help="keypoints3d.json (default: triangulation stage)")
    sp.add_argument("--trajs", default=None, help="trajectory directory (default: calibration)")
    for name, helptext in (("kp3d", "3D keypoint"), ("smooth", "smoothness"), ("prior", "pose prior"),
                           ("reproj", "reprojection")):
        sp.add_argument(f"--w-{name}", type=float, default=None, help=f"{helptext} weight")
    sp.add_argument("--stage1-iters", type=int, default=None, help="stage 1 iterations")
    sp.add_argument("--stage2-iters", type=int, default=None, help="stage 2 iterations")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("contact-align", help="rigidly snap the fitted feet to contact markers")
    common(sp)
    sp.add_argument("--params", default=None, help="skeleton params (default: fit/params.json)")
    sp.add_argument("--trajs", default=None, help="trajectory directory (default: calibration)")
    sp.add_argument("--contact", default=None, help="contact annotation (default: manifest)")
    sp.set_defaults(func=cmd_contact_align)

    sp = sub.add_parser("stitch", help="chain overlapping trajectory chunks into one frame")
    common(sp)
    sp.add_argument("--no-scale", action="store_true", help="rigid instead of similarity fits")
    sp.set_defaults(func=cmd_stitch)

    sp = sub.add_parser("metrics", help="evaluate joints against ground truth")
    common(sp)
    sp.add_argument("--pred", default=None, help="predicted joints (default: contact, else fit)")
    sp.add_argument("--gt", default=None, help="ground-truth joints (default: manifest)")
    sp.add_argument("--chunks", type=int, nargs="+", default=None,
                    help="W-MPJPE chunk lengths (default 100)")
    sp.add_argument("--quiet", action="store_true", help="do not print the report")
    sp.set_defaults(func=cmd_metrics)
    return p


def _thread_limit():
    n = os.environ.get("DUALCAP_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        k = int(n)
        if k < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"DUALCAP_THREADS must be a positive integer, got {n!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=k)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with code 2 on usage errors
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.backend:
            kernels.use_backend(args.backend)
        with _thread_limit():
            return args.func(args)
    except UsageError as e:
        print(f"dualcap: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as e:
        if args.backend and "kernels" in str(e):
            print(f"dualcap: usage error: {e}", file=sys.stderr)
            return EXIT_USAGE
        raise
    except (InputError, OSError, KeyError, TypeError, ValueError) as e:
        print(f"dualcap: input error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as e:
        print(f"dualcap: numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
