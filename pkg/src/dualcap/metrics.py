"""World-space motion metrics.

Joint sequences are ``(frames, joints, 3)`` arrays in meters.  Position
errors are reported in millimeters, RTE in percent, jitter in meters per
frame and reprojection errors in pixels.
"""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .alignment import CorrespondenceSet, procrustes_similarity
from .errors import EmptyObservations, LengthMismatch, SpecInvalid, ZeroDisplacement
from .geometry import SimilarityTransform, Trajectory

log = logging.getLogger(__name__)

CONTACT_HEIGHT = 0.05


def _pair(pred, gt):
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise LengthMismatch(f"prediction {p.shape} and ground truth {g.shape} differ")
    if p.ndim != 3 or p.shape[-1] != 3:
        raise SpecInvalid("joint sequences must be (frames, joints, 3)")
    return p, g


def rigid_align(src, tgt) -> SimilarityTransform:
    """Least-squares rotation and translation (no scale) taking ``src`` onto ``tgt``."""
    return procrustes_similarity(CorrespondenceSet(np.reshape(src, (-1, 3)), np.reshape(tgt, (-1, 3))),
                                 with_scale=False)


def _chunks(n: int, chunk: int):
    if chunk < 2:
        raise SpecInvalid("chunk length must be at least 2 frames")
    starts = list(range(0, n, chunk))
    out = [(a, min(a + chunk, n)) for a in starts]
    # a trailing piece shorter than two frames cannot be aligned; fold it in
    if len(out) > 1 and out[-1][1] - out[-1][0] < 2:
        a, _ = out[-2]
        out = out[:-2] + [(a, n)]
    return out


def _mpjpe(p, g) -> float:
    return float(np.mean(np.linalg.norm(p - g, axis=-1)) * 1000.0)


def w_mpjpe(pred, gt, chunk: int = 100) -> float:
    """Per chunk: align on the first two frames' joints, then MPJPE (mm);
    averaged over chunks."""
    p, g = _pair(pred, gt)
    if len(p) < 2:
        raise LengthMismatch("need at least two frames")
    errs = []
    for a, b in _chunks(len(p), chunk):
        t = rigid_align(p[a:a + 2], g[a:a + 2])
        errs.append(_mpjpe(t.apply(p[a:b].reshape(-1, 3)).reshape(p[a:b].shape), g[a:b]))
    return float(np.mean(errs))


def wa_mpjpe(pred, gt, chunk: int = 100) -> float:
    """Per chunk: align on every frame of the chunk, then MPJPE (mm)."""
    p, g = _pair(pred, gt)
    if len(p) < 2:
        raise LengthMismatch("need at least two frames")
    errs = []
    for a, b in _chunks(len(p), chunk):
        t = rigid_align(p[a:b], g[a:b])
        errs.append(_mpjpe(t.apply(p[a:b].reshape(-1, 3)).reshape(p[a:b].shape), g[a:b]))
    return float(np.mean(errs))


def mpjpe(pred, gt) -> float:
    """Unaligned mean per-joint position error in mm."""
    p, g = _pair(pred, gt)
    return _mpjpe(p, g)


def rte(pred_root, gt_root) -> float:
    """Root translation error in percent of the ground-truth path length,
    after rigid (no-scale) alignment of the whole trajectory."""
    p = np.asarray(pred_root, dtype=float).reshape(-1, 3)
    g = np.asarray(gt_root, dtype=float).reshape(-1, 3)
    if p.shape != g.shape:
        raise LengthMismatch("root trajectories differ in length")
    if len(p) < 2:
        raise LengthMismatch("need at least two frames")
    length = float(np.sum(np.linalg.norm(np.diff(g, axis=0), axis=1)))
    if length <= 0:
        raise ZeroDisplacement("ground-truth root never moves")
    t = _rigid_align_any(p, g)
    err = np.linalg.norm(t.apply(p) - g, axis=1)
    return float(np.mean(err) / length * 100.0)


def _rigid_align_any(p, g) -> SimilarityTransform:
    """Rigid fit that tolerates collinear trajectories (rotation about the
    line is then irrelevant to the residual)."""
    try:
        return rigid_align(p, g)
    except Exception:
        # collinear: pad with a perpendicular offset that both sets share
        d = g[-1] - g[0]
        n = np.cross(d, [0.0, 0.0, 1.0])
        if np.linalg.norm(n) < 1e-12:
            n = np.cross(d, [1.0, 0.0, 0.0])
        n /= np.linalg.norm(n)
        dp = p[-1] - p[0]
        m = np.cross(dp, [0.0, 0.0, 1.0])
        if np.linalg.norm(m) < 1e-12:
            m = np.cross(dp, [1.0, 0.0, 0.0])
        m /= np.linalg.norm(m)
        return rigid_align(np.vstack([p, p.mean(0) + m]), np.vstack([g, g.mean(0) + n]))


def jitter(seq, foot_joint_ids: Sequence[int], contact_height: float = CONTACT_HEIGHT,
           return_count: bool = False):
    """Contact-gated foot skating: mean horizontal foot speed (m/frame) over
    frame pairs in which the foot is below ``contact_height`` at both ends,
    averaged over the feet that touch down.

    With no contact frames the result is 0 and a warning is logged.
    """
    s = np.asarray(seq, dtype=float)
    if s.ndim != 3 or len(s) < 2:
        raise LengthMismatch("jitter needs a (frames >= 2, joints, 3) sequence")
    vals, count = [], 0
    for j in foot_joint_ids:
        z = s[:, j, 2]
        both = (z[1:] < contact_height) & (z[:-1] < contact_height)
        n = int(np.count_nonzero(both))
        if n == 0:
            continue
        v = np.linalg.norm(np.diff(s[:, j, :2], axis=0), axis=1)
        vals.append(float(np.mean(v[both])))
        count += n
    if not vals:
        log.warning("jitter: no contact frames below %.3f m", contact_height)
        value = 0.0
    else:
        value = float(np.mean(vals))
    return (value, count) if return_count else value


def _project_seq(joints, traj: Trajectory):
    T = len(joints)
    xc = np.einsum("tab,tjb->tja", traj.rotations[:T], joints) + traj.translations[:T, None]
    k = traj.intrinsics
    z = xc[..., 2]
    zs = np.where(z > 1e-9, z, np.nan)
    uv = np.stack([k.fx * xc[..., 0] / zs + k.cx, k.fy * xc[..., 1] / zs + k.cy], axis=-1)
    return uv, z


def reproj_error(joints, keypoints: Sequence, trajs: Sequence[Trajectory],
                 conf_threshold: float = 0.0) -> float:
    """Mean pixel distance between projected joints and 2D keypoints whose
    confidence exceeds ``conf_threshold``, pooled over views."""
    J = np.asarray(joints, dtype=float)
    errs = []
    for kp, tr in zip(keypoints, trajs):
        if kp.n_frames != len(J):
            raise LengthMismatch("keypoints and joints differ in frame count")
        uv, z = _project_seq(J, tr)
        ok = (kp.conf > conf_threshold) & (z > 1e-9)
        errs.append(np.linalg.norm(uv[ok] - kp.pixels[ok], axis=-1))
    e = np.concatenate(errs) if errs else np.empty(0)
    if len(e) == 0:
        raise EmptyObservations("no confident keypoints")
    return float(np.mean(e))


def depth_mse_proxy(joints, depth_samples: Sequence, trajs: Sequence[Trajectory]) -> float:
    """Mean squared difference (m^2) between joint camera depths and observed
    depth samples at the joint pixels; samples <= 0 are ignored.

    ``depth_samples[v]`` is ``(frames, joints)`` for view ``v``.  This stands
    in for a rendered-body depth comparison.
    """
    J = np.asarray(joints, dtype=float)
    res = []
    for d, tr in zip(depth_samples, trajs):
        d = np.asarray(d, dtype=float)
        if d.shape != J.shape[:2]:
            raise LengthMismatch("depth samples must be (frames, joints)")
        _, z = _project_seq(J, tr)
        ok = d > 0
        res.append((z[ok] - d[ok]) ** 2)
    r = np.concatenate(res) if res else np.empty(0)
    if len(r) == 0:
        raise EmptyObservations("no valid depth samples")
    return float(np.mean(r))


def report(pred, gt, foot_joint_ids, chunks=(100,), keypoints=None, trajs=None,
           contact_height: float = CONTACT_HEIGHT) -> dict:
    """All metrics in one dictionary (used by the CLI)."""
    out = {}
    for c in chunks:
        out[f"w_mpjpe_{c}"] = w_mpjpe(pred, gt, c)
        out[f"wa_mpjpe_{c}"] = wa_mpjpe(pred, gt, c)
    out["mpjpe"] = mpjpe(pred, gt)
    try:
        out["rte"] = rte(np.asarray(pred)[:, 0], np.asarray(gt)[:, 0])
    except ZeroDisplacement:
        out["rte"] = None
    out["jitter"], out["jitter_contact_frames"] = jitter(pred, foot_joint_ids, contact_height, True)
    if keypoints is not None and trajs is not None:
        out["reproj_px"] = reproj_error(pred, keypoints, trajs)
    return out

