"""World-frame skeleton fitting and contact-marker post-alignment."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import minimize

from .errors import NoContactFrames, NoValidJoints, SizeMismatch, SpecInvalid
from .geometry import Trajectory, so3_exp, so3_log, yaw_rotation, yaw_rotation_derivative
from .optim import AdamConfig, adam
from .skeleton import N_SHAPE, SkeletonModel, SkeletonParams, fk_backward, fk_state

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContactAnnotation:
    """Contact frames with marker positions; ``cz`` is the marker height."""

    frames: np.ndarray
    markers: np.ndarray
    cz: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        m = np.asarray(self.markers, dtype=float).reshape(-1, 3)
        cz = np.asarray(self.cz, dtype=float).reshape(-1)
        if not (len(f) == len(m) == len(cz)):
            raise SizeMismatch("contact columns differ in length")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(cz))):
            raise SpecInvalid("contact markers must be finite")
        object.__setattr__(self, "frames", f)
        object.__setattr__(self, "markers", m)
        object.__setattr__(self, "cz", cz)

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class FitWeights:
    kp3d: float = 1.0
    smooth: float = 0.5
    prior: float = 0.01
    reproj: float = 1e-4

    def __post_init__(self):
        if any(not np.isfinite(v) or v < 0 for v in self.__dict__.values()):
            raise SpecInvalid("fit weights must be finite and non-negative")


@dataclass(frozen=True)
class FitConfig:
    weights: FitWeights = field(default_factory=FitWeights)
    stage1: AdamConfig = field(default_factory=lambda: AdamConfig(lr=1e-2, max_iters=300,
                                                                   lr_final=0.05))
    stage2: AdamConfig = field(default_factory=lambda: AdamConfig(lr=2e-2, max_iters=3000,
                                                                   lr_final=0.01,
                                                                   min_iters=300))


@dataclass
class FitBreakdown:
    total: float
    kp3d: float
    smooth: float
    prior: float
    reproj: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FitResult:
    params: SkeletonParams
    history: list
    breakdown: FitBreakdown
    initial: FitBreakdown


class FitProblem:
    """Skeleton-fitting objective over all frames of a sequence.

    * ``kp3d``: mean squared distance between FK joints and valid triangulated joints;
    * ``smooth``: mean squared first difference of joint positions plus that of
      the pose parameters;
    * ``prior``: mean squared deviation of the body pose from the reference pose;
    * ``reproj``: confidence-weighted mean squared pixel error of the FK joints
      in every view.
    """

    def __init__(self, model: SkeletonModel, k3d_points, k3d_valid, keypoints: Sequence = (),
                 trajs: Sequence[Trajectory] = (), prior_pose=None,
                 weights: Optional[FitWeights] = None):
        self.model = model
        self.Y = np.asarray(k3d_points, dtype=float)
        self.valid = np.asarray(k3d_valid, dtype=bool) & np.all(np.isfinite(self.Y), axis=-1)
        if self.Y.ndim != 3 or self.Y.shape[1:] != (model.n_joints, 3):
            raise SizeMismatch("3D keypoints must be (frames, joints, 3)")
        if not np.any(self.valid):
            raise NoValidJoints("no valid 3D joints to fit")
        self.T = self.Y.shape[0]
        self.Yz = np.where(self.valid[..., None], self.Y, 0.0)
        self.keypoints = list(keypoints)
        self.trajs = list(trajs)
        if len(self.keypoints) != len(self.trajs):
            raise SizeMismatch("one trajectory per keypoint stream")
        for kp, tr in zip(self.keypoints, self.trajs):
            if kp.n_frames != self.T or len(tr) < self.T:
                raise SizeMismatch("keypoint streams must cover every fitted frame")
        self.prior_pose = None if prior_pose is None else np.asarray(prior_pose, dtype=float)
        self.weights = weights or FitWeights()

    def evaluate(self, params: SkeletonParams, grad: bool = False):
        w = self.weights
        st = fk_state(self.model, params)
        P = st.joints
        gJ = np.zeros_like(P) if grad else None
        g_pose = np.zeros_like(params.pose) if grad else None

        nv = np.count_nonzero(self.valid)
        r = np.where(self.valid[..., None], P - self.Yz, 0.0)
        kp3d = float(np.sum(r * r) / nv)
        if grad:
            gJ += w.kp3d * (2.0 / nv) * r

        smooth = 0.0
        if self.T > 1:
            dP = np.diff(P, axis=0)
            dq = np.diff(params.pose, axis=0)
            nP, nq = dP[..., 0].size, dq[..., 0].size
            smooth = float(np.sum(dP * dP) / nP + np.sum(dq * dq) / nq)
            if grad:
                gd = w.smooth * (2.0 / nP) * dP
                gJ[1:] += gd
                gJ[:-1] -= gd
                gq = w.smooth * (2.0 / nq) * dq
                g_pose[1:] += gq
                g_pose[:-1] -= gq

        prior = 0.0
        if self.prior_pose is not None:
            d = params.pose[:, 1:] - self.prior_pose[:, 1:]
            n = d[..., 0].size
            prior = float(np.sum(d * d) / n)
            if grad:
                g_pose[:, 1:] += w.prior * (2.0 / n) * d

        reproj = 0.0
        if self.keypoints:
            num, den = 0.0, 0.0
            terms = []
            for kp, tr in zip(self.keypoints, self.trajs):
                R = tr.rotations[:self.T, None]
                Tt = tr.translations[:self.T, None]
                xc = np.einsum("tjab,tjb->tja", np.broadcast_to(R, (self.T, P.shape[1], 3, 3)), P) + Tt
                z = xc[..., 2]
                c = np.where(z > 1e-9, kp.conf, 0.0)
                zs = np.where(z > 1e-9, z, 1.0)
                k = tr.intrinsics
                u = k.fx * xc[..., 0] / zs + k.cx
                v = k.fy * xc[..., 1] / zs + k.cy
                eu, ev = u - kp.pixels[..., 0], v - kp.pixels[..., 1]
                num += float(np.sum(c * (eu * eu + ev * ev)))
                den += float(np.sum(c))
                terms.append((R, xc, zs, c, eu, ev, k))
            if den > 0:
                reproj = num / den
                if grad:
                    for R, xc, zs, c, eu, ev, k in terms:
                        a = w.reproj * 2.0 * c / den
                        gu, gv = a * eu, a * ev
                        gx = np.stack([gu * k.fx / zs, gv * k.fy / zs,
                                       -(gu * k.fx * xc[..., 0] + gv * k.fy * xc[..., 1]) / (zs * zs)],
                                      axis=-1)
                        gJ += np.einsum("tjab,tja->tjb", np.broadcast_to(R, gx.shape + (3,)), gx)

        total = w.kp3d * kp3d + w.smooth * smooth + w.prior * prior + w.reproj * reproj
        bd = FitBreakdown(float(total), kp3d, smooth, prior, reproj)
        if not grad:
            return bd, None
        d_beta, d_pose, d_transl = fk_backward(self.model, params, st, gJ)
        return bd, np.concatenate([d_beta, (d_pose + g_pose).reshape(-1), d_transl.reshape(-1)])


def _stage_mask(n_frames: int, stage: int, n_joints: int) -> np.ndarray:
    nb, npz = N_SHAPE, n_frames * n_joints * 3
    m = np.zeros(nb + npz + 3 * n_frames, dtype=bool)
    m[:nb] = True
    m[nb + npz:] = True
    if stage == 2:
        m[:] = True
    return m


def fit_motion(k3d, keypoints: Sequence, trajs: Sequence[Trajectory], init: SkeletonParams,
               model: Optional[SkeletonModel] = None, cfg: Optional[FitConfig] = None,
               prior_pose=None) -> FitResult:
    """Two-stage fit: shape and root translation first, then everything.

    ``k3d`` is a :class:`~dualcap.triangulation.Keypoints3D` (or any object with
    ``points`` and ``valid``).  The body-pose prior pulls toward ``prior_pose``
    (default: the initialization).
    """
    model = model or SkeletonModel()
    cfg = cfg or FitConfig()
    if init.n_frames != k3d.points.shape[0]:
        raise SizeMismatch("initialization and keypoints differ in frame count")
    prior = init.pose.copy() if prior_pose is None else prior_pose
    prob = FitProblem(model, k3d.points, k3d.valid, keypoints, trajs, prior, cfg.weights)
    T = init.n_frames

    def fun(x):
        bd, g = prob.evaluate(SkeletonParams.from_vector(x, T), grad=True)
        return bd.total, g

    initial = prob.evaluate(init)[0]
    x = init.to_vector()
    history = []
    for stage, acfg in ((1, cfg.stage1), (2, cfg.stage2)):
        res = adam(fun, x, acfg, mask=_stage_mask(T, stage, model.n_joints))
        x = res.x
        history.extend(res.history)
        log.info("fit stage %d: %d iterations, loss %.6g", stage, res.iterations, res.loss)
    params = SkeletonParams.from_vector(x, T).wrapped()
    final = prob.evaluate(params)[0]
    if final.total > initial.total:
        params, final = init.copy(), initial
    return FitResult(params, history, final, initial)


def _kabsch(a, b) -> np.ndarray:
    """Rotation R minimizing sum |R a_i - b_i|^2."""
    U, _, Vt = np.linalg.svd(b.T @ a)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def _swing(a, b) -> np.ndarray:
    """Smallest rotation turning direction ``a`` into direction ``b``."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    axis = np.cross(a, b)
    s, c = np.linalg.norm(axis), float(a @ b)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return so3_exp((np.pi * perp / np.linalg.norm(perp))[None])[0]
    return so3_exp((axis / s * np.arctan2(s, c))[None])[0]


def init_from_keypoints3d(k3d, model: Optional[SkeletonModel] = None,
                          smooth_sigma: float = 1.0) -> SkeletonParams:
    """Rest-shape initialization by closed-form inverse kinematics.

    The triangulated joints are first smoothed over time with a Gaussian of
    ``smooth_sigma`` frames (gaps filled by linear interpolation), which keeps
    keypoint noise from turning into large per-frame bone twists.

    Walking down the tree, each joint's world orientation is chosen so its
    rest bone offsets point at the triangulated children: a rigid fit when the
    joint has several valid children, the smallest swing when it has one, and
    the parent's orientation otherwise.  The root translation places the
    pelvis on its triangulated position.  Frames without a valid pelvis copy
    the nearest usable frame.
    """
    model = model or SkeletonModel()
    Y = np.asarray(k3d.points, dtype=float)
    valid = np.asarray(k3d.valid, dtype=bool) & np.all(np.isfinite(Y), axis=-1)
    T, J = Y.shape[:2]
    if smooth_sigma > 0 and T > 1:
        Y = Y.copy()
        frames = np.arange(T)
        for j in range(J):
            m = valid[:, j]
            if m.any():
                for a in range(3):
                    Y[:, j, a] = np.interp(frames, frames[m], Y[m, j, a])
        Y = gaussian_filter1d(Y, smooth_sigma, axis=0, mode="nearest")
    off = model.rest_offsets * model.bone_scales(np.zeros(N_SHAPE))[model.bone_groups][:, None]
    children = [[c for c in range(J) if model.parents[c] == j] for j in range(J)]
    pelvis = model.pelvis_local(np.zeros(N_SHAPE))
    pose = np.zeros((T, J, 3))
    transl = np.zeros((T, 3))
    ok = valid[:, 0].copy()
    for t in np.nonzero(ok)[0]:
        G = np.empty((J, 3, 3))
        for j in range(J):
            Gp = np.eye(3) if j == 0 else G[model.parents[j]]
            kids = [c for c in children[j] if valid[t, c]] if valid[t, j] else []
            if len(kids) >= 2:
                G[j] = _kabsch(off[kids], Y[t, kids] - Y[t, j])
            elif len(kids) == 1:
                c = kids[0]
                G[j] = _swing(Gp @ off[c], Y[t, c] - Y[t, j]) @ Gp
            else:
                G[j] = Gp
            pose[t, j] = so3_log((Gp.T @ G[j])[None])[0]
        transl[t] = Y[t, 0] - pelvis
    if not ok.any():
        raise NoValidJoints("no frame has a valid pelvis")
    good = np.nonzero(ok)[0]
    near = good[np.abs(np.arange(T)[:, None] - good[None]).argmin(axis=1)]
    return SkeletonParams(np.zeros(N_SHAPE), pose[near], transl[near]).wrapped()


# --------------------------------------------------------------------------- contact


def feet_lowest(model: SkeletonModel, joints) -> tuple:
    """Per frame: xy center of the two feet's lowest joints and the lowest height.

    Returns ``(center_xy (T, 2), min_z (T,))``.
    """
    lows = []
    for pair in model.foot_joints:
        fj = joints[:, list(pair)]
        k = np.argmin(fj[..., 2], axis=1)
        lows.append(fj[np.arange(len(joints)), k])
    lows = np.stack(lows, axis=1)
    return lows[..., :2].mean(axis=1), lows[..., 2].min(axis=1)


@dataclass(frozen=True)
class ContactTransform:
    yaw: float
    translation: np.ndarray

    @property
    def rotation(self) -> np.ndarray:
        return yaw_rotation(self.yaw)


def _contact_objective(x, fxy, fz, mxy, cz):
    R = yaw_rotation(x[0])[:2, :2]
    r = fxy @ R.T + x[1:3] - mxy
    rz = fz + x[3] - cz
    n = len(fz)
    f = (np.sum(r * r) + np.sum(rz * rz)) / n
    dR = yaw_rotation_derivative(x[0])[:2, :2]
    g = np.empty(4)
    g[0] = 2.0 * np.sum(r * (fxy @ dR.T)) / n
    g[1:3] = 2.0 * r.sum(axis=0) / n
    g[3] = 2.0 * rz.sum() / n
    return f, g


def solve_contact(model: SkeletonModel, joints, ann: ContactAnnotation, tol: float = 1e-14
                  ) -> ContactTransform:
    """Gradient-based solve of the xy-plane rigid transform (yaw, t) that moves
    the feet onto the markers."""
    if len(ann) == 0:
        raise NoContactFrames("no contact frames")
    if ann.frames.min() < 0 or ann.frames.max() >= len(joints):
        raise SizeMismatch("contact frame outside the sequence")
    cxy, mz = feet_lowest(model, joints[ann.frames])
    res = minimize(_contact_objective, np.zeros(4), jac=True, method="BFGS",
                   args=(cxy, mz, ann.markers[:, :2], ann.cz),
                   options={"gtol": tol, "maxiter": 500})
    x = res.x
    return ContactTransform(float(x[0]), np.array([x[1], x[2], x[3]]))


def apply_contact_transform(model: SkeletonModel, params: SkeletonParams,
                            trajs: Sequence[Trajectory], tf: ContactTransform):
    """Remap the skeleton by ``x -> R_c x + T_c`` and the cameras so every
    projection is unchanged."""
    Rc, Tc = tf.rotation, tf.translation
    pose = params.pose.copy()
    pose[:, 0] = so3_log(Rc[None] @ so3_exp(params.pose[:, 0]))
    pelvis = model.pelvis_local(params.beta)
    transl = (pelvis + params.transl) @ Rc.T + Tc - pelvis
    new = SkeletonParams(params.beta, pose, transl)
    out = []
    for tr in trajs:
        R = tr.rotations @ Rc.T
        Tn = tr.translations - R @ Tc
        out.append(Trajectory(tr.view_id, tr.timestamps, R, Tn, tr.intrinsics))
    return new, out


def contact_align(params: SkeletonParams, trajs: Sequence[Trajectory], ann: ContactAnnotation,
                  model: Optional[SkeletonModel] = None):
    """Solve the contact transform and apply it; returns ``(params, trajs, transform)``."""
    from .skeleton import forward_kinematics

    model = model or SkeletonModel()
    tf = solve_contact(model, forward_kinematics(model, params), ann)
    new, out = apply_contact_transform(model, params, trajs, tf)
    return new, out, tf
