"""A 24-joint kinematic skeleton with a bone-scale shape space.

Joint order and parent tree follow the common 24-joint body layout (pelvis,
hips, spine, knees, ...).  Coordinates are Z-up with the body facing +y and
its left side on +x.  Each joint's offset from its parent is scaled by
``exp(0.1 * beta[g])`` for the bone group ``g`` it belongs to, so every shape
vector gives positive bone lengths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SizeMismatch, SpecInvalid
from .geometry import so3_exp, so3_right_jacobian

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)

PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19,
                    20, 21])

REST_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [0.07, -0.01, -0.09], [-0.07, -0.01, -0.09],
    [0.0, -0.02, 0.11],
    [0.03, 0.0, -0.38], [-0.03, 0.0, -0.38],
    [0.0, 0.01, 0.13],
    [0.0, -0.03, -0.40], [0.0, -0.03, -0.40],
    [0.0, 0.0, 0.06],
    [0.0, 0.12, -0.06], [0.0, 0.12, -0.06],
    [0.0, 0.0, 0.21],
    [0.08, 0.0, 0.12], [-0.08, 0.0, 0.12],
    [0.0, 0.04, 0.09],
    [0.10, 0.0, 0.03], [-0.10, 0.0, 0.03],
    [0.26, 0.0, 0.0], [-0.26, 0.0, 0.0],
    [0.25, 0.0, 0.0], [-0.25, 0.0, 0.0],
    [0.08, 0.0, 0.0], [-0.08, 0.0, 0.0],
])

# pelvis/hips, thighs, shins, feet, spine, neck+head, collars, upper arms, forearms, hands
BONE_GROUPS = np.array([0, 0, 0, 4, 1, 1, 4, 2, 2, 4, 3, 3, 5, 6, 6, 5, 6, 6, 7, 7, 8, 8, 9, 9])

PELVIS_REST = np.array([0.0, 0.0, 0.93])
FOOT_JOINTS = ((7, 10), (8, 11))
N_JOINTS = 24
N_SHAPE = 10
SHAPE_RATE = 0.1


@dataclass(frozen=True)
class SkeletonModel:
    parents: np.ndarray = PARENTS
    rest_offsets: np.ndarray = REST_OFFSETS
    bone_groups: np.ndarray = BONE_GROUPS
    pelvis_rest: np.ndarray = PELVIS_REST
    foot_joints: tuple = FOOT_JOINTS

    def __post_init__(self):
        p = np.asarray(self.parents)
        if p[0] != -1 or np.any(p[1:] < 0) or np.any(p[1:] >= np.arange(1, len(p))):
            raise SpecInvalid("parents must form a tree rooted at joint 0 in topological order")
        if len(self.rest_offsets) != len(p) or len(self.bone_groups) != len(p):
            raise SizeMismatch("per-joint arrays must match the joint count")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def bone_scales(self, beta) -> np.ndarray:
        return np.exp(SHAPE_RATE * np.asarray(beta, dtype=float))

    def pelvis_local(self, beta=None) -> np.ndarray:
        """Pelvis position for zero translation; the root rotation pivots here."""
        return self.pelvis_rest.copy()

    def rest_joints(self, beta=None) -> np.ndarray:
        beta = np.zeros(N_SHAPE) if beta is None else beta
        return forward_kinematics(self, SkeletonParams(beta, np.zeros((1, self.n_joints, 3)),
                                                       np.zeros((1, 3))))[0]


@dataclass
class SkeletonParams:
    """Shape, per-frame axis-angle pose (global first, then 23 body joints) and
    root translation."""

    beta: np.ndarray
    pose: np.ndarray
    transl: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).reshape(N_SHAPE).copy()
        self.pose = np.asarray(self.pose, dtype=float).reshape(-1, N_JOINTS, 3).copy()
        self.transl = np.asarray(self.transl, dtype=float).reshape(-1, 3).copy()
        if len(self.pose) != len(self.transl):
            raise SizeMismatch("pose and translation frame counts differ")
        if not (np.all(np.isfinite(self.pose)) and np.all(np.isfinite(self.transl))
                and np.all(np.isfinite(self.beta))):
            raise SpecInvalid("skeleton parameters must be finite")

    @property
    def n_frames(self) -> int:
        return len(self.pose)

    @property
    def global_orient(self) -> np.ndarray:
        return self.pose[:, 0]

    @property
    def body_pose(self) -> np.ndarray:
        return self.pose[:, 1:]

    def copy(self) -> "SkeletonParams":
        return SkeletonParams(self.beta, self.pose, self.transl)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.pose.reshape(-1), self.transl.reshape(-1)])

    @classmethod
    def from_vector(cls, x, n_frames: int) -> "SkeletonParams":
        x = np.asarray(x, dtype=float)
        nb, npz = N_SHAPE, n_frames * N_JOINTS * 3
        return cls(x[:nb], x[nb:nb + npz], x[nb + npz:])

    def slice(self, start, stop) -> "SkeletonParams":
        return SkeletonParams(self.beta, self.pose[start:stop], self.transl[start:stop])

    def wrapped(self) -> "SkeletonParams":
        """Fold axis-angle vectors so their magnitude stays below pi."""
        a = np.linalg.norm(self.pose, axis=-1, keepdims=True)
        k = np.floor((a + np.pi) / (2 * np.pi))
        safe = np.where(a > 0, a, 1.0)
        pose = np.where(a > np.pi, self.pose * (a - 2 * np.pi * k) / safe, self.pose)
        return SkeletonParams(self.beta, pose, self.transl)


@dataclass
class FKState:
    joints: np.ndarray  # (T, J, 3)
    G: np.ndarray  # (T, J, 3, 3) world rotation of each joint frame
    offsets: np.ndarray  # (J, 3) scaled rest offsets
    scales: np.ndarray


def fk_state(model: SkeletonModel, params: SkeletonParams) -> FKState:
    T, J = params.n_frames, model.n_joints
    scales = model.bone_scales(params.beta)
    off = model.rest_offsets * scales[model.bone_groups][:, None]
    Rl = so3_exp(params.pose)
    G = np.empty((T, J, 3, 3))
    P = np.empty((T, J, 3))
    G[:, 0] = Rl[:, 0]
    P[:, 0] = model.pelvis_local(params.beta) + params.transl
    for j in range(1, J):
        par = model.parents[j]
        G[:, j] = G[:, par] @ Rl[:, j]
        P[:, j] = P[:, par] + G[:, par] @ off[j]
    return FKState(P, G, off, scales)


def forward_kinematics(model: SkeletonModel, params: SkeletonParams) -> np.ndarray:
    """World joint positions, shape ``(frames, joints, 3)``."""
    return fk_state(model, params).joints


def fk_backward(model: SkeletonModel, params: SkeletonParams, state: FKState, grad_joints):
    """Pull a joint-position gradient back to ``(d_beta, d_pose, d_transl)``."""
    g = np.asarray(grad_joints, dtype=float)
    P, G = state.joints, state.G
    J = model.n_joints
    A = g.copy()
    B = np.cross(P, g)
    for j in range(J - 1, 0, -1):
        par = model.parents[j]
        A[:, par] += A[:, j]
        B[:, par] += B[:, j]
    torque = B - np.cross(P, A)  # sum over subtree of (p_i - p_k) x g_i
    local = np.einsum("tjba,tjb->tja", G, torque)
    Jr = so3_right_jacobian(params.pose)
    d_pose = np.einsum("tjba,tjb->tja", Jr, local)
    d_transl = A[:, 0]
    d_scale = np.zeros(N_SHAPE)
    for j in range(1, J):
        par = model.parents[j]
        arm = G[:, par] @ model.rest_offsets[j]
        d_scale[model.bone_groups[j]] += np.sum(arm * A[:, j])
    d_beta = d_scale * SHAPE_RATE * state.scales
    return d_beta, d_pose, d_transl
