"""File formats used by the command-line pipeline.

* JSON documents (trajectories, keypoints, tracks, landmarks, offsets,
  skeleton parameters, contact annotations, manifests, reports).  Floats are
  written with Python's shortest round-trip representation, so
  write -> read -> write is byte-identical.  Invalid values are ``null``.
* Trajectory rotations are written as row-major 3x3 matrices under ``"R"``.
  Readers also accept unit quaternions under ``"q_xyzw"`` (x, y, z, w order)
  and convert them on load.
* Point clouds and meshes: ASCII PLY with ``%.17g`` coordinates.
* Depth images: 16-bit PNG in millimeters (0 = invalid) or raw little-endian
  float32 in meters, row-major.

Schemas are listed in the README.
"""
from __future__ import annotations

import json
import math
import os
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import FormatError
from .fusion import Mesh
from .geometry import Intrinsics, PointCloud, Pose, SimilarityTransform, Trajectory, quat_xyzw_to_matrix
from .losses import LandmarkObservations, OffsetParams, TrackedCorrespondences
from .motion_fit import ContactAnnotation
from .skeleton import SkeletonParams
from .triangulation import Keypoints2D, Keypoints3D

FORMAT_VERSION = 1


# --------------------------------------------------------------------------- json


def _clean(x):
    """Convert numpy containers to JSON-ready Python values (NaN/inf -> None)."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        f = float(x)
        return f if math.isfinite(f) else None
    return x


def _scalar_list(v) -> bool:
    return isinstance(v, list) and all(not isinstance(e, (list, dict)) for e in v)


def _dump(v, indent: int) -> str:
    pad = "  " * indent
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f'{pad}  {json.dumps(k)}: {_dump(val, indent + 1)}' for k, val in v.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(v, list):
        if _scalar_list(v):
            return "[" + ", ".join(json.dumps(e, allow_nan=False) for e in v) + "]"
        # nested arrays whose rows are short scalar lists stay one row per line
        items = [pad + "  " + _dump(e, indent + 1) for e in v]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    return json.dumps(v, allow_nan=False)


def dumps(obj) -> str:
    """Deterministic, human-readable JSON text ending in a newline."""
    return _dump(_clean(obj), 0) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(obj))


def read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: {e}") from e


def _req(d: dict, key: str, path=""):
    if not isinstance(d, dict) or key not in d:
        raise FormatError(f"{path}: missing field {key!r}")
    return d[key]


def _nan(v):
    if isinstance(v, list):
        return [_nan(e) for e in v]
    return np.nan if v is None else v


def _array(v, dtype=float, path="", key="") -> np.ndarray:
    try:
        return np.asarray(_nan(v), dtype=dtype)
    except (TypeError, ValueError) as e:
        raise FormatError(f"{path}: field {key!r} is not a numeric array") from e


def _kind(d: dict, kind: str, path) -> None:
    if d.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} document, found {d.get('kind')!r}")


# --------------------------------------------------------------------------- trajectories


def trajectory_to_dict(tr: Trajectory) -> dict:
    return {
        "kind": "trajectory", "version": FORMAT_VERSION, "view_id": tr.view_id,
        "convention": "x_cam = R x_world + T",
        "intrinsics": tr.intrinsics.to_dict(),
        "timestamps": tr.timestamps,
        "R": tr.rotations.reshape(-1, 9),
        "T": tr.translations,
    }


def trajectory_from_dict(d: dict, path="") -> Trajectory:
    _kind(d, "trajectory", path)
    try:
        k = Intrinsics.from_dict(_req(d, "intrinsics", path))
        ts = _array(_req(d, "timestamps", path), path=path, key="timestamps")
        if "R" in d:
            R = _array(d["R"], path=path, key="R").reshape(-1, 3, 3)
        elif "q_xyzw" in d:
            q = _array(d["q_xyzw"], path=path, key="q_xyzw").reshape(-1, 4)
            R = np.stack([quat_xyzw_to_matrix(qi) for qi in q])
        else:
            raise FormatError(f"{path}: trajectory needs 'R' or 'q_xyzw'")
        T = _array(_req(d, "T", path), path=path, key="T").reshape(-1, 3)
        return Trajectory(str(_req(d, "view_id", path)), ts, R, T, k)
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from e


def write_trajectory(path, tr: Trajectory) -> None:
    write_json(path, trajectory_to_dict(tr))


def read_trajectory(path) -> Trajectory:
    return trajectory_from_dict(read_json(path), path)


# --------------------------------------------------------------------------- keypoints


def write_keypoints2d(path, kp: Keypoints2D) -> None:
    write_json(path, {"kind": "keypoints2d", "version": FORMAT_VERSION, "view_id": kp.view_id,
                      "units": "pixels", "pixels": kp.pixels, "conf": kp.conf})


def read_keypoints2d(path) -> Keypoints2D:
    d = read_json(path)
    _kind(d, "keypoints2d", path)
    px = _array(_req(d, "pixels", path), path=path, key="pixels")
    c = _array(_req(d, "conf", path), path=path, key="conf")
    if px.ndim != 3:
        raise FormatError(f"{path}: pixels must be frames x joints x 2")
    return Keypoints2D(str(_req(d, "view_id", path)), px, c)


def write_keypoints3d(path, k: Keypoints3D) -> None:
    write_json(path, {"kind": "keypoints3d", "version": FORMAT_VERSION, "units": "meters",
                      "points": k.points, "valid": k.valid.astype(int),
                      "residual_px": k.residual, "reason": k.reason})


def read_keypoints3d(path) -> Keypoints3D:
    d = read_json(path)
    _kind(d, "keypoints3d", path)
    pts = _array(_req(d, "points", path), path=path, key="points")
    if pts.ndim != 3:
        raise FormatError(f"{path}: points must be frames x joints x 3")
    valid = _array(_req(d, "valid", path), int, path, "valid").astype(bool)
    res = _array(_req(d, "residual_px", path), path=path, key="residual_px")
    reason = _array(_req(d, "reason", path), int, path, "reason")
    return Keypoints3D(pts, valid, res, reason)


def write_joints(path, joints) -> None:
    write_json(path, {"kind": "joints", "version": FORMAT_VERSION, "units": "meters",
                      "joints": np.asarray(joints)})


def read_joints(path) -> np.ndarray:
    d = read_json(path)
    _kind(d, "joints", path)
    J = _array(_req(d, "joints", path), path=path, key="joints")
    if J.ndim != 3 or J.shape[2] != 3:
        raise FormatError(f"{path}: joints must be frames x joints x 3")
    return J


# --------------------------------------------------------------------------- tracks, landmarks


def write_tracks(path, t: TrackedCorrespondences) -> None:
    write_json(path, {"kind": "tracks", "version": FORMAT_VERSION, "units": "pixels, meters",
                      "frames": t.frames, "pixels0": t.pixels0, "depth0": t.depth0, "conf0": t.conf0,
                      "pixels1": t.pixels1, "depth1": t.depth1, "conf1": t.conf1})


def read_tracks(path) -> TrackedCorrespondences:
    d = read_json(path)
    _kind(d, "tracks", path)
    cols = {}
    for k in ("frames", "pixels0", "depth0", "conf0", "pixels1", "depth1", "conf1"):
        cols[k] = _array(_req(d, k, path), int if k == "frames" else float, path, k)
    return TrackedCorrespondences(**cols)


def write_landmarks(path, points, observations: Sequence[LandmarkObservations],
                    view_ids: Sequence[str]) -> None:
    write_json(path, {
        "kind": "landmarks", "version": FORMAT_VERSION, "units": "meters, pixels",
        "points": np.asarray(points).reshape(-1, 3),
        "observations": {v: {"frames": o.frames, "ids": o.landmark_ids, "pixels": o.pixels}
                         for v, o in zip(view_ids, observations)},
    })


def read_landmarks(path):
    """Returns ``(points (L, 3), {view_id: LandmarkObservations})``."""
    d = read_json(path)
    _kind(d, "landmarks", path)
    pts = _array(_req(d, "points", path), path=path, key="points").reshape(-1, 3)
    obs = {}
    for v, o in _req(d, "observations", path).items():
        obs[v] = LandmarkObservations(_array(_req(o, "frames", path), int, path, "frames"),
                                      _array(_req(o, "ids", path), int, path, "ids"),
                                      _array(_req(o, "pixels", path), path=path, key="pixels"))
    return pts, obs


# --------------------------------------------------------------------------- offsets, skeleton, contact


def write_offsets(path, offsets: OffsetParams, view_ids: Sequence[str], extra: Optional[dict] = None
                  ) -> None:
    d = {"kind": "offsets", "version": FORMAT_VERSION,
         "note": "per view: world = Rz(yaw) native + translation (camera centers)",
         "views": {v: {"yaw": offsets.yaw[i], "translation": offsets.translation[i]}
                   for i, v in enumerate(view_ids)}}
    if extra:
        d.update(extra)
    write_json(path, d)


def read_offsets(path):
    """Returns ``(OffsetParams, view_ids)``."""
    d = read_json(path)
    _kind(d, "offsets", path)
    views = _req(d, "views", path)
    ids = list(views)
    try:
        yaw = [float(views[v]["yaw"]) for v in ids]
        t = [[float(x) for x in views[v]["translation"]] for v in ids]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed offsets ({e})") from e
    return OffsetParams(yaw, t), ids


def write_transforms(path, transforms: Sequence[SimilarityTransform]) -> None:
    write_json(path, {"kind": "transforms", "version": FORMAT_VERSION,
                      "transforms": [{"scale": t.scale, "R": t.rotation.reshape(-1),
                                      "T": t.translation} for t in transforms]})


def read_transforms(path) -> List[SimilarityTransform]:
    d = read_json(path)
    _kind(d, "transforms", path)
    out = []
    for e in _req(d, "transforms", path):
        out.append(SimilarityTransform(float(e["scale"]), np.reshape(e["R"], (3, 3)),
                                       np.asarray(e["T"], dtype=float)))
    return out


def write_params(path, p: SkeletonParams) -> None:
    write_json(path, {"kind": "skeleton_params", "version": FORMAT_VERSION,
                      "note": "pose is axis-angle, global orientation first",
                      "beta": p.beta, "pose": p.pose, "transl": p.transl})


def read_params(path) -> SkeletonParams:
    d = read_json(path)
    _kind(d, "skeleton_params", path)
    return SkeletonParams(_array(_req(d, "beta", path), path=path, key="beta"),
                          _array(_req(d, "pose", path), path=path, key="pose"),
                          _array(_req(d, "transl", path), path=path, key="transl"))


def write_contact(path, c: ContactAnnotation) -> None:
    write_json(path, {"kind": "contact", "version": FORMAT_VERSION, "units": "meters",
                      "frames": c.frames, "markers": c.markers, "cz": c.cz})


def read_contact(path) -> ContactAnnotation:
    d = read_json(path)
    _kind(d, "contact", path)
    return ContactAnnotation(_array(_req(d, "frames", path), int, path, "frames"),
                             _array(_req(d, "markers", path), path=path, key="markers"),
                             _array(_req(d, "cz", path), path=path, key="cz"))


def write_registrations(path, regs: Sequence) -> None:
    """``regs`` is a list of ``(frame, Pose)`` pairs in the scene frame."""
    write_json(path, {"kind": "registrations", "version": FORMAT_VERSION,
                      "frames": [int(f) for f, _ in regs],
                      "R": [p.rotation.reshape(-1) for _, p in regs],
                      "T": [p.translation for _, p in regs]})


def read_registrations(path) -> list:
    d = read_json(path)
    _kind(d, "registrations", path)
    fr = _req(d, "frames", path)
    R = _req(d, "R", path)
    T = _req(d, "T", path)
    if not (len(fr) == len(R) == len(T)):
        raise FormatError(f"{path}: registration columns differ in length")
    return [(int(f), Pose(np.reshape(r, (3, 3)), np.asarray(t, dtype=float)))
            for f, r, t in zip(fr, R, T)]


# --------------------------------------------------------------------------- ply


def write_ply(path, points, faces=None, confidence=None) -> None:
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    F = None if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(P)}",
             "property double x", "property double y", "property double z"]
    if confidence is not None:
        lines.append("property double confidence")
    if F is not None:
        lines += [f"element face {len(F)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    if confidence is None:
        lines += ["%.17g %.17g %.17g" % tuple(p) for p in P]
    else:
        c = np.asarray(confidence, dtype=float).reshape(-1)
        lines += ["%.17g %.17g %.17g %.17g" % (p[0], p[1], p[2], ci) for p, ci in zip(P, c)]
    if F is not None:
        lines += ["3 %d %d %d" % tuple(f) for f in F]
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_ply(path):
    """Returns ``(points, faces or None, confidence or None)``."""
    try:
        with open(path, "r", encoding="ascii") as f:
            text = f.read().split("\n")
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: {e}") from e
    if not text or text[0].strip() != "ply" or "format ascii 1.0" not in text[1]:
        raise FormatError(f"{path}: not an ASCII PLY file")
    nv = nf = 0
    props = []
    i = 2
    current = None
    while i < len(text) and text[i].strip() != "end_header":
        tok = text[i].split()
        if tok[:2] == ["element", "vertex"]:
            nv, current = int(tok[2]), "vertex"
        elif tok[:2] == ["element", "face"]:
            nf, current = int(tok[2]), "face"
        elif tok and tok[0] == "property" and current == "vertex":
            props.append(tok[-1])
        i += 1
    if i >= len(text):
        raise FormatError(f"{path}: missing end_header")
    if props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: vertices must start with x y z")
    body = text[i + 1:]
    try:
        V = np.array([[float(x) for x in body[k].split()] for k in range(nv)]).reshape(nv, len(props))
        F = None
        if nf:
            rows = [body[nv + k].split() for k in range(nf)]
            if any(r[0] != "3" for r in rows):
                raise FormatError(f"{path}: only triangle faces are supported")
            F = np.array([[int(x) for x in r[1:4]] for r in rows], dtype=np.int64)
    except (IndexError, ValueError) as e:
        raise FormatError(f"{path}: malformed PLY body ({e})") from e
    conf = V[:, props.index("confidence")] if "confidence" in props else None
    return V[:, :3], F, conf


def write_cloud(path, cloud: PointCloud) -> None:
    write_ply(path, cloud.points, confidence=cloud.confidence)


def read_cloud(path) -> PointCloud:
    P, _, c = read_ply(path)
    return PointCloud(P, c)


def write_mesh(path, mesh: Mesh) -> None:
    write_ply(path, mesh.vertices, mesh.faces)


def read_mesh(path) -> Mesh:
    P, F, _ = read_ply(path)
    return Mesh(P, F if F is not None else np.zeros((0, 3), dtype=np.int64))


# --------------------------------------------------------------------------- depth


def write_depth_png(path, depth_m) -> None:
    """Meters -> 16-bit millimeter PNG; values round to the nearest mm."""
    d = np.asarray(depth_m, dtype=float)
    mm = np.rint(np.where(np.isfinite(d) & (d > 0), d, 0.0) * 1000.0)
    if mm.max(initial=0) > 65535:
        raise FormatError("depth exceeds the 16-bit millimeter range")
    Image.fromarray(mm.astype(np.uint16)).save(path, format="PNG")


def read_depth_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            a = np.array(im)
    except OSError as e:
        raise FormatError(f"{path}: {e}") from e
    if a.ndim != 2:
        raise FormatError(f"{path}: depth PNG must be single-channel")
    return a.astype(float) / 1000.0


def write_depth_raw(path, depth_m) -> None:
    np.asarray(depth_m, dtype="<f4").tofile(path)


def read_depth_raw(path, width: int, height: int) -> np.ndarray:
    a = np.fromfile(path, dtype="<f4")
    if a.size != width * height:
        raise FormatError(f"{path}: expected {width * height} float32 values, found {a.size}")
    return a.reshape(height, width).astype(float)


def write_depth_frames(directory, frames, view_id: str = "scan") -> None:
    """Depth PNGs plus a ``frames.json`` index holding each frame's pose."""
    os.makedirs(directory, exist_ok=True)
    index = []
    for i, f in enumerate(frames):
        name = f"{view_id}_{i:04d}.png"
        write_depth_png(os.path.join(directory, name), f.depth)
        index.append({"file": name, "R": f.pose.rotation.reshape(-1), "T": f.pose.translation})
    k = frames[0].intrinsics if frames else None
    write_json(os.path.join(directory, "frames.json"),
               {"kind": "depth_frames", "version": FORMAT_VERSION, "units": "millimeters",
                "scene_class": frames[0].scene_class if frames else "indoor",
                "intrinsics": k.to_dict() if k else None, "frames": index})


def read_depth_frames(directory):
    from .fusion import DepthFrame

    path = os.path.join(directory, "frames.json")
    d = read_json(path)
    _kind(d, "depth_frames", path)
    k = Intrinsics.from_dict(_req(d, "intrinsics", path))
    sc = d.get("scene_class", "indoor")
    out = []
    for e in _req(d, "frames", path):
        pose = Pose(np.reshape(e["R"], (3, 3)), np.asarray(e["T"], dtype=float))
        out.append(DepthFrame(read_depth_png(os.path.join(directory, e["file"])), pose, k, sc))
    return out
