"""Articulated skinned body: forward kinematics, linear blend skinning,
skinning-weight transfer and object reanimation.

A joint's local transform is a rotation about its rest-pose position; world
skinning transforms are composed from the root down the parent tree, so the
identity pose leaves every vertex in place.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .mesh import PathLike, SpatialIndex, TriMesh

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-4
TIE_TOLERANCE = 1e-6


class PartName(str, Enum):
    HEAD = "head"
    TORSO = "torso"
    BACK = "back"
    LEFT_UPPER_ARM = "left_upper_arm"
    RIGHT_UPPER_ARM = "right_upper_arm"
    LEFT_FOREARM = "left_forearm"
    RIGHT_FOREARM = "right_forearm"
    LEFT_HAND = "left_hand"
    RIGHT_HAND = "right_hand"
    LEFT_UPPER_LEG = "left_upper_leg"
    RIGHT_UPPER_LEG = "right_upper_leg"
    LEFT_LOWER_LEG = "left_lower_leg"
    RIGHT_LOWER_LEG = "right_lower_leg"
    LEFT_FOOT = "left_foot"
    RIGHT_FOOT = "right_foot"

    def __str__(self) -> str:
        return self.value


ALL_PARTS: Tuple[PartName, ...] = tuple(PartName)


class BodyFormatError(ValueError):
    """Body template or pose file does not match its schema."""


class WeightNormalizationError(BodyFormatError):
    """A skinning-weight row does not sum to one."""


class JointCountError(ValueError):
    """Pose and body disagree on the number of joints."""


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def axis_angle_to_matrix(rotvec) -> np.ndarray:
    """Rodrigues' formula; accepts ``(3,)`` or ``(N, 3)``."""
    r = np.asarray(rotvec, dtype=np.float64)
    single = r.ndim == 1
    r = r.reshape(-1, 3)
    theta = np.linalg.norm(r, axis=1)
    out = np.tile(np.eye(3), (len(r), 1, 1))
    nz = theta > 0
    if nz.any():
        k = r[nz] / theta[nz, None]
        K = np.zeros((len(k), 3, 3))
        K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
        K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
        K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
        s = np.sin(theta[nz])[:, None, None]
        c = (1 - np.cos(theta[nz]))[:, None, None]
        out[nz] = np.eye(3) + s * K + c * (K @ K)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Per-joint axis-angle rotations (radians) plus a root translation (meters)."""

    rotations: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotations, dtype=np.float64).reshape(-1, 3)
        tr = np.array(self.root_translation, dtype=np.float64).reshape(3)
        rot.setflags(write=False)
        tr.setflags(write=False)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "root_translation", tr)

    @classmethod
    def identity(cls, n_joints: int) -> "Pose":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    @property
    def n_joints(self) -> int:
        return len(self.rotations)

    def is_identity(self) -> bool:
        return not self.rotations.any() and not self.root_translation.any()

    def to_dict(self) -> dict:
        return {"root_translation": self.root_translation.tolist(), "rotations": self.rotations.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        try:
            return cls(d["rotations"], d.get("root_translation", [0.0, 0.0, 0.0]))
        except (KeyError, ValueError, TypeError) as exc:
            raise BodyFormatError(f"bad pose record: {exc}") from exc


def _topological_order(parents: np.ndarray) -> List[int]:
    n = len(parents)
    if n == 0 or parents[0] != -1:
        raise BodyFormatError("joint 0 must be the root (parent -1)")
    children = [[] for _ in range(n)]
    for j in range(1, n):
        p = int(parents[j])
        if not 0 <= p < n or p == j:
            raise BodyFormatError(f"joint {j} has invalid parent {p}")
        children[p].append(j)
    order, stack = [], [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        raise BodyFormatError("parent graph is not a tree rooted at joint 0")
    return order


@dataclass(frozen=True, eq=False)
class SkinnedBody:
    rest_vertices: np.ndarray
    faces: np.ndarray
    joints: np.ndarray
    parents: np.ndarray
    weights: np.ndarray  # dense (n_vertices, n_joints)
    part_labels: Tuple[PartName, ...]
    shape_beta: Tuple[float, ...] = ()
    pose_theta: Optional[Pose] = None

    def __post_init__(self):
        verts = np.array(self.rest_vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        joints = np.array(self.joints, dtype=np.float64).reshape(-1, 3)
        parents = np.array(self.parents, dtype=np.int64).reshape(-1)
        w = np.array(self.weights, dtype=np.float64)
        if len(parents) != len(joints):
            raise BodyFormatError(f"{len(parents)} parents for {len(joints)} joints")
        order = _topological_order(parents)
        if w.shape != (len(verts), len(joints)):
            raise BodyFormatError(f"weights shape {w.shape} != ({len(verts)}, {len(joints)})")
        if np.any(w < 0):
            raise BodyFormatError("skinning weights must be nonnegative")
        if len(w) and np.max(np.abs(w.sum(axis=1) - 1)) > 1e-6:
            raise WeightNormalizationError("weight rows must sum to 1 within 1e-6")
        try:
            parts = tuple(PartName(p) for p in self.part_labels)
        except ValueError as exc:
            raise BodyFormatError(str(exc)) from exc
        if len(parts) != len(verts):
            raise BodyFormatError(f"{len(parts)} part labels for {len(verts)} vertices")
        TriMesh(verts, faces)  # validates face indices
        pose = self.pose_theta if self.pose_theta is not None else Pose.identity(len(joints))
        if pose.n_joints != len(joints):
            raise JointCountError(f"pose has {pose.n_joints} joints, body has {len(joints)}")
        for name, arr in (("rest_vertices", verts), ("faces", faces), ("joints", joints),
                          ("parents", parents), ("weights", w)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "part_labels", parts)
        object.__setattr__(self, "shape_beta", tuple(float(b) for b in self.shape_beta))
        object.__setattr__(self, "pose_theta", pose)
        object.__setattr__(self, "_order", tuple(order))

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_vertices(self) -> int:
        return len(self.rest_vertices)

    def rest_mesh(self) -> TriMesh:
        return TriMesh(self.rest_vertices, self.faces)

    def posed_mesh(self) -> TriMesh:
        """Surface at the body's own pose (the pose it was fitted with)."""
        return pose_body(self, self.pose_theta)

    def with_pose(self, pose: Pose) -> "SkinnedBody":
        return SkinnedBody(self.rest_vertices, self.faces, self.joints, self.parents, self.weights,
                           self.part_labels, self.shape_beta, pose)

    def part_label_strings(self) -> List[str]:
        return [p.value for p in self.part_labels]


# ---------------------------------------------------------------------------
# Kinematics and skinning
# ---------------------------------------------------------------------------

def joint_transforms(body: SkinnedBody, pose: Pose) -> np.ndarray:
    """Per-joint 4x4 skinning transforms (rest space -> posed space)."""
    if pose.n_joints != body.n_joints:
        raise JointCountError(f"pose has {pose.n_joints} joints, body has {body.n_joints}")
    R = axis_angle_to_matrix(pose.rotations)
    local = np.tile(np.eye(4), (body.n_joints, 1, 1))
    local[:, :3, :3] = R
    local[:, :3, 3] = body.joints - np.einsum("jab,jb->ja", R, body.joints)
    world = np.empty_like(local)
    root = np.eye(4)
    root[:3, 3] = pose.root_translation
    for j in body._order:
        p = body.parents[j]
        world[j] = (root if p < 0 else world[p]) @ local[j]
    return world


def posed_joints(body: SkinnedBody, pose: Pose) -> np.ndarray:
    A = joint_transforms(body, pose)
    return np.einsum("jab,jb->ja", A[:, :3, :3], body.joints) + A[:, :3, 3]


def skin(points: np.ndarray, weights: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    """Linear blend skinning of arbitrary points with dense weights."""
    blended = np.einsum("vj,jab->vab", weights, transforms[:, :3, :])
    return np.einsum("vab,vb->va", blended[:, :, :3], points) + blended[:, :, 3]


def pose_body(body: SkinnedBody, theta: Pose) -> TriMesh:
    if theta.n_joints != body.n_joints:
        raise JointCountError(f"pose has {theta.n_joints} joints, body has {body.n_joints}")
    if theta.is_identity():
        return body.rest_mesh()
    return TriMesh(skin(body.rest_vertices, body.weights, joint_transforms(body, theta)), body.faces)


def transfer_weights(scan: TriMesh, body: SkinnedBody) -> Tuple[np.ndarray, List[PartName]]:
    """Copy weights and part labels from each scan vertex's nearest body vertex.

    The body surface is taken at the body's own pose, so the scan must already
    be expressed in body coordinates.
    """
    if scan.is_empty() or body.n_vertices == 0:
        raise ValueError("weight transfer needs a nonempty scan and body")
    nearest, _ = SpatialIndex(body.posed_mesh().vertices).query(scan.vertices)
    return body.weights[nearest].copy(), [body.part_labels[i] for i in nearest]


def attach_object_joint(obj: TriMesh, body: SkinnedBody) -> int:
    """Joint closest to the object; joints within 1e-6 m of the best tie to the lowest index."""
    if obj.is_empty():
        raise ValueError("cannot attach an empty object")
    _, dist = SpatialIndex(obj.vertices).query(posed_joints(body, body.pose_theta))
    return int(np.flatnonzero(dist <= dist.min() + TIE_TOLERANCE)[0])


def _affine_inverse(m: np.ndarray) -> np.ndarray:
    """Invert stacked 3x4 (or 4x4) affine maps; returns ``(..., 3, 4)``."""
    lin_inv = np.linalg.inv(m[..., :3, :3])
    t = -np.einsum("...ab,...b->...a", lin_inv, m[..., :3, 3])
    return np.concatenate([lin_inv, t[..., None]], axis=-1)


def animate_scene(human: TriMesh, human_weights: np.ndarray, obj: TriMesh, body: SkinnedBody,
                  pose_sequence: Sequence[Pose], align) -> List[Tuple[TriMesh, TriMesh]]:
    """Repose a segmented human/object pair with a pose sequence.

    ``align`` maps body coordinates to mesh coordinates.  Meshes are pulled
    into body space with its inverse, the human is re-skinned from the body's
    fitted pose to each frame's pose (shape untouched), the object follows its
    attached joint rigidly, and results are mapped back to mesh space.
    """
    weights = np.asarray(human_weights, dtype=np.float64)
    if weights.shape != (human.n_vertices, body.n_joints):
        raise JointCountError(f"weights shape {weights.shape} != ({human.n_vertices}, {body.n_joints})")
    inv = align.inverse()
    h_body = inv.apply_points(human.vertices)
    o_body = inv.apply_points(obj.vertices)
    A0 = joint_transforms(body, body.pose_theta)
    blended0 = np.einsum("vj,jab->vab", weights, A0[:, :3, :])
    unposed = np.einsum("vab,vb->va", _affine_inverse(blended0)[:, :, :3], h_body) \
        + _affine_inverse(blended0)[:, :, 3]
    joint = attach_object_joint(TriMesh(o_body, obj.faces), body) if not obj.is_empty() else 0
    A0_obj_inv = _affine_inverse(A0[joint])

    frames = []
    for pose in pose_sequence:
        if pose.n_joints != body.n_joints:
            raise JointCountError(f"pose has {pose.n_joints} joints, body has {body.n_joints}")
        A1 = joint_transforms(body, pose)
        h_new = skin(unposed, weights, A1)
        rel = A1[joint][:3, :3] @ A0_obj_inv[:, :3]
        rel_t = A1[joint][:3, :3] @ A0_obj_inv[:, 3] + A1[joint][:3, 3]
        o_new = o_body @ rel.T + rel_t
        frames.append((
            TriMesh(align.apply_points(h_new), human.faces, human.vertex_labels),
            TriMesh(align.apply_points(o_new), obj.faces, obj.vertex_labels),
        ))
    return frames


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def body_to_dict(body: SkinnedBody) -> dict:
    weights = []
    for row in body.weights:
        nz = np.flatnonzero(row)
        weights.append([[int(j), float(row[j])] for j in nz])
    d = {
        "vertices": body.rest_vertices.tolist(),
        "faces": body.faces.tolist(),
        "joints": body.joints.tolist(),
        "parents": body.parents.tolist(),
        "weights": weights,
        "part_labels": body.part_label_strings(),
    }
    if body.shape_beta:
        d["shape_beta"] = list(body.shape_beta)
    if not body.pose_theta.is_identity():
        d["pose"] = body.pose_theta.to_dict()
    return d


def body_from_dict(d: dict) -> SkinnedBody:
    for key in ("vertices", "faces", "joints", "parents", "weights", "part_labels"):
        if key not in d:
            raise BodyFormatError(f"body template lacks {key!r}")
    try:
        verts = np.asarray(d["vertices"], dtype=np.float64).reshape(-1, 3)
        joints = np.asarray(d["joints"], dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(d["faces"], dtype=np.int64).reshape(-1, 3)
    except (ValueError, TypeError) as exc:
        raise BodyFormatError(f"bad array in body template: {exc}") from exc
    rows = d["weights"]
    if len(rows) != len(verts):
        raise BodyFormatError(f"{len(rows)} weight rows for {len(verts)} vertices")
    w = np.zeros((len(verts), len(joints)))
    for v, row in enumerate(rows):
        for entry in row:
            try:
                j, val = int(entry[0]), float(entry[1])
            except (TypeError, ValueError, IndexError):
                raise BodyFormatError(f"bad weight entry {entry!r} for vertex {v}") from None
            if not 0 <= j < len(joints):
                raise BodyFormatError(f"weight references joint {j} of {len(joints)}")
            w[v, j] += val
    sums = w.sum(axis=1)
    bad = np.abs(sums - 1) > WEIGHT_TOLERANCE
    if bad.any():
        v = int(np.argmax(bad))
        raise WeightNormalizationError(f"weights of vertex {v} sum to {sums[v]:.6g}")
    if len(w):
        w = w / sums[:, None]
    pose = Pose.from_dict(d["pose"]) if "pose" in d else None
    return SkinnedBody(verts, faces, joints, d["parents"], w, d["part_labels"],
                       tuple(d.get("shape_beta", ())), pose)


def load_body(path: PathLike) -> SkinnedBody:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BodyFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise BodyFormatError(f"{path}: top level must be an object")
    return body_from_dict(d)


def save_body(body: SkinnedBody, path: PathLike) -> None:
    Path(path).write_text(json.dumps(body_to_dict(body)) + "\n", encoding="utf-8")


def bundled_body_path() -> Path:
    return Path(__file__).parent / "data" / "test_body.json"


def load_pose_sequence(path: PathLike) -> List[Pose]:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        frames = d["frames"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise BodyFormatError(f"{path}: not a pose sequence ({exc})") from exc
    return [Pose.from_dict(f) for f in frames]


def save_pose_sequence(poses: Sequence[Pose], path: PathLike) -> None:
    Path(path).write_text(json.dumps({"frames": [p.to_dict() for p in poses]}) + "\n", encoding="utf-8")
