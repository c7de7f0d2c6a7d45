"""Procedural test assets: a small skinned body, spheres, boxes and
two-component scenes with ground-truth labels.

``python -m hoikit.fixtures OUT_DIR`` writes a complete demo input set
(combined mesh, trajectory, masks, body template, poses) for the CLI.
"""
from __future__ import annotations

import argparse
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull

from .body import Pose, SkinnedBody, save_body, save_pose_sequence
from .mesh import TriMesh, save_mesh
from .registration import Similarity7DoF

# ---------------------------------------------------------------------------
# Primitive meshes
# ---------------------------------------------------------------------------


def _orient_outward(vertices: np.ndarray, faces: np.ndarray, center: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    outward = np.einsum("fi,fi->f", normal, tri.mean(axis=1) - center) > 0
    faces = faces.copy()
    faces[~outward] = faces[~outward][:, [0, 2, 1]]
    return faces


def fibonacci_sphere_points(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], axis=1)


def make_sphere(center=(0.0, 0.0, 0.0), radius: float = 1.0, n: int = 300) -> TriMesh:
    """Closed, outward-oriented sphere with ``n`` near-uniform vertices."""
    c = np.asarray(center, dtype=np.float64)
    unit = fibonacci_sphere_points(n)
    faces = _orient_outward(unit, ConvexHull(unit).simplices.astype(np.int64), np.zeros(3))
    return TriMesh(c + radius * unit, faces)


def make_box(center=(0.0, 0.0, 0.0), size: float = 1.0, n: int = 10) -> TriMesh:
    """Closed axis-aligned cube with each face split into an ``n x n`` grid."""
    c = np.asarray(center, dtype=np.float64)
    g = np.linspace(-0.5, 0.5, n + 1)
    verts, faces = [], []
    for axis in range(3):
        for side in (-0.5, 0.5):
            a, b = [k for k in range(3) if k != axis]
            base = len(verts)
            for i in range(n + 1):
                for j in range(n + 1):
                    p = np.zeros(3)
                    p[axis], p[a], p[b] = side, g[i], g[j]
                    verts.append(p)
            for i in range(n):
                for j in range(n):
                    v00 = base + i * (n + 1) + j
                    faces.append((v00, v00 + n + 1, v00 + n + 2))
                    faces.append((v00, v00 + n + 2, v00 + 1))
    verts = np.array(verts)
    # weld shared edge/corner vertices
    keys = np.round(verts * 4 * n).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    welded = verts[first[order]]
    faces = rank[inverse.reshape(-1)][np.array(faces)]
    faces = _orient_outward(welded, faces, np.zeros(3))
    return TriMesh(c + size * welded, faces)


def merge_meshes(meshes: Sequence[TriMesh], labels: Optional[Sequence[int]] = None) -> TriMesh:
    verts, faces, labs = [], [], []
    offset = 0
    for k, m in enumerate(meshes):
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        if labels is not None:
            labs.append(np.full(m.n_vertices, labels[k], dtype=np.int64))
        offset += m.n_vertices
    return TriMesh(np.concatenate(verts), np.concatenate(faces),
                   np.concatenate(labs) if labels is not None else None)


# ---------------------------------------------------------------------------
# Test body
# ---------------------------------------------------------------------------

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_hip", "left_knee", "left_ankle",
    "right_hip", "right_knee", "right_ankle",
)

_JOINTS = np.array([
    [0.0, 0.95, 0.0], [0.0, 1.20, 0.0], [0.0, 1.50, 0.0], [0.0, 1.62, 0.0],
    [0.18, 1.45, 0.0], [0.45, 1.45, 0.0], [0.70, 1.45, 0.0],
    [-0.18, 1.45, 0.0], [-0.45, 1.45, 0.0], [-0.70, 1.45, 0.0],
    [0.10, 0.90, 0.0], [0.10, 0.50, 0.0], [0.10, 0.08, 0.0],
    [-0.10, 0.90, 0.0], [-0.10, 0.50, 0.0], [-0.10, 0.08, 0.0],
])
_PARENTS = np.array([-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14])

# (start point, end point, skinning joint, part, radius, rings, sides)
_SEGMENTS = [
    ((0.0, 0.85, 0.0), (0.0, 1.50, 0.0), 0, "torso", 0.15, 8, 8),
    ((0.0, 1.58, 0.0), (0.0, 1.86, 0.0), 3, "head", 0.10, 6, 6),
    ((0.20, 1.45, 0.0), (0.45, 1.45, 0.0), 4, "left_upper_arm", 0.05, 5, 5),
    ((0.47, 1.45, 0.0), (0.70, 1.45, 0.0), 5, "left_forearm", 0.04, 5, 5),
    ((0.72, 1.45, 0.0), (0.86, 1.45, 0.0), 6, "left_hand", 0.035, 5, 5),
    ((-0.20, 1.45, 0.0), (-0.45, 1.45, 0.0), 7, "right_upper_arm", 0.05, 5, 5),
    ((-0.47, 1.45, 0.0), (-0.70, 1.45, 0.0), 8, "right_forearm", 0.04, 5, 5),
    ((-0.72, 1.45, 0.0), (-0.86, 1.45, 0.0), 9, "right_hand", 0.035, 5, 5),
    ((0.10, 0.86, 0.0), (0.10, 0.52, 0.0), 10, "left_upper_leg", 0.07, 5, 5),
    ((0.10, 0.48, 0.0), (0.10, 0.10, 0.0), 11, "left_lower_leg", 0.055, 5, 5),
    ((0.10, 0.05, -0.03), (0.10, 0.05, 0.18), 12, "left_foot", 0.04, 5, 5),
    ((-0.10, 0.86, 0.0), (-0.10, 0.52, 0.0), 13, "right_upper_leg", 0.07, 5, 5),
    ((-0.10, 0.48, 0.0), (-0.10, 0.10, 0.0), 14, "right_lower_leg", 0.055, 5, 5),
    ((-0.10, 0.05, -0.03), (-0.10, 0.05, 0.18), 15, "right_foot", 0.04, 5, 5),
]


def _tube(a, b, radius, rings, sides, phase, profile=None):
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = b - a
    d /= np.linalg.norm(d)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    ts = np.linspace(0, 1, rings)
    verts = []
    for t in ts:
        r = radius * (profile(t) if profile else 1.0)
        for k in range(sides):
            ang = phase + 2 * math.pi * k / sides
            verts.append(a + t * (b - a) + r * (math.cos(ang) * u + math.sin(ang) * v))
    faces = []
    for i in range(rings - 1):
        for k in range(sides):
            p, q = i * sides + k, i * sides + (k + 1) % sides
            faces.append((p, q, q + sides))
            faces.append((p, q + sides, p + sides))
    return np.array(verts), np.array(faces), ts


def make_test_body() -> SkinnedBody:
    """16 joints, 400 vertices, every one of the 15 part labels present."""
    verts, faces, weights, parts = [], [], [], []
    n_joints = len(_JOINTS)
    for k, (a, b, joint, part, radius, rings, sides) in enumerate(_SEGMENTS):
        profile = (lambda t: 0.55 + 0.45 * math.sin(math.pi * t)) if part == "head" else None
        v, f, ts = _tube(a, b, radius, rings, sides, phase=0.37 * k, profile=profile)
        base = sum(len(x) for x in verts)
        verts.append(v)
        faces.append(f + base)
        for i, t in enumerate(np.repeat(ts, sides)):
            w = np.zeros(n_joints)
            if part == "torso":
                # pelvis -> spine -> neck along the trunk
                if t < 0.5:
                    w[0], w[1] = 1 - 2 * t, 2 * t
                else:
                    w[1], w[2] = 2 - 2 * t, 2 * t - 1
            else:
                parent = _PARENTS[joint]
                blend = 0.5 * max(0.0, 1 - t / 0.3) if parent >= 0 else 0.0
                w[joint] = 1 - blend
                w[parent] += blend
            weights.append(w)
            if part == "torso":
                parts.append("back" if v[i, 2] < 0 else "torso")
            else:
                parts.append(part)
    return SkinnedBody(np.concatenate(verts), np.concatenate(faces), _JOINTS, _PARENTS,
                       np.array(weights), parts)


def random_pose(n_joints: int, rng: np.random.Generator, max_angle: float = 0.6,
                translation: float = 0.1) -> Pose:
    axes = rng.normal(size=(n_joints, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(-max_angle, max_angle, size=n_joints)
    return Pose(axes * angles[:, None], rng.uniform(-translation, translation, 3))


def random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a random axis and angle up to ``max_deg``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = math.radians(rng.uniform(0, max_deg))
    return np.concatenate([[math.cos(ang / 2)], math.sin(ang / 2) * axis])


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

@dataclass
class LabeledScene:
    mesh: TriMesh
    labels: np.ndarray  # ground truth, 0 human / 1 object


def two_sphere_scene(rng: np.random.Generator, n_human: int = 400, n_object: int = 200) -> LabeledScene:
    """A large 'human' sphere and a smaller 'object' sphere a small gap apart."""
    r_h = rng.uniform(0.4, 0.6)
    r_o = rng.uniform(0.15, 0.3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    gap = rng.uniform(0.02, 0.08)
    human = make_sphere((0, 0, 0), r_h, n_human)
    obj = make_sphere(direction * (r_h + r_o + gap), r_o, n_object)
    mesh = merge_meshes([human, obj], [0, 1])
    return LabeledScene(mesh.with_labels(None), mesh.vertex_labels.copy())


def body_object_scene(body: SkinnedBody, part: str = "right_hand", radius: float = 0.08,
                      n_object: int = 200, gap: float = 0.01) -> LabeledScene:
    """Body template plus a sphere touching the given part from outside."""
    verts = body.rest_vertices
    sel = np.array([p.value == part for p in body.part_labels])
    tip = verts[sel].mean(axis=0)
    torso_center = np.array([0.0, 1.2, 0.0])
    out = tip - torso_center
    out /= np.linalg.norm(out)
    # place the sphere centre so its surface clears the part by ``gap``
    center = tip.copy()
    for _ in range(200):
        dmin = np.min(np.linalg.norm(verts - center, axis=1))
        if dmin >= radius + gap:
            break
        center = center + out * 0.005
    obj = make_sphere(center, radius, n_object)
    mesh = merge_meshes([body.rest_mesh(), obj], [0, 1])
    return LabeledScene(mesh.with_labels(None), mesh.vertex_labels.copy())


# ---------------------------------------------------------------------------
# Demo input set for the CLI
# ---------------------------------------------------------------------------

def write_demo_fixture(out_dir, n_views: int = 24, n_bands: int = 3, resolution: int = 256) -> dict:
    """Write a small end-to-end input set; returns the paths written."""
    from .render import default_radius, make_trajectory, save_trajectory
    from .segmentation import render_label_masks, save_mask_frames

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = make_test_body()
    scene = body_object_scene(body, "right_hand")
    # the scan lives in its own frame: scaled, turned and shifted away from the body template
    scan_frame = Similarity7DoF(1.1, random_rotation(np.random.default_rng(3), 12.0), [0.2, 0.05, -0.1])
    scene = LabeledScene(scene.mesh.with_vertices(scan_frame.apply_points(scene.mesh.vertices)), scene.labels)
    combined = out / "combined.ply"
    save_mesh(scene.mesh, combined)
    save_mesh(scene.mesh.with_labels(scene.labels), out / "combined_gt.ply")
    center = scene.mesh.aabb().center
    traj = make_trajectory(center, default_radius(scene.mesh), n_views, n_bands, resolution, resolution)
    save_trajectory(traj, out / "trajectory.json")
    masks = render_label_masks(scene.mesh, scene.labels, traj.cameras)
    save_mask_frames(masks, out / "masks")
    save_body(body, out / "body.json")
    rng = np.random.default_rng(7)
    poses = [Pose.identity(body.n_joints)] + [random_pose(body.n_joints, rng, 0.3, 0.0) for _ in range(2)]
    save_pose_sequence(poses, out / "poses.json")
    spec = {"category": "ball", "parts": ["right_hand"]}
    (out / "spec.json").write_text(json.dumps(spec) + "\n", encoding="utf-8")
    return {
        "mesh": str(combined), "trajectory": str(out / "trajectory.json"), "masks": str(out / "masks"),
        "body": str(out / "body.json"), "poses": str(out / "poses.json"), "spec": str(out / "spec.json"),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="write the hoikit demo fixture")
    ap.add_argument("out_dir")
    ap.add_argument("--views", type=int, default=24)
    ap.add_argument("--bands", type=int, default=3)
    ap.add_argument("--resolution", type=int, default=256)
    args = ap.parse_args(argv)
    paths = write_demo_fixture(args.out_dir, args.views, args.bands, args.resolution)
    print(json.dumps(paths, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
