"""Independent reference implementations used as test oracles.

Everything here is written from first principles with plain loops or scipy,
and deliberately avoids importing the package's own geometry helpers.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial.transform import Rotation

from hoikit.body import PartName  # part names only; no geometry


# ---------------------------------------------------------------------------
# Nearest neighbours and Chamfer
# ---------------------------------------------------------------------------

def brute_nearest(points: np.ndarray, q: np.ndarray):
    d2 = ((points - q) ** 2).sum(axis=1)
    best = d2.min()
    return int(np.flatnonzero(d2 == best)[0]), math.sqrt(best)


def brute_chamfer(src: np.ndarray, tgt: np.ndarray) -> float:
    total = 0.0
    for p in src:
        total += math.sqrt(((tgt - p) ** 2).sum(axis=1).min())
    return total / len(src)


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

class RefCamera:
    """Pinhole camera rebuilt from the serialized parameters."""

    def __init__(self, d: dict):
        self.pos = np.asarray(d["position"], float)
        target = np.asarray(d["look_at"], float)
        up = np.asarray(d["up"], float)
        self.w, self.h = int(d["width"]), int(d["height"])
        fwd = target - self.pos
        self.fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(self.fwd, up)
        self.right = right / np.linalg.norm(right)
        self.up = np.cross(self.right, self.fwd)
        # pixel size on the plane one meter in front of the camera
        self.px = 2 * math.tan(math.radians(d["fov_deg"]) / 2) / self.h

    def depth(self, v) -> float:
        return float(np.dot(np.asarray(v, float) - self.pos, self.fwd))

    def ray(self, col: float, row: float) -> np.ndarray:
        """Direction through image point (col, row), scaled to unit view depth."""
        x = (col - self.w / 2) * self.px
        y = (self.h / 2 - row) * self.px
        return self.fwd + x * self.right + y * self.up

    def pixel_of(self, v):
        """(col, row) integer pixel containing v, or None when off-image or behind."""
        rel = np.asarray(v, float) - self.pos
        z = float(rel @ self.fwd)
        if z <= 0:
            return None
        col = self.w / 2 + (rel @ self.right) / (z * self.px)
        row = self.h / 2 - (rel @ self.up) / (z * self.px)
        if not (0 <= col < self.w and 0 <= row < self.h):
            return None
        return int(math.floor(col)), int(math.floor(row))

    def reprojection_error(self, v, col: int, row: int) -> float:
        """Chebyshev distance in pixels between v and the ray through the center of (col, row)."""
        z = self.depth(v)
        on_ray = self.pos + z * self.ray(col + 0.5, row + 0.5)
        off = np.asarray(v, float) - on_ray
        return max(abs(off @ self.right), abs(off @ self.up)) / (z * self.px)


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

def ray_triangle_hits(origin, direction, tri: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Möller-Trumbore against all triangles: returns the hit parameter t (inf if none)."""
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, p)
    t_out = np.full(len(tri), np.inf)
    ok = np.abs(det) > eps
    inv = np.zeros_like(det)
    inv[ok] = 1.0 / det[ok]
    s = origin - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = (q @ direction) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
    t_out[hit] = t[hit]
    return t_out


def inside_by_parity(point, vertices: np.ndarray, faces: np.ndarray, rng: np.random.Generator) -> bool:
    """Odd crossing count along a random ray; repeated with three rays and majority vote."""
    tri = vertices[faces]
    votes = 0
    for _ in range(3):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        votes += int(np.isfinite(ray_triangle_hits(np.asarray(point, float), d, tri)).sum() % 2 == 1)
    return votes >= 2


def ray_visible(cam: RefCamera, vertex_id: int, vertices: np.ndarray, faces: np.ndarray) -> bool:
    """True when the first surface hit along the camera-to-vertex ray is the vertex itself."""
    v = vertices[vertex_id]
    d = v - cam.pos
    length = np.linalg.norm(d)
    t = ray_triangle_hits(cam.pos, d / length, vertices[faces])
    return not (t < length * (1 - 1e-7)).any()


# ---------------------------------------------------------------------------
# Multi-view vote, written as a literal per-vertex, per-view loop
# ---------------------------------------------------------------------------

def vote_labels_loop(vertices: np.ndarray, cameras: list, depth_maps: list, object_masks: list,
                     delta: float, tau: float) -> np.ndarray:
    n = len(vertices)
    visible = np.zeros(n, dtype=int)
    hits = np.zeros(n, dtype=int)
    for cam_dict, depth, obj in zip(cameras, depth_maps, object_masks):
        cam = RefCamera(cam_dict)
        for k in range(n):
            px = cam.pixel_of(vertices[k])
            if px is None:
                continue
            col, row = px
            if abs(cam.depth(vertices[k]) - depth[row, col]) <= delta:
                visible[k] += 1
                if obj[row, col]:
                    hits[k] += 1
    labels = np.zeros(n, dtype=int)
    for k in range(n):
        if visible[k] > 0 and hits[k] / visible[k] > tau:
            labels[k] = 1
    # unseen vertices copy the nearest seen vertex
    seen = np.flatnonzero(visible > 0)
    for k in np.flatnonzero(visible == 0):
        j, _ = brute_nearest(vertices[seen], vertices[k])
        labels[k] = labels[seen[j]]
    return labels


def split_faces_loop(faces: np.ndarray, labels: np.ndarray):
    """Per-face majority: a face is object when at least two of its corners are."""
    human, obj = [], []
    for f in faces:
        (obj if sum(labels[i] for i in f) >= 2 else human).append(tuple(int(i) for i in f))
    return human, obj


# ---------------------------------------------------------------------------
# Linear blend skinning
# ---------------------------------------------------------------------------

def chain_transforms(joints: np.ndarray, parents, rotvecs: np.ndarray, root_translation) -> list:
    """World 4x4 of every joint, each built by walking its own chain to the root."""
    mats = []
    for j in range(len(joints)):
        chain = []
        k = j
        while k >= 0:
            chain.append(k)
            k = parents[k]
        m = np.eye(4)
        m[:3, 3] = root_translation
        for k in reversed(chain):
            r = Rotation.from_rotvec(np.array(rotvecs[k], dtype=float)).as_matrix()
            local = np.eye(4)
            local[:3, :3] = r
            local[:3, 3] = joints[k] - r @ joints[k]
            m = m @ local
        mats.append(m)
    return mats


def lbs_loop(rest: np.ndarray, joints: np.ndarray, parents, weights: np.ndarray,
             rotvecs: np.ndarray, root_translation) -> np.ndarray:
    mats = chain_transforms(joints, parents, rotvecs, root_translation)
    out = np.zeros_like(rest)
    for i, v in enumerate(rest):
        acc = np.zeros(3)
        for j in range(len(joints)):
            if weights[i, j] != 0:
                acc += weights[i, j] * (mats[j][:3, :3] @ v + mats[j][:3, 3])
        out[i] = acc
    return out


# ---------------------------------------------------------------------------
# Contact configuration table
# ---------------------------------------------------------------------------

def table_oracle(s):
    """Direct transcription of the configuration table, evaluated rule by rule."""
    rh = {PartName.RIGHT_HAND, PartName.RIGHT_FOREARM}
    lh = {PartName.LEFT_HAND, PartName.LEFT_FOREARM}
    rl = {PartName.RIGHT_UPPER_LEG, PartName.RIGHT_LOWER_LEG, PartName.RIGHT_FOOT}
    ll = {PartName.LEFT_UPPER_LEG, PartName.LEFT_LOWER_LEG, PartName.LEFT_FOOT}
    fired = []
    if not s:
        fired.append("no_contact")
    if s and s <= rh:
        fired.append("right_hand")
    if s and s <= lh:
        fired.append("left_hand")
    if s <= rh | lh and s & rh and s & lh:
        fired.append("both_hands")
    if s and s <= rl:
        fired.append("right_leg")
    if s and s <= ll:
        fired.append("left_leg")
    if s and s <= {PartName.BACK}:
        fired.append("on_back")
    return fired or ["other"]
