"""Similarity (scale + rotation + translation) alignment of a body to a scan."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .mesh import MeshError, PathLike, SpatialIndex, TriMesh, nearest_distances
from .render import Camera, pixel_indices

logger = logging.getLogger(__name__)

DEFAULT_ROUNDS = 30
DEFAULT_MIN_IMPROVEMENT = 1e-7
PARTIAL_COVERAGE_THRESHOLD = 0.6
COVERAGE_RADIUS_FRACTION = 0.05


def _normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical hemisphere keeps serialized output stable
    if q[0] < 0:
        q = -q
    return q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    return _normalize_quat([w, x, y, z])


@dataclass(frozen=True, eq=False)
class Similarity7DoF:
    """``p -> scale * R(rotation) @ p + translation``; rotation is a unit quaternion (w, x, y, z)."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        q = _normalize_quat(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Similarity7DoF":
        return cls()

    @classmethod
    def from_matrix(cls, scale: float, R: np.ndarray, t) -> "Similarity7DoF":
        return cls(scale, matrix_to_quat(R), t)

    @property
    def matrix(self) -> np.ndarray:
        """Rotation matrix."""
        return quat_to_matrix(self.rotation)

    def homogeneous(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.matrix
        m[:3, 3] = self.translation
        return m

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self.scale * (p @ self.matrix.T) + self.translation

    def inverse(self) -> "Similarity7DoF":
        R = self.matrix
        s = 1.0 / self.scale
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Similarity7DoF(s, q, -s * (R.T @ self.translation))

    def compose(self, other: "Similarity7DoF") -> "Similarity7DoF":
        """``self ∘ other``: apply ``other`` first."""
        R = self.matrix @ other.matrix
        return Similarity7DoF.from_matrix(
            self.scale * other.scale, R,
            self.scale * (self.matrix @ other.translation) + self.translation,
        )

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation_quat": [float(x) for x in self.rotation],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Similarity7DoF":
        return cls(float(d["scale"]), d["rotation_quat"], d["translation"])


def apply_similarity(t: Similarity7DoF, mesh: TriMesh) -> TriMesh:
    return mesh.with_vertices(t.apply_points(mesh.vertices))


def save_alignment(t: Similarity7DoF, path: PathLike) -> None:
    """Stores the body->mesh transform and its inverse."""
    payload = {"camhmr_to_mesh": t.to_dict(), "mesh_to_camhmr": t.inverse().to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_alignment(path: PathLike) -> Similarity7DoF:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return Similarity7DoF.from_dict(d["camhmr_to_mesh"] if "camhmr_to_mesh" in d else d)


# ---------------------------------------------------------------------------

def init_alignment(body_mesh: TriMesh, target: TriMesh) -> Similarity7DoF:
    """Match bounding-box centers and diagonals; rotation stays identity."""
    if body_mesh.is_empty() or target.is_empty():
        raise MeshError("alignment needs two nonempty meshes")
    src, dst = body_mesh.aabb(), target.aabb()
    if src.diagonal == 0 or dst.diagonal == 0:
        raise MeshError("cannot align a mesh with zero bounding-box diagonal")
    s = dst.diagonal / src.diagonal
    return Similarity7DoF(s, [1.0, 0.0, 0.0, 0.0], dst.center - s * src.center)


def mask_subset_vertices(vertices: np.ndarray, camera: Camera, human_mask: np.ndarray) -> np.ndarray:
    """Indices of vertices whose projection lands on a set pixel of the front-view human mask."""
    mask = np.asarray(human_mask, dtype=bool)
    if mask.shape != (camera.height, camera.width):
        raise ValueError(f"mask shape {mask.shape} does not match camera {camera.width}x{camera.height}")
    pts = vertices.vertices if isinstance(vertices, TriMesh) else np.asarray(vertices, dtype=np.float64)
    pix, _, inside = camera.project(pts)
    col, row = pixel_indices(pix, camera)
    keep = inside & mask[row, col]
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        logger.warning("front-view human mask selects no body vertices")
    return idx


def coverage(body_mesh: TriMesh, target: TriMesh, init: Optional[Similarity7DoF] = None) -> float:
    """Fraction of (initially aligned) body vertices with a target vertex nearby."""
    init = init or init_alignment(body_mesh, target)
    pts = init.apply_points(body_mesh.vertices)
    radius = COVERAGE_RADIUS_FRACTION * target.aabb().diagonal
    return float(np.mean(nearest_distances(pts, target.vertices) <= radius))


def needs_partial_subset(body_mesh: TriMesh, target: TriMesh) -> bool:
    return coverage(body_mesh, target) < PARTIAL_COVERAGE_THRESHOLD


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

def umeyama(src: np.ndarray, dst: np.ndarray, weights: Optional[np.ndarray] = None):
    """Least-squares similarity mapping ``src`` onto ``dst``: returns ``(s, R, t)``."""
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs, xd = src - mu_s, dst - mu_d
    var_s = w @ np.sum(xs * xs, axis=1)
    cov = (xd * w[:, None]).T @ xs
    U, S, Vt = np.linalg.svd(cov)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1
    R = U @ np.diag(D) @ Vt
    s = float((S * D).sum() / var_s) if var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


class Refinement(NamedTuple):
    transform: Similarity7DoF
    objectives: List[float]  # objective after init and after every accepted round


def refine_chamfer_7dof_trace(source: TriMesh, target: TriMesh, init: Similarity7DoF,
                              rounds: int = DEFAULT_ROUNDS,
                              min_improvement: float = DEFAULT_MIN_IMPROVEMENT) -> Refinement:
    """Alternate nearest-neighbour matching with a closed-form similarity update.

    Every round proposes two updates: one fitted to source->target matches
    only, one fitted to matches in both directions (which escapes the
    shrink/slide minima of one-sided matching).  The proposal with the lower
    one-directional Chamfer objective (source -> target) is accepted if it
    does not increase the objective; refinement stops on rejection or when
    the gain drops below ``min_improvement`` meters.
    """
    if source.is_empty() or target.is_empty():
        raise MeshError("refinement needs two nonempty meshes")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if target.aabb().diagonal == 0:
        raise MeshError("degenerate target: zero bounding-box diagonal")
    src = source.vertices
    tgt = target.vertices
    index = SpatialIndex(tgt)

    def objective(t: Similarity7DoF):
        idx, d = index.query(t.apply_points(src))
        return float(d.mean()), idx

    def proposals(t: Similarity7DoF, matches: np.ndarray):
        yield umeyama(src, tgt[matches])
        back, _ = SpatialIndex(t.apply_points(src)).query(tgt)
        yield umeyama(np.vstack([src, src[back]]), np.vstack([tgt[matches], tgt]))

    current = init
    value, matches = objective(current)
    history = [value]
    for _ in range(rounds):
        if value == 0.0:
            break
        best = None
        for s, R, t in proposals(current, matches):
            if not (np.isfinite(s) and s > 0):
                continue
            cand = Similarity7DoF.from_matrix(s, R, t)
            cand_value, cand_matches = objective(cand)
            if best is None or cand_value < best[1]:
                best = (cand, cand_value, cand_matches)
        if best is None or best[1] > value:
            break
        gain = value - best[1]
        current, value, matches = best
        history.append(value)
        if gain < min_improvement:
            break
    return Refinement(current, history)


def refine_chamfer_7dof(source: TriMesh, target: TriMesh, init: Similarity7DoF,
                        rounds: int = DEFAULT_ROUNDS,
                        min_improvement: float = DEFAULT_MIN_IMPROVEMENT) -> Similarity7DoF:
    return refine_chamfer_7dof_trace(source, target, init, rounds, min_improvement).transform
