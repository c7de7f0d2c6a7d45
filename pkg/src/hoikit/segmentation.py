"""Per-vertex visibility, object-mask voting and mesh splitting."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .mesh import OBJECT, PathLike, SpatialIndex, TriMesh
from .render import Camera, DepthMap, pixel_indices, rasterize, rasterize_depth

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.5
DEFAULT_DELTA_FRACTION = 0.005
MASK_THRESHOLD = 128


class NoVisibleVerticesError(RuntimeError):
    """No vertex passed the visibility test in any view."""


@dataclass(frozen=True, eq=False)
class MaskFrame:
    human_mask: np.ndarray
    object_mask: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.human_mask)
        o = np.asarray(self.object_mask)
        if h.ndim != 2 or h.shape != o.shape:
            raise ValueError(f"mask shapes differ or are not 2-D: {h.shape} vs {o.shape}")
        for m in (h, o):
            if m.dtype != bool and not np.isin(m, (0, 1)).all():
                raise ValueError("masks must be strictly binary")
        h, o = h.astype(bool), o.astype(bool)
        h.setflags(write=False)
        o.setflags(write=False)
        object.__setattr__(self, "human_mask", h)
        object.__setattr__(self, "object_mask", o)

    @property
    def height(self) -> int:
        return self.human_mask.shape[0]

    @property
    def width(self) -> int:
        return self.human_mask.shape[1]

    def check_camera(self, camera: Camera) -> None:
        if (self.width, self.height) != (camera.width, camera.height):
            raise ValueError(
                f"mask is {self.width}x{self.height} but camera is {camera.width}x{camera.height}"
            )


def mask_path(directory: PathLike, view: int, kind: str) -> Path:
    return Path(directory) / f"view_{view:04d}_{kind}.png"


def read_mask_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"))
    return gray >= MASK_THRESHOLD


def write_mask_png(mask: np.ndarray, path: PathLike) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask_frames(directory: PathLike, n_views: int) -> List[MaskFrame]:
    return [
        MaskFrame(read_mask_png(mask_path(directory, i, "human")),
                  read_mask_png(mask_path(directory, i, "object")))
        for i in range(n_views)
    ]


def save_mask_frames(frames: Sequence[MaskFrame], directory: PathLike) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        write_mask_png(fr.human_mask, mask_path(directory, i, "human"))
        write_mask_png(fr.object_mask, mask_path(directory, i, "object"))


@dataclass(frozen=True, eq=False)
class VisibilityTable:
    """Boolean ``(n_vertices, n_views)`` matrix; row v lists the views that see v."""

    visible: np.ndarray

    def __post_init__(self):
        vis = np.asarray(self.visible, dtype=bool)
        if vis.ndim != 2:
            raise ValueError("visibility matrix must be 2-D")
        vis = vis.copy()
        vis.setflags(write=False)
        object.__setattr__(self, "visible", vis)

    @property
    def n_vertices(self) -> int:
        return self.visible.shape[0]

    @property
    def n_views(self) -> int:
        return self.visible.shape[1]

    def views(self, v: int) -> List[int]:
        return np.flatnonzero(self.visible[v]).tolist()

    def counts(self) -> np.ndarray:
        return self.visible.sum(axis=1)


def default_delta(mesh: TriMesh) -> float:
    return DEFAULT_DELTA_FRACTION * mesh.aabb().diagonal


def _visible_in_view(vertices: np.ndarray, camera: Camera, depth: DepthMap, delta: float) -> np.ndarray:
    if (depth.width, depth.height) != (camera.width, camera.height):
        raise ValueError("depth map does not match its camera")
    pix, z, inside = camera.project(vertices)
    col, row = pixel_indices(pix, camera)
    d = depth.depth[row, col]
    with np.errstate(invalid="ignore"):
        return inside & (np.abs(z - d) <= delta)


def vertex_visibility(mesh: TriMesh, cameras: Sequence[Camera], depths: Sequence[DepthMap],
                      delta: float) -> VisibilityTable:
    """Z-buffer consistency test of every vertex in every view."""
    if len(cameras) != len(depths):
        raise ValueError(f"{len(cameras)} cameras but {len(depths)} depth maps")
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    cols = [_visible_in_view(mesh.vertices, c, d, delta) for c, d in zip(cameras, depths)]
    vis = np.stack(cols, axis=1) if cols else np.zeros((mesh.n_vertices, 0), dtype=bool)
    return VisibilityTable(vis)


def render_depths(mesh: TriMesh, cameras: Sequence[Camera], threads: int = 1) -> List[DepthMap]:
    if threads <= 1:
        return [rasterize_depth(mesh, c) for c in cameras]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda c: rasterize_depth(mesh, c), cameras))


def object_hits(mesh: TriMesh, vis: VisibilityTable, masks: Sequence[MaskFrame],
                cameras: Sequence[Camera]) -> np.ndarray:
    """Per-vertex count of visible views whose object mask covers the projection."""
    if not (len(masks) == len(cameras) == vis.n_views):
        raise ValueError("masks, cameras and visibility table disagree on the number of views")
    hits = np.zeros(mesh.n_vertices, dtype=np.int64)
    for i, (mask, cam) in enumerate(zip(masks, cameras)):
        mask.check_camera(cam)
        seen = vis.visible[:, i]
        if not seen.any():
            continue
        pix, _, _ = cam.project(mesh.vertices[seen])
        col, row = pixel_indices(pix, cam)
        hits[seen] += mask.object_mask[row, col]
    return hits


def vote_object_labels(mesh: TriMesh, vis: VisibilityTable, masks: Sequence[MaskFrame],
                       cameras: Sequence[Camera], tau: float = DEFAULT_TAU) -> np.ndarray:
    """Label 1 where the object-mask fraction over visible views exceeds ``tau``.

    Vertices seen by no view copy the label of the nearest vertex that was seen
    (lowest index on distance ties).
    """
    if not 0 < tau < 1:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    n_vis = vis.counts()
    seen = n_vis > 0
    if not seen.any():
        raise NoVisibleVerticesError("no vertex is visible in any view")
    hits = object_hits(mesh, vis, masks, cameras)
    labels = np.zeros(mesh.n_vertices, dtype=np.int64)
    labels[seen] = (hits[seen] / n_vis[seen] > tau).astype(np.int64)
    if not seen.all():
        donors = np.flatnonzero(seen)
        nearest, _ = SpatialIndex(mesh.vertices[donors]).query(mesh.vertices[~seen])
        labels[~seen] = labels[donors[nearest]]
        logger.debug("%d never-visible vertices labeled from nearest neighbours", int((~seen).sum()))
    return labels


def object_face_mask(mesh: TriMesh, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if len(labels) != mesh.n_vertices:
        raise ValueError(f"{len(labels)} labels for {mesh.n_vertices} vertices")
    return (labels[mesh.faces] == OBJECT).sum(axis=1) >= 2


def split_mesh(mesh: TriMesh, labels: np.ndarray) -> Tuple[TriMesh, TriMesh]:
    """Faces with at least two object-labeled vertices go to the object mesh."""
    obj = object_face_mask(mesh, labels)
    labeled = mesh.with_labels(np.asarray(labels, dtype=np.int64))
    human, _ = labeled.submesh(~obj)
    objm, _ = labeled.submesh(obj)
    return human, objm


@dataclass
class SegmentationResult:
    labels: np.ndarray
    visibility: VisibilityTable
    human: TriMesh
    object: TriMesh
    delta: float


def segment(mesh: TriMesh, cameras: Sequence[Camera], masks: Sequence[MaskFrame],
            delta: Optional[float] = None, tau: float = DEFAULT_TAU,
            depths: Optional[Sequence[DepthMap]] = None, threads: int = 1) -> SegmentationResult:
    """Render depths, test visibility, vote and split in one call."""
    if delta is None:
        delta = default_delta(mesh)
    if depths is None:
        depths = render_depths(mesh, cameras, threads)
    vis = vertex_visibility(mesh, cameras, depths, delta)
    labels = vote_object_labels(mesh, vis, masks, cameras, tau)
    human, obj = split_mesh(mesh, labels)
    return SegmentationResult(labels, vis, human, obj, delta)


def render_label_masks(mesh: TriMesh, labels: np.ndarray, cameras: Sequence[Camera]) -> List[MaskFrame]:
    """Ideal masks: each pixel takes the class of the face drawn there."""
    face_is_obj = object_face_mask(mesh, labels)
    frames = []
    for cam in cameras:
        _, face = rasterize(mesh, cam)
        drawn = face >= 0
        obj = np.zeros(face.shape, dtype=bool)
        obj[drawn] = face_is_obj[face[drawn]]
        frames.append(MaskFrame(drawn & ~obj, obj))
    return frames
