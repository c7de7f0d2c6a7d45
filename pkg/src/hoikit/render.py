"""Pinhole cameras, multi-band orbit trajectories and a software depth rasterizer.

Conventions: +y is up, azimuth 0 places the camera on the +z side of the
center looking towards -z.  Pixel ``(col, row)`` covers
``[col, col + 1) x [row, row + 1)`` with row 0 at the top; pixel centers sit
at half-integers.  Depth is view-space z (distance along the optical axis),
not Euclidean ray length.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from .mesh import PathLike, TriMesh

NEAR_PLANE = 1e-4
# vertices are snapped to this sub-pixel grid so edge functions are exact
_SUBPIXEL = 256.0
_MAX_PAIRS = 2_000_000

DEFAULT_FOV_DEG = 40.0
DEFAULT_RESOLUTION = 512
DEFAULT_RADIUS_FACTOR = 1.8
DEFAULT_N_VIEWS = 120
DEFAULT_N_BANDS = 5
ELEVATION_RANGE = (-60.0, 60.0)
START_ELEVATION = 45.0


def _vec3(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(3)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    fov_deg: float = DEFAULT_FOV_DEG
    width: int = DEFAULT_RESOLUTION
    height: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        pos, tgt, up = _vec3(self.position), _vec3(self.look_at), _vec3(self.up)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(tgt)) and np.all(np.isfinite(up))):
            raise ValueError("camera vectors must be finite")
        view = tgt - pos
        if np.linalg.norm(view) == 0:
            raise ValueError("camera position equals look_at")
        n_up = np.linalg.norm(up)
        if n_up == 0:
            raise ValueError("camera up vector is zero")
        if np.linalg.norm(np.cross(view / np.linalg.norm(view), up / n_up)) < 1e-9:
            raise ValueError("camera up vector is parallel to the view direction")
        if not 0 < float(self.fov_deg) < 180:
            raise ValueError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("camera width and height must be >= 1")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "look_at", tgt)
        object.__setattr__(self, "up", _vec3(up / n_up))
        object.__setattr__(self, "fov_deg", float(self.fov_deg))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def focal_px(self) -> float:
        return 0.5 * self.height / math.tan(math.radians(self.fov_deg) / 2)

    def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (right, true_up, forward) axes in world space."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        return right, np.cross(right, fwd), fwd

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        r, u, f = self.basis()
        rel = np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.position
        return np.stack([rel @ r, rel @ u, rel @ f], axis=1)

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized projection.

        Returns continuous pixel coordinates ``(N, 2)`` as (x, y), view depth
        ``(N,)`` and a boolean mask of points that land inside the image with
        positive depth.
        """
        cam = self.to_camera(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            sx = 0.5 * self.width + self.focal_px * cam[:, 0] / z
            sy = 0.5 * self.height - self.focal_px * cam[:, 1] / z
        inside = (z > 0) & (sx >= 0) & (sx < self.width) & (sy >= 0) & (sy < self.height)
        return np.stack([sx, sy], axis=1), z, inside

    def to_dict(self) -> dict:
        return {
            "position": [float(x) for x in self.position],
            "look_at": [float(x) for x in self.look_at],
            "up": [float(x) for x in self.up],
            "fov_deg": self.fov_deg,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["position"], d["look_at"], d.get("up", [0.0, 1.0, 0.0]),
                   d.get("fov_deg", DEFAULT_FOV_DEG), d.get("width", DEFAULT_RESOLUTION),
                   d.get("height", DEFAULT_RESOLUTION))


class Projection(NamedTuple):
    x: float
    y: float
    depth: float

    @property
    def pixel(self) -> Tuple[int, int]:
        """(col, row) of the pixel containing the projection."""
        return int(math.floor(self.x)), int(math.floor(self.y))


def project_vertex(camera: Camera, v) -> Optional[Projection]:
    """Project one point; ``None`` when it falls outside the image or behind the camera."""
    pix, z, inside = camera.project(np.asarray(v, dtype=np.float64).reshape(1, 3))
    if not inside[0]:
        return None
    return Projection(float(pix[0, 0]), float(pix[0, 1]), float(z[0]))


def pixel_indices(pix: np.ndarray, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Integer (col, row) of the pixel each continuous coordinate falls in (clamped)."""
    col = np.clip(np.floor(pix[:, 0]), 0, camera.width - 1).astype(np.int64)
    row = np.clip(np.floor(pix[:, 1]), 0, camera.height - 1).astype(np.int64)
    return col, row


def orbit_camera(center, radius: float, elevation_deg: float, azimuth_deg: float,
                 width: int = DEFAULT_RESOLUTION, height: int = DEFAULT_RESOLUTION,
                 fov_deg: float = DEFAULT_FOV_DEG) -> Camera:
    el, az = math.radians(elevation_deg), math.radians(azimuth_deg)
    offset = radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    c = np.asarray(center, dtype=np.float64)
    return Camera(c + offset, c, (0.0, 1.0, 0.0), fov_deg, width, height)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    center: np.ndarray
    radius: float
    cameras: Tuple[Camera, ...]
    bands: Tuple[Tuple[float, int], ...] = ()
    # per camera, aligned with ``cameras``; empty when loaded from a file without them
    band_index: Tuple[int, ...] = ()
    azimuths: Tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.cameras)

    def to_dict(self) -> dict:
        d = {
            "center": [float(x) for x in self.center],
            "radius": float(self.radius),
            "cameras": [c.to_dict() for c in self.cameras],
        }
        if self.bands:
            d["bands"] = [{"elevation_deg": float(e), "n_views": int(n)} for e, n in self.bands]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        bands = tuple((float(b["elevation_deg"]), int(b["n_views"])) for b in d.get("bands", []))
        return cls(_vec3(d["center"]), float(d["radius"]),
                   tuple(Camera.from_dict(c) for c in d["cameras"]), bands)


def band_elevations(n_bands: int) -> List[float]:
    lo, hi = ELEVATION_RANGE
    if n_bands == 1:
        return [0.5 * (lo + hi)]
    return [lo + (hi - lo) * k / (n_bands - 1) for k in range(n_bands)]


def make_trajectory(center, radius: float, n_views: int = DEFAULT_N_VIEWS, n_bands: int = DEFAULT_N_BANDS,
                    width: int = DEFAULT_RESOLUTION, height: int = DEFAULT_RESOLUTION,
                    fov_deg: float = DEFAULT_FOV_DEG) -> Trajectory:
    """Multi-band spherical sweep.

    Views are split as evenly as possible across ``n_bands`` elevations spaced
    over [-60, 60] degrees (earlier bands take the remainder).  Each band
    sweeps a full turn of azimuth, with the sweep direction flipping from one
    band to the next.  The sequence is then rotated so it starts at the first
    camera of the band closest to 45 degrees elevation (earlier band on ties).
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if n_bands < 1 or n_views < n_bands:
        raise ValueError(f"need n_views >= n_bands >= 1, got n_views={n_views}, n_bands={n_bands}")
    elevations = band_elevations(n_bands)
    base, extra = divmod(n_views, n_bands)
    counts = [base + (1 if k < extra else 0) for k in range(n_bands)]

    cams, band_of, azs = [], [], []
    for k, (el, m) in enumerate(zip(elevations, counts)):
        sign = 1.0 if k % 2 == 0 else -1.0
        for j in range(m):
            az = sign * 360.0 * j / m
            cams.append(orbit_camera(center, radius, el, az, width, height, fov_deg))
            band_of.append(k)
            azs.append(az)

    start_band = min(range(n_bands), key=lambda k: (abs(elevations[k] - START_ELEVATION), k))
    start = band_of.index(start_band)
    order = list(range(start, n_views)) + list(range(start))
    return Trajectory(
        _vec3(center), float(radius),
        tuple(cams[i] for i in order),
        tuple(zip(elevations, counts)),
        tuple(band_of[i] for i in order),
        tuple(azs[i] for i in order),
    )


def default_radius(mesh: TriMesh) -> float:
    return DEFAULT_RADIUS_FACTOR * mesh.aabb().diagonal


def save_trajectory(traj: Trajectory, path: PathLike) -> None:
    Path(path).write_text(json.dumps(traj.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_trajectory(path: PathLike) -> Trajectory:
    return Trajectory.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DepthMap:
    width: int
    height: int
    depth: np.ndarray  # (height, width), +inf where nothing was drawn

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.shape != (self.height, self.width):
            raise ValueError(f"depth shape {d.shape} != ({self.height}, {self.width})")
        finite = np.isfinite(d)
        if np.any(d[finite] <= 0):
            raise ValueError("finite depths must be positive")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)

    @classmethod
    def background(cls, width: int, height: int) -> "DepthMap":
        return cls(width, height, np.full((height, width), np.inf))

    def save_pfm(self, path: PathLike) -> None:
        """Single-channel little-endian PFM (rows stored bottom-up per the format)."""
        header = f"Pf\n{self.width} {self.height}\n-1.0\n".encode("ascii")
        body = np.flipud(self.depth).astype("<f4").tobytes()
        Path(path).write_bytes(header + body)

    @classmethod
    def load_pfm(cls, path: PathLike) -> "DepthMap":
        data = Path(path).read_bytes()
        lines = data.split(b"\n", 3)
        if lines[0].strip() != b"Pf":
            raise ValueError("not a single-channel PFM file")
        w, h = (int(x) for x in lines[1].split())
        scale = float(lines[2])
        dtype = "<f4" if scale < 0 else ">f4"
        arr = np.frombuffer(lines[3], dtype=dtype, count=w * h).reshape(h, w)
        return cls(w, h, np.flipud(arr).astype(np.float64))


def _clip_near(tri_cam: np.ndarray) -> List[np.ndarray]:
    """Clip one camera-space triangle against z = NEAR_PLANE; returns 0-2 triangles."""
    poly = []
    for i in range(3):
        a, b = tri_cam[i], tri_cam[(i + 1) % 3]
        a_in, b_in = a[2] > NEAR_PLANE, b[2] > NEAR_PLANE
        if a_in:
            poly.append(a)
        if a_in != b_in:
            t = (NEAR_PLANE - a[2]) / (b[2] - a[2])
            p = a + t * (b - a)
            p[2] = NEAR_PLANE * (1 + 1e-12)
            poly.append(p)
    return [np.stack([poly[0], poly[j], poly[j + 1]]) for j in range(1, len(poly) - 1)]


def _screen_triangles(mesh: TriMesh, camera: Camera) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Camera-space triangles -> (screen xy (T,3,2), view depth (T,3), source face index (T,))."""
    cam = camera.to_camera(mesh.vertices)
    tris = cam[mesh.faces]  # (F, 3, 3)
    front = tris[:, :, 2] > NEAR_PLANE
    keep = front.all(axis=1)
    pieces = [tris[keep]]
    face_ids = [np.flatnonzero(keep)]
    for fi in np.flatnonzero(front.any(axis=1) & ~keep):
        clipped = _clip_near(tris[fi])
        if clipped:
            pieces.append(np.stack(clipped))
            face_ids.append(np.full(len(clipped), fi))
    tris = np.concatenate(pieces, axis=0) if pieces else np.zeros((0, 3, 3))
    fid = np.concatenate(face_ids).astype(np.int64)
    z = tris[:, :, 2]
    f = camera.focal_px
    sx = 0.5 * camera.width + f * tris[:, :, 0] / z
    sy = 0.5 * camera.height - f * tris[:, :, 1] / z
    xy = np.stack([sx, sy], axis=2)
    xy = np.round(xy * _SUBPIXEL) / _SUBPIXEL
    return xy, z, fid


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _owns_zero(ax, ay, bx, by):
    """Top-left rule: a pixel center exactly on an edge belongs to it if the edge is top or left."""
    dx, dy = bx - ax, by - ay
    return ((dy == 0) & (dx > 0)) | (dy < 0)


def rasterize(mesh: TriMesh, camera: Camera) -> Tuple[DepthMap, np.ndarray]:
    """Z-buffer the mesh.  Returns the depth map and per-pixel face index (-1 = background).

    Equal depths resolve to the lowest face index, so the result does not
    depend on face order.
    """
    W, H = camera.width, camera.height
    best_depth = np.full(W * H, np.inf)
    best_face = np.full(W * H, -1, dtype=np.int64)
    if mesh.n_faces == 0:
        return DepthMap(W, H, best_depth.reshape(H, W)), best_face.reshape(H, W)

    xy, z, fid = _screen_triangles(mesh, camera)
    ax, ay = xy[:, 0, 0], xy[:, 0, 1]
    bx, by = xy[:, 1, 0], xy[:, 1, 1]
    cx, cy = xy[:, 2, 0], xy[:, 2, 1]
    za, zb, zc = z[:, 0], z[:, 1], z[:, 2]
    area = _edge(ax, ay, bx, by, cx, cy)
    # orient every triangle to positive area; no back-face culling
    flip = area < 0
    bx, cx = np.where(flip, cx, bx), np.where(flip, bx, cx)
    by, cy = np.where(flip, cy, by), np.where(flip, by, cy)
    zb, zc = np.where(flip, zc, zb), np.where(flip, zb, zc)
    area = np.abs(area)

    x0 = np.ceil(np.minimum(np.minimum(ax, bx), cx) - 0.5)
    x1 = np.floor(np.maximum(np.maximum(ax, bx), cx) - 0.5)
    y0 = np.ceil(np.minimum(np.minimum(ay, by), cy) - 0.5)
    y1 = np.floor(np.maximum(np.maximum(ay, by), cy) - 0.5)
    x0, y0 = np.maximum(x0, 0), np.maximum(y0, 0)
    x1, y1 = np.minimum(x1, W - 1), np.minimum(y1, H - 1)
    live = (area > 0) & (x1 >= x0) & (y1 >= y0)
    tri = np.flatnonzero(live)
    nx = (x1 - x0 + 1)[tri].astype(np.int64)
    ny = (y1 - y0 + 1)[tri].astype(np.int64)
    counts = nx * ny

    chunk_start = 0
    while chunk_start < len(tri):
        # grow the chunk until it would exceed the pair budget (always >= 1 triangle)
        csum = np.cumsum(counts[chunk_start:])
        stop = chunk_start + max(1, int(np.searchsorted(csum, _MAX_PAIRS, side="right")))
        sel = tri[chunk_start:stop]
        cnt = counts[chunk_start:stop]
        cnx = nx[chunk_start:stop]
        chunk_start = stop

        t = np.repeat(sel, cnt)
        offsets = np.arange(int(cnt.sum())) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        w_nx = np.repeat(cnx, cnt)
        col = x0[t].astype(np.int64) + offsets % w_nx
        row = y0[t].astype(np.int64) + offsets // w_nx
        px, py = col + 0.5, row + 0.5

        w0 = _edge(bx[t], by[t], cx[t], cy[t], px, py)
        w1 = _edge(cx[t], cy[t], ax[t], ay[t], px, py)
        w2 = _edge(ax[t], ay[t], bx[t], by[t], px, py)
        inside = (
            ((w0 > 0) | ((w0 == 0) & _owns_zero(bx[t], by[t], cx[t], cy[t])))
            & ((w1 > 0) | ((w1 == 0) & _owns_zero(cx[t], cy[t], ax[t], ay[t])))
            & ((w2 > 0) | ((w2 == 0) & _owns_zero(ax[t], ay[t], bx[t], by[t])))
        )
        if not inside.any():
            continue
        t, w0, w1, w2 = t[inside], w0[inside], w1[inside], w2[inside]
        pix = (row[inside] * W + col[inside])
        # perspective-correct: 1/z is affine in screen space
        inv_z = (w0 / za[t] + w1 / zb[t] + w2 / zc[t]) / area[t]
        depth = 1.0 / inv_z
        face = fid[t]

        order = np.lexsort((face, depth, pix))
        pix, depth, face = pix[order], depth[order], face[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, depth, face = pix[first], depth[first], face[first]

        cur_d, cur_f = best_depth[pix], best_face[pix]
        better = (depth < cur_d) | ((depth == cur_d) & (face < cur_f))
        best_depth[pix[better]] = depth[better]
        best_face[pix[better]] = face[better]

    return DepthMap(W, H, best_depth.reshape(H, W)), best_face.reshape(H, W)


def rasterize_depth(mesh: TriMesh, camera: Camera) -> DepthMap:
    return rasterize(mesh, camera)[0]
