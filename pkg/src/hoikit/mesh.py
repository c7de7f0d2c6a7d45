"""Triangle meshes, OBJ/PLY I/O, nearest-neighbour queries and Chamfer distance.

All coordinates are meters.  Vertex labels, when present, use 0 for human
and 1 for object.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

HUMAN = 0
OBJECT = 1


class MeshError(ValueError):
    """Mesh violates a structural invariant."""


class MeshIOError(Exception):
    """Base class for mesh file errors."""


class MeshReadError(MeshIOError):
    """The file could not be opened, read or written."""


class MeshFormatError(MeshIOError):
    """Malformed file content.  ``location`` is e.g. ``"line 12"`` or ``"byte 340"``."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{message} ({location})" if location else message)


class FaceIndexError(MeshIOError):
    """A face references a vertex that does not exist."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{message} ({location})" if location else message)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates must be finite")
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError(f"face index out of range for {len(v)} vertices")
            degenerate = (f[:, 0] == f[:, 1]) & (f[:, 1] == f[:, 2])
            if degenerate.any():
                raise MeshError(f"degenerate face at index {int(np.argmax(degenerate))}")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        if self.vertex_labels is not None:
            lab = np.asarray(self.vertex_labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(v):
                raise MeshError(f"{len(lab)} labels for {len(v)} vertices")
            object.__setattr__(self, "vertex_labels", _frozen(lab))

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return self.n_vertices == 0

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.vertex_labels)

    def with_labels(self, labels: Optional[np.ndarray]) -> "TriMesh":
        return TriMesh(self.vertices, self.faces, labels)

    def translated(self, offset) -> "TriMesh":
        return self.with_vertices(self.vertices + np.asarray(offset, dtype=np.float64))

    def aabb(self) -> "Aabb":
        return Aabb.of_points(self.vertices)

    def submesh(self, face_mask: np.ndarray) -> Tuple["TriMesh", np.ndarray]:
        """Keep the selected faces and only the vertices they reference.

        Returns the new mesh and the original index of every kept vertex
        (ascending, so relative vertex order is preserved).
        """
        faces = self.faces[np.asarray(face_mask, dtype=bool)]
        used = np.unique(faces)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        labels = None if self.vertex_labels is None else self.vertex_labels[used]
        return TriMesh(self.vertices[used], remap[faces], labels), used

    def equals(self, other: "TriMesh", atol: float = 0.0) -> bool:
        if self.vertices.shape != other.vertices.shape or not np.array_equal(self.faces, other.faces):
            return False
        if (self.vertex_labels is None) != (other.vertex_labels is None):
            return False
        if self.vertex_labels is not None and not np.array_equal(self.vertex_labels, other.vertex_labels):
            return False
        return bool(np.allclose(self.vertices, other.vertices, rtol=0.0, atol=atol))


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise MeshError("Aabb min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def of_points(cls, points: np.ndarray) -> "Aabb":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise MeshError("bounding box of an empty point set")
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))


# ---------------------------------------------------------------------------
# Nearest-neighbour queries
# ---------------------------------------------------------------------------

class SpatialIndex:
    """Exact nearest-point queries with lowest-index tie-breaking.

    A KD-tree proposes candidates; the winner is chosen by recomputing squared
    distances for every candidate within a small slack of the best one, so the
    result equals a brute-force ``argmin`` over ``(distance, index)``.
    """

    _K = 4

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.points = _frozen(pts)
        self._tree = cKDTree(pts) if len(pts) else None

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest point for each query row.  Returns ``(indices, distances)``."""
        if self._tree is None:
            raise MeshError("query on an empty SpatialIndex")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(q) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        k = min(self._K, len(self.points))
        d, idx = self._tree.query(q, k=k)
        d = d.reshape(len(q), k)
        idx = idx.reshape(len(q), k).astype(np.int64)

        # exact squared distances for the k candidates
        d2 = np.sum((self.points[idx] - q[:, None, :]) ** 2, axis=2)
        best = d2.min(axis=1)
        slack = best * 1e-9 + 1e-24
        close = d2 <= (best + slack)[:, None]
        # among candidates with the exact minimum, take the lowest index
        exact = d2 == d2.min(axis=1, keepdims=True)
        out = np.where(exact, idx, np.iinfo(np.int64).max).min(axis=1)

        # if every one of the k neighbours is tied, more may hide beyond k
        overflow = close.all(axis=1) & (k < len(self.points))
        for i in np.flatnonzero(overflow):
            r = np.sqrt(best[i] + slack[i]) * (1 + 1e-9) + 1e-12
            ball = np.asarray(self._tree.query_ball_point(q[i], r), dtype=np.int64)
            bd2 = np.sum((self.points[ball] - q[i]) ** 2, axis=1)
            out[i] = ball[bd2 == bd2.min()].min()
        dist = np.sqrt(np.sum((self.points[out] - q) ** 2, axis=1))
        return out, dist

    def nearest(self, query) -> Tuple[int, float]:
        idx, dist = self.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(dist[0])

    def within(self, query, radius: float) -> np.ndarray:
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.asarray(self._tree.query_ball_point(np.asarray(query, float), radius), dtype=np.int64))


def nearest_vertex(index: SpatialIndex, query) -> Tuple[int, float]:
    return index.nearest(query)


def nearest_distances(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Distance from every source point to its nearest target point."""
    return SpatialIndex(target).query(source)[1]


def one_directional_chamfer(source: TriMesh, target: TriMesh) -> float:
    """Mean over source vertices of the distance to the nearest target vertex."""
    if source.is_empty() or target.is_empty():
        raise MeshError("Chamfer distance needs two nonempty meshes")
    return float(np.mean(nearest_distances(source.vertices, target.vertices)))


def format_cm(meters: float) -> str:
    """``0.016`` -> ``"1.60cm"``."""
    return f"{meters * 100:.2f}cm"


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def load_mesh(path: PathLike) -> TriMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".obj", ".ply"):
        raise MeshFormatError(f"unsupported mesh extension {suffix!r}", str(path))
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise MeshReadError(f"cannot read {path}: {exc}") from exc
    if suffix == ".obj":
        return _parse_obj(data)
    return _parse_ply(data)


def save_mesh(mesh: TriMesh, path: PathLike) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        payload = _format_obj(mesh)
    elif suffix == ".ply":
        payload = _format_ply(mesh)
    else:
        raise MeshFormatError(f"unsupported mesh extension {suffix!r}", str(path))
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise MeshReadError(f"cannot write {path}: {exc}") from exc


# OBJ ------------------------------------------------------------------------

# labels are stored as comment lines so other OBJ readers ignore them
_OBJ_LABEL_TAG = "#label"


def _parse_obj(data: bytes) -> TriMesh:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MeshFormatError("OBJ is not valid UTF-8", f"byte {exc.start}") from exc
    verts = []
    faces = []
    face_lines = []
    labels = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(_OBJ_LABEL_TAG + " "):
            try:
                labels.append(int(line.split()[1]))
            except (IndexError, ValueError):
                raise MeshFormatError("bad label line", f"line {lineno}") from None
            continue
        if line[0] == "#":
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise MeshFormatError("bad vertex coordinate", f"line {lineno}") from None
            if len(parts) < 4:
                raise MeshFormatError("vertex needs 3 coordinates", f"line {lineno}")
        elif tag == "f":
            if len(parts) < 4:
                raise MeshFormatError("face needs at least 3 vertices", f"line {lineno}")
            idx = []
            for token in parts[1:]:
                try:
                    i = int(token.split("/")[0])
                except ValueError:
                    raise MeshFormatError(f"bad face index {token!r}", f"line {lineno}") from None
                if i == 0:
                    raise FaceIndexError("OBJ indices are 1-based; got 0", f"line {lineno}")
                # negative indices count back from the latest vertex
                idx.append(i - 1 if i > 0 else len(verts) + i)
            # fan-triangulate polygons
            for j in range(1, len(idx) - 1):
                faces.append((idx[0], idx[j], idx[j + 1]))
                face_lines.append(lineno)
        # vt, vn, g, o, s, usemtl, mtllib: pass-through ignored
    n = len(verts)
    for tri, lineno in zip(faces, face_lines):
        bad = [i for i in tri if i < 0 or i >= n]
        if bad:
            raise FaceIndexError(f"face index {bad[0] + 1} out of range for {n} vertices", f"line {lineno}")
        if tri[0] == tri[1] == tri[2]:
            raise MeshFormatError("degenerate face", f"line {lineno}")
    if labels and len(labels) != n:
        raise MeshFormatError(f"{len(labels)} labels for {n} vertices", "end of file")
    return TriMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(labels, dtype=np.int64) if labels else None,
    )


def _format_obj(mesh: TriMesh) -> bytes:
    lines = [f"# {mesh.n_vertices} vertices, {mesh.n_faces} faces"]
    lines += ["v {!r} {!r} {!r}".format(*map(float, v)) for v in mesh.vertices]
    if mesh.vertex_labels is not None:
        lines += [f"{_OBJ_LABEL_TAG} {int(l)}" for l in mesh.vertex_labels]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return ("\n".join(lines) + "\n").encode("utf-8")


# PLY ------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class _PlyProperty:
    name: str
    dtype: str
    count_dtype: Optional[str] = None  # set for list properties


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError("missing PLY magic or end_header", "byte 0")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for lineno, line in enumerate(header, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        where = f"header line {lineno}"
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise MeshFormatError(f"unknown PLY format {line!r}", where)
            fmt = parts[1]
        elif parts[0] == "element":
            try:
                elements.append(_PlyElement(parts[1], int(parts[2]), []))
            except (IndexError, ValueError):
                raise MeshFormatError(f"bad element line {line!r}", where) from None
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError("property before any element", where)
            try:
                if parts[1] == "list":
                    prop = _PlyProperty(parts[4], _PLY_TYPES[parts[3]], _PLY_TYPES[parts[2]])
                else:
                    prop = _PlyProperty(parts[2], _PLY_TYPES[parts[1]])
            except (IndexError, KeyError):
                raise MeshFormatError(f"bad property line {line!r}", where) from None
            elements[-1].props.append(prop)
        else:
            raise MeshFormatError(f"unexpected header line {line!r}", where)
    if fmt is None:
        raise MeshFormatError("PLY header has no format line", "byte 0")
    return fmt, elements, body_start


def _parse_ply(data: bytes) -> TriMesh:
    fmt, elements, pos = _parse_ply_header(data)
    tables = {}
    if fmt == "ascii":
        tokens_text = data[pos:].decode("ascii", errors="replace").splitlines()
        row = 0
        for el in elements:
            rows = []
            for _ in range(el.count):
                while row < len(tokens_text) and not tokens_text[row].strip():
                    row += 1
                if row >= len(tokens_text):
                    raise MeshFormatError(f"unexpected end of {el.name} data", f"body line {row + 1}")
                tokens = tokens_text[row].split()
                try:
                    rows.append(_ascii_row(el, tokens))
                except (ValueError, IndexError):
                    raise MeshFormatError(f"bad {el.name} row", f"body line {row + 1}") from None
                row += 1
            tables[el.name] = rows
    else:
        order = "<" if fmt == "binary_little_endian" else ">"
        for el in elements:
            tables[el.name], pos = _binary_element(data, pos, el, order)
    return _assemble_ply(elements, tables)


def _ascii_row(el: _PlyElement, tokens):
    out = {}
    i = 0
    for p in el.props:
        if p.count_dtype is None:
            out[p.name] = float(tokens[i]) if p.dtype[0] == "f" else int(tokens[i])
            i += 1
        else:
            n = int(tokens[i])
            out[p.name] = [int(t) for t in tokens[i + 1:i + 1 + n]]
            if len(out[p.name]) != n:
                raise ValueError("short list")
            i += 1 + n
    return out


def _binary_element(data: bytes, pos: int, el: _PlyElement, order: str):
    if all(p.count_dtype is None for p in el.props):
        dt = np.dtype([(p.name, order + p.dtype) for p in el.props])
        nbytes = dt.itemsize * el.count
        if pos + nbytes > len(data):
            raise MeshFormatError(f"truncated {el.name} data", f"byte {len(data)}")
        arr = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
        return arr, pos + nbytes
    # fast path: a single list property whose rows are all triangles
    if len(el.props) == 1 and el.count:
        p = el.props[0]
        dt = np.dtype([("n", order + p.count_dtype), ("i", order + p.dtype, (3,))])
        nbytes = dt.itemsize * el.count
        if pos + nbytes <= len(data):
            arr = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
            if np.all(arr["n"] == 3):
                return {p.name: arr["i"].astype(np.int64)}, pos + nbytes
    rows = []
    for _ in range(el.count):
        row = {}
        for p in el.props:
            if p.count_dtype is None:
                size = np.dtype(p.dtype).itemsize
                if pos + size > len(data):
                    raise MeshFormatError(f"truncated {el.name} data", f"byte {pos}")
                row[p.name] = np.frombuffer(data, order + p.dtype, 1, pos)[0]
                pos += size
            else:
                csize = np.dtype(p.count_dtype).itemsize
                if pos + csize > len(data):
                    raise MeshFormatError(f"truncated {el.name} data", f"byte {pos}")
                n = int(np.frombuffer(data, order + p.count_dtype, 1, pos)[0])
                pos += csize
                size = np.dtype(p.dtype).itemsize * n
                if pos + size > len(data):
                    raise MeshFormatError(f"truncated {el.name} list", f"byte {pos}")
                row[p.name] = np.frombuffer(data, order + p.dtype, n, pos).astype(np.int64).tolist()
                pos += size
        rows.append(row)
    return rows, pos


def _column(table, name):
    if isinstance(table, np.ndarray):
        return table[name]
    if isinstance(table, dict):
        return table[name]
    return np.array([r[name] for r in table])


def _assemble_ply(elements, tables) -> TriMesh:
    names = {el.name: el for el in elements}
    if "vertex" not in names:
        raise MeshFormatError("PLY has no vertex element", "header")
    vel = names["vertex"]
    vnames = [p.name for p in vel.props]
    for axis in "xyz":
        if axis not in vnames:
            raise MeshFormatError(f"vertex element lacks property {axis!r}", "header")
    vt = tables["vertex"]
    if vel.count:
        verts = np.stack([np.asarray(_column(vt, a), dtype=np.float64) for a in "xyz"], axis=1)
    else:
        verts = np.zeros((0, 3))
    labels = None
    if "label" in vnames:
        labels = np.asarray(_column(vt, "label"), dtype=np.int64) if vel.count else np.zeros(0, np.int64)

    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in names and names["face"].count:
        fel = names["face"]
        lists = [p for p in fel.props if p.count_dtype is not None]
        if not lists:
            raise MeshFormatError("face element has no index list", "header")
        key = lists[0].name
        ft = tables["face"]
        if isinstance(ft, dict):
            faces = ft[key]
        else:
            tris = []
            for k, r in enumerate(ft):
                poly = r[key]
                if len(poly) < 3:
                    raise MeshFormatError("face with fewer than 3 vertices", f"face {k}")
                tris += [(poly[0], poly[j], poly[j + 1]) for j in range(1, len(poly) - 1)]
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if len(faces):
        bad = (faces < 0) | (faces >= len(verts))
        if bad.any():
            k = int(np.argmax(bad.any(axis=1)))
            raise FaceIndexError(
                f"face index {int(faces[k][bad[k]][0])} out of range for {len(verts)} vertices", f"face {k}"
            )
        degenerate = (faces[:, 0] == faces[:, 1]) & (faces[:, 1] == faces[:, 2])
        if degenerate.any():
            raise MeshFormatError("degenerate face", f"face {int(np.argmax(degenerate))}")
    return TriMesh(verts, faces, labels)


def _format_ply(mesh: TriMesh, binary: bool = True) -> bytes:
    head = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if mesh.vertex_labels is not None:
        head.append("property int label")
    head += [
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    header = ("\n".join(head) + "\n").encode("ascii")
    if not binary:
        rows = []
        for i, v in enumerate(mesh.vertices):
            row = " ".join(repr(float(x)) for x in v)
            if mesh.vertex_labels is not None:
                row += f" {int(mesh.vertex_labels[i])}"
            rows.append(row)
        rows += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
        return header + ("\n".join(rows) + "\n").encode("ascii") if rows else header

    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if mesh.vertex_labels is not None:
        fields.append(("label", "<i4"))
    vt = np.zeros(mesh.n_vertices, dtype=fields)
    for k, axis in enumerate("xyz"):
        vt[axis] = mesh.vertices[:, k]
    if mesh.vertex_labels is not None:
        vt["label"] = mesh.vertex_labels
    ft = np.zeros(mesh.n_faces, dtype=[("n", "u1"), ("i", "<i4", (3,))])
    ft["n"] = 3
    ft["i"] = mesh.faces
    return header + vt.tobytes() + ft.tobytes()


def save_ply_ascii(mesh: TriMesh, path: PathLike) -> None:
    Path(path).write_bytes(_format_ply(mesh, binary=False))
