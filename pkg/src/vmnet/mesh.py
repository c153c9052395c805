"""Triangular surface meshes: storage, PLY/OBJ I/O, one-ring adjacency, edge sampling."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed."""


class MeshValidationError(ValueError):
    """Raised when mesh data violates a structural invariant."""


# 21-entry label palette (RGB, 0-255) used when writing predictions.
PALETTE = np.array(
    [
        [174, 199, 232], [152, 223, 138], [31, 119, 180], [255, 187, 120],
        [188, 189, 34], [140, 86, 75], [255, 152, 150], [214, 39, 40],
        [197, 176, 213], [148, 103, 189], [196, 156, 148], [23, 190, 207],
        [247, 182, 210], [219, 219, 141], [255, 127, 14], [158, 218, 229],
        [44, 160, 44], [112, 128, 144], [227, 119, 194], [82, 84, 163],
        [0, 0, 0],
    ],
    dtype=np.uint8,
)


def edges_from_faces(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges (sorted pairs, lexicographic order) of a face array."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True)
class Adjacency:
    """Symmetric CSR neighbor table. Row i lists N_i in ascending order."""

    indptr: np.ndarray
    indices: np.ndarray

    @property
    def num_vertices(self) -> int:
        return len(self.indptr) - 1

    @property
    def centers(self) -> np.ndarray:
        """Center vertex of every directed edge, aligned with ``indices``."""
        return np.repeat(np.arange(self.num_vertices), np.diff(self.indptr))

    def ring(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @classmethod
    def from_edges(cls, edges: np.ndarray, n: int, self_loops: bool = False) -> "Adjacency":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        src = np.concatenate([edges[:, 0], edges[:, 1]])
        dst = np.concatenate([edges[:, 1], edges[:, 0]])
        if self_loops:
            loop = np.arange(n, dtype=np.int64)
            src = np.concatenate([src, loop])
            dst = np.concatenate([dst, loop])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        if len(src):
            keep = np.ones(len(src), dtype=bool)
            keep[1:] = (src[1:] != src[:-1]) | (dst[1:] != dst[:-1])
            src, dst = src[keep], dst[keep]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
        return cls(indptr=indptr, indices=dst)

    def with_self_loops(self) -> "Adjacency":
        c = self.centers
        mask = c < self.indices
        return Adjacency.from_edges(np.stack([c[mask], self.indices[mask]], 1),
                                    self.num_vertices, self_loops=True)


@dataclass(frozen=True)
class EdgeSet:
    """Undirected edges as sorted (i, j) pairs with i < j."""

    edges: np.ndarray
    num_vertices: int

    def adjacency(self, self_loops: bool = False) -> Adjacency:
        return Adjacency.from_edges(self.edges, self.num_vertices, self_loops)

    def __len__(self) -> int:
        return len(self.edges)


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    positions: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = len(pos)
        if self.colors is None:
            colors = np.full((n, 3), 0.5)
        else:
            colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(colors) != n:
            raise MeshValidationError(f"{len(colors)} colors for {n} vertices")
        labels = self.labels
        if labels is not None:
            labels = np.ascontiguousarray(labels, dtype=np.int64).reshape(-1)
            if len(labels) != n:
                raise MeshValidationError(f"{len(labels)} labels for {n} vertices")
        if len(faces):
            if faces.min() < 0 or faces.max() >= n:
                raise MeshValidationError(
                    f"face index out of range [0, {n}): min={faces.min()}, max={faces.max()}")
            if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                      | (faces[:, 0] == faces[:, 2])):
                raise MeshValidationError("degenerate face (repeated vertex index)")
        for name, value in (("positions", pos), ("faces", faces), ("colors", colors),
                            ("labels", labels)):
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "_edges", None)
        object.__setattr__(self, "_adj", None)

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def edges(self) -> np.ndarray:
        if self._edges is None:
            e = edges_from_faces(self.faces)
            e.setflags(write=False)
            object.__setattr__(self, "_edges", e)
        return self._edges

    @property
    def adjacency(self) -> Adjacency:
        if self._adj is None:
            object.__setattr__(self, "_adj", Adjacency.from_edges(self.edges, self.num_vertices))
        return self._adj

    def edge_set(self) -> EdgeSet:
        return EdgeSet(self.edges, self.num_vertices)

    def replace(self, **kw) -> "SurfaceMesh":
        args = dict(positions=self.positions, faces=self.faces, colors=self.colors,
                    labels=self.labels)
        args.update(kw)
        return SurfaceMesh(**args)


def one_ring(mesh: SurfaceMesh, i: int) -> list[int]:
    """Sorted one-ring neighbors of vertex ``i`` (never contains ``i``)."""
    if not 0 <= i < mesh.num_vertices:
        raise MeshValidationError(f"vertex index {i} out of range [0, {mesh.num_vertices})")
    return mesh.adjacency.ring(i).tolist()


def sample_edges(mesh: SurfaceMesh, keep_probability: float, seed) -> EdgeSet:
    """Keep each undirected edge independently with ``keep_probability``."""
    if not 0.0 < keep_probability <= 1.0:
        raise ValueError(f"keep_probability must be in (0, 1], got {keep_probability}")
    edges = mesh.edges
    if keep_probability == 1.0:
        return EdgeSet(edges, mesh.num_vertices)
    rng = np.random.default_rng(seed)
    keep = rng.random(len(edges)) < keep_probability
    return EdgeSet(edges[keep], mesh.num_vertices)


def project_labels(fine, coarse_prediction, mapping) -> np.ndarray:
    """Give each fine vertex the predicted class of the coarse vertex it maps to.

    ``fine`` is the fine SurfaceMesh (or its vertex count); ``mapping`` is a
    TraceMap or an integer array fine -> coarse.
    """
    num_fine = fine.num_vertices if isinstance(fine, SurfaceMesh) else int(fine)
    fine_to_coarse = getattr(mapping, "fine_to_coarse", mapping)
    fine_to_coarse = np.asarray(fine_to_coarse, dtype=np.int64)
    pred = np.asarray(coarse_prediction, dtype=np.int64)
    if len(fine_to_coarse) != num_fine:
        raise MeshValidationError(
            f"mapping covers {len(fine_to_coarse)} vertices, mesh has {num_fine}")
    if np.any(fine_to_coarse < 0) or np.any(fine_to_coarse >= len(pred)):
        raise MeshValidationError("mapping leaves fine vertices uncovered")
    return pred[fine_to_coarse]


def nearest_vertex_map(fine_positions: np.ndarray, coarse_positions: np.ndarray) -> np.ndarray:
    from scipy.spatial import cKDTree

    _, idx = cKDTree(coarse_positions).query(fine_positions)
    return np.asarray(idx, dtype=np.int64)


# ---------------------------------------------------------------------------
# I/O

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError("not a PLY file (missing 'ply' magic or 'end_header'), offset 0")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements = []
    for lineno, raw in enumerate(data[:end].decode("ascii", "replace").splitlines(), 1):
        tok = raw.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError(f"line {lineno}: property before element")
            if tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise MeshFormatError(f"line {lineno}: unknown list type")
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise MeshFormatError(f"line {lineno}: unknown property type {tok[1]!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise MeshFormatError(f"line {lineno}: unexpected header keyword {tok[0]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_start, data[:body_start].count(b"\n")


def _read_ply_ascii(text_lines, elements, first_line):
    out = {}
    pos = 0
    for name, count, props in elements:
        rows = []
        for k in range(count):
            if pos >= len(text_lines):
                raise MeshFormatError(f"line {first_line + pos + 1}: unexpected end of file")
            tok = text_lines[pos].split()
            pos += 1
            vals, t = {}, 0
            try:
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        n = int(tok[t])
                        vals[pname] = [int(float(v)) for v in tok[t + 1:t + 1 + n]]
                        if len(vals[pname]) != n:
                            raise IndexError
                        t += 1 + n
                    else:
                        vals[pname] = float(tok[t])
                        t += 1
            except (IndexError, ValueError):
                raise MeshFormatError(
                    f"line {first_line + pos}: malformed {name} record") from None
            rows.append(vals)
        out[name] = rows
    return out


def _read_ply_binary(body: bytes, elements, offset0):
    out = {}
    off = 0
    for name, count, props in elements:
        if all(not isinstance(p[1], tuple) for p in props):
            dt = np.dtype([(p, "<" + t) for p, t in props])
            need = dt.itemsize * count
            if off + need > len(body):
                raise MeshFormatError(f"offset {offset0 + off}: truncated {name} block")
            arr = np.frombuffer(body, dtype=dt, count=count, offset=off)
            off += need
            out[name] = [{p: arr[p][k] for p, _ in props} for k in range(count)] \
                if name != "vertex" else arr
            continue
        rows = []
        for _ in range(count):
            vals = {}
            for pname, ptype in props:
                try:
                    if isinstance(ptype, tuple):
                        cdt, idt = np.dtype("<" + ptype[1]), np.dtype("<" + ptype[2])
                        n = int(np.frombuffer(body, cdt, 1, off)[0])
                        off += cdt.itemsize
                        vals[pname] = np.frombuffer(body, idt, n, off).astype(np.int64).tolist()
                        off += idt.itemsize * n
                    else:
                        d = np.dtype("<" + ptype)
                        vals[pname] = np.frombuffer(body, d, 1, off)[0]
                        off += d.itemsize
                except ValueError:
                    raise MeshFormatError(
                        f"offset {offset0 + off}: truncated {name} record") from None
            rows.append(vals)
        out[name] = rows
    return out


def _column(rows, key, dtype=np.float64):
    if isinstance(rows, np.ndarray):
        return rows[key].astype(dtype)
    return np.array([r[key] for r in rows], dtype=dtype)


def _triangulate(polys) -> np.ndarray:
    tris = []
    for p in polys:
        for k in range(1, len(p) - 1):
            tris.append((p[0], p[k], p[k + 1]))
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def read_ply(path) -> SurfaceMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, body_start, header_lines = _parse_header(data)
    if fmt == "ascii":
        lines = [ln for ln in data[body_start:].decode("ascii", "replace").splitlines()
                 if ln.strip()]
        parsed = _read_ply_ascii(lines, elements, header_lines)
    else:
        parsed = _read_ply_binary(data[body_start:], elements, body_start)
    if "vertex" not in parsed:
        raise MeshFormatError("PLY has no vertex element")
    v = parsed["vertex"]
    vnames = [p for p, _ in next(e for e in elements if e[0] == "vertex")[2]]
    for k in ("x", "y", "z"):
        if k not in vnames:
            raise MeshFormatError(f"vertex element lacks property {k!r}")
    pos = np.stack([_column(v, k) for k in ("x", "y", "z")], 1) if len(v) else np.zeros((0, 3))
    colors = None
    if all(k in vnames for k in ("red", "green", "blue")) and len(v):
        colors = np.stack([_column(v, k) for k in ("red", "green", "blue")], 1) / 255.0
    labels = _column(v, "label", np.int64) if "label" in vnames and len(v) else None
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in parsed:
        fprops = next(e for e in elements if e[0] == "face")[2]
        key = next((p for p, t in fprops if isinstance(t, tuple)), None)
        if key is None:
            raise MeshFormatError("face element has no index list")
        faces = _triangulate([r[key] for r in parsed["face"]])
    return SurfaceMesh(pos, faces, colors, labels)


def read_obj(path) -> SurfaceMesh:
    pos, polys = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok:
                continue
            try:
                if tok[0] == "v":
                    pos.append([float(t) for t in tok[1:4]])
                    if len(pos[-1]) != 3:
                        raise ValueError
                elif tok[0] == "f":
                    idx = []
                    for t in tok[1:]:
                        k = int(t.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(pos) + k)
                    polys.append(idx)
            except ValueError:
                raise MeshFormatError(f"line {lineno}: malformed {tok[0]!r} record") from None
    return SurfaceMesh(np.array(pos, dtype=np.float64).reshape(-1, 3), _triangulate(polys))


def load_mesh(path, format: str | None = None) -> SurfaceMesh:
    """Load a PLY (ASCII or binary little-endian) or OBJ mesh."""
    if format is None:
        format = os.path.splitext(str(path))[1].lstrip(".").lower()
    if format == "ply":
        return read_ply(path)
    if format == "obj":
        return read_obj(path)
    raise MeshFormatError(f"unsupported mesh format {format!r}")


def label_colors(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= len(PALETTE)):
        raise MeshValidationError(
            f"class id outside palette range [0, {len(PALETTE)}): {labels.min()}..{labels.max()}")
    return PALETTE[labels]


def save_ply(path, mesh: SurfaceMesh, binary: bool = True, labels=None,
             colors_from_labels: bool = False) -> None:
    """Write a PLY with float x/y/z, uchar colors and an optional int label.

    Positions are written as float32; colors as uchar.  A mesh loaded back
    from this writer round-trips bit-exactly.
    """
    labels = mesh.labels if labels is None else np.asarray(labels, dtype=np.int64)
    if colors_from_labels:
        if labels is None:
            raise MeshValidationError("colors_from_labels requires labels")
        rgb = label_colors(labels)
    else:
        rgb = np.clip(np.rint(mesh.colors * 255.0), 0, 255).astype(np.uint8)
    n, m = mesh.num_vertices, mesh.num_faces
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
              ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if labels is not None:
        fields.append(("label", "<i4"))
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    header += [f"property {'float' if t == '<f4' else 'uchar' if t == 'u1' else 'int'} {k}"
               for k, t in fields]
    header += [f"element face {m}", "property list uchar int vertex_indices", "end_header"]
    vert = np.zeros(n, dtype=fields)
    for k, c in zip("xyz", mesh.positions.T):
        vert[k] = c
    for k, c in zip(("red", "green", "blue"), rgb.T):
        vert[k] = c
    if labels is not None:
        vert["label"] = labels
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(vert.tobytes())
            fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
            fa = np.zeros(m, dtype=fdt)
            fa["n"] = 3
            fa["i"] = mesh.faces
            fh.write(fa.tobytes())
        else:
            lines = []
            for row in vert:
                vals = [repr(float(row[k])) if t == "<f4" else str(int(row[k]))
                        for k, t in fields]
                lines.append(" ".join(vals))
            lines += ["3 %d %d %d" % tuple(f) for f in mesh.faces]
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))
    os.replace(tmp, path)


def save_obj(path, mesh: SurfaceMesh) -> None:
    with open(path, "w") as fh:
        for p in mesh.positions:
            fh.write("v %r %r %r\n" % tuple(float(c) for c in p))
        for f in mesh.faces:
            fh.write("f %d %d %d\n" % tuple(int(i) + 1 for i in f))


def connected_components(num_vertices: int, edges: np.ndarray) -> np.ndarray:
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components as cc

    edges = np.asarray(edges).reshape(-1, 2)
    g = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])),
                   shape=(num_vertices, num_vertices))
    return cc(g, directed=False)[1]


__all__ = [
    "Adjacency", "EdgeSet", "MeshFormatError", "MeshValidationError", "PALETTE", "SurfaceMesh",
    "connected_components", "edges_from_faces", "label_colors", "load_mesh",
    "nearest_vertex_map", "one_ring", "project_labels", "read_obj", "read_ply",
    "sample_edges", "save_obj", "save_ply",
]
