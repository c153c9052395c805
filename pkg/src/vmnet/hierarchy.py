"""Mesh hierarchies built by vertex clustering (VC) and quadric edge collapse (QEM).

Every simplification step returns a :class:`TraceMap` recording which coarse
vertex represents each fine vertex.  Trace maps drive unpooling in the
geodesic branch and label projection back to the input mesh.
"""

from __future__ import annotations

import heapq
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .mesh import MeshValidationError, SurfaceMesh, save_ply

DET_TOL = 1e-10


class HierarchyError(ValueError):
    pass


class QEMTargetWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class TraceMap:
    fine_to_coarse: np.ndarray
    coarse_count: int

    def __post_init__(self):
        f2c = np.ascontiguousarray(self.fine_to_coarse, dtype=np.int64)
        f2c.setflags(write=False)
        object.__setattr__(self, "fine_to_coarse", f2c)
        object.__setattr__(self, "coarse_count", int(self.coarse_count))

    @property
    def fine_count(self) -> int:
        return len(self.fine_to_coarse)

    def preimage_sizes(self) -> np.ndarray:
        return np.bincount(self.fine_to_coarse, minlength=self.coarse_count)

    def validate(self) -> None:
        """Check totality and surjectivity."""
        f2c = self.fine_to_coarse
        if len(f2c) and (f2c.min() < 0 or f2c.max() >= self.coarse_count):
            raise HierarchyError("trace map is not total: index outside coarse range")
        if np.any(self.preimage_sizes() == 0):
            raise HierarchyError("trace map is not surjective: coarse vertex without preimage")

    def compose(self, coarser: "TraceMap") -> "TraceMap":
        """Map fine -> coarser.coarse, i.e. apply self then ``coarser``."""
        if coarser.fine_count != self.coarse_count:
            raise HierarchyError(
                f"cannot compose traces: {self.coarse_count} != {coarser.fine_count}")
        return TraceMap(coarser.fine_to_coarse[self.fine_to_coarse], coarser.coarse_count)

    @classmethod
    def identity(cls, n: int) -> "TraceMap":
        return cls(np.arange(n), n)


def write_trace(path, trace: TraceMap) -> None:
    header = np.array([trace.fine_count, trace.coarse_count], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(trace.fine_to_coarse.astype("<u4").tobytes())


def read_trace(path) -> TraceMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise HierarchyError(f"{path}: trace file shorter than its header")
    fine, coarse = np.frombuffer(data, "<u4", 2)
    if len(data) != 8 + 4 * int(fine):
        raise HierarchyError(f"{path}: expected {fine} indices, got {(len(data) - 8) // 4}")
    t = TraceMap(np.frombuffer(data, "<u4", int(fine), 8).astype(np.int64), int(coarse))
    t.validate()
    return t


def _majority(labels: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    """Most frequent label per group; ties go to the smaller class id."""
    k = int(labels.max()) + 1 if len(labels) else 1
    counts = np.zeros((n_groups, k), dtype=np.int64)
    np.add.at(counts, (groups, labels), 1)
    return counts.argmax(axis=1)


def _clean_faces(faces: np.ndarray) -> np.ndarray:
    """Drop faces with repeated indices and duplicate vertex sets; keep first occurrence."""
    if len(faces) == 0:
        return faces.reshape(0, 3)
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    if len(faces) == 0:
        return faces.reshape(0, 3)
    _, first = np.unique(np.sort(faces, axis=1), axis=0, return_index=True)
    return faces[np.sort(first)]


def vertex_clustering(mesh: SurfaceMesh, cell_size: float) -> tuple[SurfaceMesh, TraceMap]:
    """Merge all vertices that fall into the same grid cell.

    The grid is anchored at the origin; cell ids are ``floor(x / cell_size)``.
    Output vertices are ordered by cell id and placed at member means.
    """
    if not cell_size > 0:
        raise ValueError(f"cell_size must be positive, got {cell_size}")
    if mesh.num_vertices == 0:
        raise MeshValidationError("vertex clustering of an empty mesh")
    cells = np.floor(mesh.positions / cell_size).astype(np.int64)
    _, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = int(inverse.max()) + 1
    counts = np.bincount(inverse, minlength=m).astype(np.float64)[:, None]
    pos = np.zeros((m, 3))
    col = np.zeros((m, 3))
    np.add.at(pos, inverse, mesh.positions)
    np.add.at(col, inverse, mesh.colors)
    labels = None
    if mesh.labels is not None:
        labels = _majority(mesh.labels, inverse, m)
    faces = _clean_faces(inverse[mesh.faces])
    coarse = SurfaceMesh(pos / counts, faces, col / counts, labels)
    return coarse, TraceMap(inverse, m)


# ---------------------------------------------------------------------------
# QEM

def _plane(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm < 1e-15:
        return None
    n = n / norm
    return np.append(n, -n @ p0)


def face_quadrics(mesh: SurfaceMesh, boundary_weight: float = 1.0) -> np.ndarray:
    """Per-vertex sum of plane quadrics, plus boundary constraint planes."""
    n = mesh.num_vertices
    Q = np.zeros((n, 4, 4))
    P = mesh.positions
    F = mesh.faces
    if len(F) == 0:
        return Q
    nrm = np.cross(P[F[:, 1]] - P[F[:, 0]], P[F[:, 2]] - P[F[:, 0]])
    ln = np.linalg.norm(nrm, axis=1)
    good = ln > 1e-15
    nrm = nrm[good] / ln[good, None]
    Fg = F[good]
    planes = np.concatenate([nrm, -np.einsum("ij,ij->i", nrm, P[Fg[:, 0]])[:, None]], 1)
    K = planes[:, :, None] * planes[:, None, :]
    for c in range(3):
        np.add.at(Q, Fg[:, c], K)
    if boundary_weight > 0:
        # directed edges of valid faces; an undirected edge used by exactly one face is boundary
        de = np.concatenate([Fg[:, [0, 1]], Fg[:, [1, 2]], Fg[:, [2, 0]]])
        owner = np.tile(np.arange(len(Fg)), 3)
        key = np.sort(de, axis=1)
        _, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        bmask = cnt[inv] == 1
        for (a, b), f in zip(de[bmask], owner[bmask]):
            d = P[b] - P[a]
            cn = np.cross(d, nrm[f])
            cl = np.linalg.norm(cn)
            if cl < 1e-15:
                continue
            cn /= cl
            pl = np.append(cn, -cn @ P[a])
            Kb = boundary_weight * np.outer(pl, pl)
            Q[a] += Kb
            Q[b] += Kb
    return Q


def optimal_point(Q: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> tuple[np.ndarray, float]:
    """Quadric-optimal placement for merging ``pa`` and ``pb``, and its cost."""
    A = Q[:3, :3]
    if abs(np.linalg.det(A)) > DET_TOL:
        v = np.linalg.solve(A, -Q[:3, 3])
        cost = float(np.append(v, 1.0) @ Q @ np.append(v, 1.0))
        return v, max(cost, 0.0)
    best = None
    for cand in (0.5 * (pa + pb), pa, pb):
        h = np.append(cand, 1.0)
        c = float(h @ Q @ h)
        if best is None or c < best[1]:
            best = (cand, c)
    return best[0].copy(), max(best[1], 0.0)


@dataclass
class QEMResult:
    mesh: SurfaceMesh
    trace: TraceMap
    costs: list = field(default_factory=list)
    reached_target: bool = True


class _QEMState:
    def __init__(self, mesh: SurfaceMesh, boundary_weight: float):
        n = mesh.num_vertices
        self.pos = mesh.positions.copy()
        self.Q = face_quadrics(mesh, boundary_weight)
        self.faces = mesh.faces.copy()
        self.face_alive = np.ones(len(self.faces), dtype=bool)
        self.vfaces = [set() for _ in range(n)]
        for fi, f in enumerate(self.faces):
            for v in f:
                self.vfaces[v].add(fi)
        self.nbrs = [set() for _ in range(n)]
        for a, b in mesh.edges:
            self.nbrs[a].add(int(b))
            self.nbrs[b].add(int(a))
        self.alive = np.ones(n, dtype=bool)
        self.parent = np.arange(n)
        self.version = np.zeros(n, dtype=np.int64)
        self.color_sum = mesh.colors.copy()
        self.count = np.ones(n)
        self.labels = None
        if mesh.labels is not None:
            k = int(mesh.labels.max()) + 1
            self.labels = np.zeros((n, k), dtype=np.int64)
            self.labels[np.arange(n), mesh.labels] = 1

    def candidate(self, a: int, b: int):
        Q = self.Q[a] + self.Q[b]
        v, cost = optimal_point(Q, self.pos[a], self.pos[b])
        return cost, v

    def legal(self, a: int, b: int, v: np.ndarray) -> bool:
        """Reject collapses that flip an incident face normal by more than 90 degrees."""
        for keep, gone in ((a, b), (b, a)):
            for fi in self.vfaces[gone]:
                f = self.faces[fi]
                if keep in f:
                    continue
                p = self.pos[f]
                old = np.cross(p[1] - p[0], p[2] - p[0])
                q = p.copy()
                q[list(f).index(gone)] = v
                new = np.cross(q[1] - q[0], q[2] - q[0])
                if old @ new <= 0.0 and np.linalg.norm(old) > 1e-15:
                    return False
        return True

    def collapse(self, a: int, b: int, v: np.ndarray) -> None:
        """Merge ``b`` into ``a`` (a < b) and place the survivor at ``v``."""
        self.pos[a] = v
        self.Q[a] = self.Q[a] + self.Q[b]
        self.color_sum[a] += self.color_sum[b]
        self.count[a] += self.count[b]
        if self.labels is not None:
            self.labels[a] += self.labels[b]
        self.alive[b] = False
        self.parent[b] = a
        for fi in list(self.vfaces[b]):
            f = self.faces[fi]
            if a in f:
                self._kill_face(fi)
                continue
            f[f == b] = a
            self.vfaces[a].add(fi)
        self.vfaces[b].clear()
        # drop faces that now duplicate another face of a
        seen = {}
        for fi in sorted(self.vfaces[a]):
            key = tuple(sorted(self.faces[fi]))
            if key in seen:
                self._kill_face(fi)
            else:
                seen[key] = fi
        for c in self.nbrs[b]:
            self.nbrs[c].discard(b)
            if c != a:
                self.nbrs[c].add(a)
                self.nbrs[a].add(c)
        self.nbrs[a].discard(b)
        self.nbrs[b] = set()
        self.version[a] += 1
        self.version[b] += 1

    def _kill_face(self, fi: int) -> None:
        self.face_alive[fi] = False
        for u in self.faces[fi]:
            self.vfaces[u].discard(fi)

    def root(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i


def qem_simplify(mesh: SurfaceMesh, target_vertex_count: int,
                 boundary_weight: float = 1.0) -> QEMResult:
    """Greedy minimum-cost edge collapse down to ``target_vertex_count`` vertices.

    Ties in cost are broken by the lowest (min id, max id) pair.  If no legal
    collapse remains the result is returned early with ``reached_target=False``.
    """
    n = mesh.num_vertices
    if not 0 < target_vertex_count < n:
        raise ValueError(f"target_vertex_count must be in (0, {n}), got {target_vertex_count}")
    st = _QEMState(mesh, boundary_weight)
    heap = []

    def push(a, b):
        if a > b:
            a, b = b, a
        cost, _ = st.candidate(a, b)
        heapq.heappush(heap, (cost, a, b, st.version[a], st.version[b]))

    for a, b in mesh.edges:
        push(int(a), int(b))
    remaining = n
    costs = []
    while remaining > target_vertex_count and heap:
        cost, a, b, va, vb = heapq.heappop(heap)
        if not (st.alive[a] and st.alive[b]) or st.version[a] != va or st.version[b] != vb:
            continue
        if b not in st.nbrs[a]:
            continue
        _, v = st.candidate(a, b)
        if not st.legal(a, b, v):
            continue
        st.collapse(a, b, v)
        costs.append(cost)
        remaining -= 1
        for c in st.nbrs[a]:
            push(a, c)
    reached = remaining <= target_vertex_count
    if not reached:
        warnings.warn(f"QEM stopped at {remaining} vertices (target {target_vertex_count}): "
                      "no legal collapse left", QEMTargetWarning, stacklevel=2)
    survivors = np.flatnonzero(st.alive)
    new_index = -np.ones(n, dtype=np.int64)
    new_index[survivors] = np.arange(len(survivors))
    f2c = new_index[[st.root(i) for i in range(n)]]
    faces = _clean_faces(new_index[st.faces[st.face_alive]])
    colors = st.color_sum[survivors] / st.count[survivors, None]
    labels = None
    if st.labels is not None:
        labels = st.labels[survivors].argmax(axis=1)
    coarse = SurfaceMesh(st.pos[survivors], faces, colors, labels)
    return QEMResult(coarse, TraceMap(f2c, len(survivors)), costs, reached)


# ---------------------------------------------------------------------------
# Hierarchy

@dataclass(frozen=True)
class HierarchySpec:
    """How to build M^0..M^L.

    ``method`` is ``vc_qem`` (VC for the first ``len(vc_cell_sizes)`` levels,
    QEM after), ``vc_only`` (VC with the cell doubling per level, matched to
    voxel strides) or ``qem_only`` (QEM from M^0 onward).  M^0 is always VC of
    the input at the base cell size so that it aligns with the finest voxels.
    """

    levels: int = 3
    method: str = "vc_qem"
    vc_cell_sizes: tuple = (0.02, 0.04)
    qem_ratio: float = 0.30
    vc_from_original: bool = False
    min_vertices: int = 4

    def __post_init__(self):
        if self.levels < 2:
            raise HierarchyError(f"level count must be >= 2, got {self.levels}")
        if self.method not in ("vc_qem", "vc_only", "qem_only"):
            raise HierarchyError(f"unknown hierarchy method {self.method!r}")
        if not 0 < self.qem_ratio < 1:
            raise HierarchyError(f"qem_ratio must be in (0, 1), got {self.qem_ratio}")

    @classmethod
    def for_voxel_size(cls, voxel_size: float, levels: int, method: str = "vc_qem", **kw):
        return cls(levels=levels, method=method,
                   vc_cell_sizes=(voxel_size, 2 * voxel_size), **kw)

    def level_plan(self) -> list[tuple[str, float]]:
        base = self.vc_cell_sizes[0]
        plan = []
        for lvl in range(self.levels):
            if lvl == 0:
                plan.append(("vc", base))
            elif self.method == "vc_only":
                plan.append(("vc", base * 2 ** lvl))
            elif self.method == "qem_only":
                plan.append(("qem", self.qem_ratio))
            elif lvl < len(self.vc_cell_sizes):
                plan.append(("vc", self.vc_cell_sizes[lvl]))
            else:
                plan.append(("qem", self.qem_ratio))
        return plan


@dataclass(frozen=True)
class MeshHierarchy:
    """Levels M^0..M^L, ``traces[t]`` linking level t-1 to level t (t >= 1).

    ``base_trace`` maps the input mesh onto M^0.
    """

    levels: list
    traces: list
    methods: list
    base_trace: TraceMap

    @property
    def depth(self) -> int:
        return len(self.levels)

    def trace(self, t: int) -> TraceMap:
        """Trace from level t-1 to level t."""
        return self.traces[t - 1]

    def composed_trace(self, start: int = 0, stop: int | None = None) -> TraceMap:
        stop = self.depth - 1 if stop is None else stop
        tr = TraceMap.identity(self.levels[start].num_vertices)
        for t in range(start + 1, stop + 1):
            tr = tr.compose(self.trace(t))
        return tr

    def stats(self) -> list[dict]:
        return [dict(level=i, vertices=m.num_vertices, faces=m.num_faces, method=tag)
                for i, (m, tag) in enumerate(zip(self.levels, self.methods))]

    def save(self, out_dir) -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        written = []
        for i, m in enumerate(self.levels):
            p = os.path.join(out_dir, f"level_{i}.ply")
            save_ply(p, m)
            written.append(p)
        for t, tr in enumerate(self.traces, 1):
            p = os.path.join(out_dir, f"trace_{t - 1}_{t}.bin")
            write_trace(p, tr)
            written.append(p)
        p = os.path.join(out_dir, "trace_input_0.bin")
        write_trace(p, self.base_trace)
        written.append(p)
        return written


def build_hierarchy(mesh: SurfaceMesh, spec: HierarchySpec | None = None) -> MeshHierarchy:
    spec = spec or HierarchySpec()
    plan = spec.level_plan()
    m0, base = vertex_clustering(mesh, plan[0][1])
    levels, traces, methods = [m0], [], ["vc"]
    for lvl in range(1, spec.levels):
        prev = levels[-1]
        kind, arg = plan[lvl]
        if kind == "vc":
            if spec.vc_from_original and spec.method == "vc_qem":
                # cluster the raw input, then express the trace relative to M^{l-1}
                coarse, tr_in = vertex_clustering(mesh, arg)
                comp = base
                for t in traces:
                    comp = comp.compose(t)
                f2c = np.zeros(prev.num_vertices, dtype=np.int64)
                f2c[comp.fine_to_coarse] = tr_in.fine_to_coarse
                tr = TraceMap(f2c, coarse.num_vertices)
                tr.validate()
            else:
                coarse, tr = vertex_clustering(prev, arg)
        else:
            target = math.ceil(arg * prev.num_vertices)
            if target < spec.min_vertices or target >= prev.num_vertices:
                raise HierarchyError(
                    f"level {lvl}: QEM target {target} from {prev.num_vertices} vertices "
                    f"is below the {spec.min_vertices}-vertex floor")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", QEMTargetWarning)
                res = qem_simplify(prev, target)
            coarse, tr = res.mesh, res.trace
        if coarse.num_vertices < spec.min_vertices:
            raise HierarchyError(
                f"level {lvl} has {coarse.num_vertices} vertices (< {spec.min_vertices}); "
                f"hierarchy truncated before depth {spec.levels}")
        if coarse.num_vertices >= prev.num_vertices:
            raise HierarchyError(
                f"level {lvl} did not reduce the vertex count ({prev.num_vertices} -> "
                f"{coarse.num_vertices})")
        levels.append(coarse)
        traces.append(tr)
        methods.append(kind)
    return MeshHierarchy(levels, traces, methods, base)


# ---------------------------------------------------------------------------
# pooling

def unpool(coarse_features: np.ndarray, trace: TraceMap) -> np.ndarray:
    if coarse_features.shape[0] != trace.coarse_count:
        raise HierarchyError(
            f"unpool: {coarse_features.shape[0]} coarse rows, trace expects {trace.coarse_count}")
    return coarse_features[trace.fine_to_coarse]


def unpool_backward(grad_fine: np.ndarray, trace: TraceMap) -> np.ndarray:
    if grad_fine.shape[0] != trace.fine_count:
        raise HierarchyError(
            f"unpool backward: {grad_fine.shape[0]} fine rows, trace expects {trace.fine_count}")
    out = np.zeros((trace.coarse_count,) + grad_fine.shape[1:], dtype=grad_fine.dtype)
    np.add.at(out, trace.fine_to_coarse, grad_fine)
    return out


def pool_mean(fine_features: np.ndarray, trace: TraceMap) -> np.ndarray:
    """Average fine rows over each coarse vertex's preimage."""
    s = unpool_backward(fine_features, trace)
    return s / trace.preimage_sizes().astype(fine_features.dtype).reshape(
        (-1,) + (1,) * (fine_features.ndim - 1))


def pool_mean_backward(grad_coarse: np.ndarray, trace: TraceMap) -> np.ndarray:
    cnt = trace.preimage_sizes().astype(grad_coarse.dtype).reshape(
        (-1,) + (1,) * (grad_coarse.ndim - 1))
    return (grad_coarse / cnt)[trace.fine_to_coarse]
