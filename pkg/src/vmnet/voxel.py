"""Sparse voxel grids, voxelization, sparse convolutions and voxel-to-vertex projection.

Coordinates are packed into int64 keys and looked up by binary search over the
sorted key array, which plays the role of the coord -> row hash map and keeps
output ordering deterministic (sorted coordinate order).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

_BITS = 21
_OFF = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1


class VoxelError(ValueError):
    pass


def pack(coords: np.ndarray) -> np.ndarray:
    """Pack integer (u, v, w) triples into sortable int64 keys."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3) + _OFF
    if c.size and (c.min() < 0 or c.max() > _MASK):
        raise VoxelError("voxel coordinate outside the packable range")
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


def unpack(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([(keys >> (2 * _BITS)) & _MASK, (keys >> _BITS) & _MASK, keys & _MASK],
                    1) - _OFF


def kernel_offsets(size: int) -> np.ndarray:
    """Kernel offsets in lexicographic (du, dv, dw) order.

    Odd sizes are centered (3 -> -1..1); size 2 spans 0..1 for stride-2 cubes.
    """
    rng = range(-(size // 2), size // 2 + 1) if size % 2 else range(size)
    return np.array(list(itertools.product(rng, rng, rng)), dtype=np.int64)


@dataclass(eq=False)
class SparseVoxelGrid:
    """Active voxel set at resolution ``r`` (voxels per meter), rows in sorted coord order."""

    coords: np.ndarray
    resolution: float
    features: np.ndarray | None = None
    counts: np.ndarray | None = None
    keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.keys = pack(self.coords)
        if len(self.keys) > 1 and np.any(np.diff(self.keys) <= 0):
            order = np.argsort(self.keys, kind="stable")
            if np.any(np.diff(self.keys[order]) == 0):
                raise VoxelError("duplicate voxel coordinates")
            raise VoxelError("grid coords must be given in sorted key order")
        if self.features is not None and len(self.features) != len(self.coords):
            raise VoxelError(f"{len(self.features)} feature rows for {len(self.coords)} voxels")

    @classmethod
    def from_coords(cls, coords, resolution, features=None) -> "SparseVoxelGrid":
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        keys = pack(coords)
        order = np.argsort(keys, kind="stable")
        if len(keys) > 1 and np.any(np.diff(keys[order]) == 0):
            raise VoxelError("duplicate voxel coordinates")
        feats = None if features is None else np.asarray(features)[order]
        return cls(coords[order], resolution, feats)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def index(self) -> dict:
        """coord tuple -> row mapping (convenience view; lookups use :meth:`lookup`)."""
        return {tuple(c): i for i, c in enumerate(self.coords.tolist())}

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row of each coordinate, -1 where inactive."""
        q = pack(coords)
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, max(len(self.keys) - 1, 0))
        hit = (self.keys[pos] == q) if len(self.keys) else np.zeros(len(q), dtype=bool)
        return np.where(hit, pos, -1)

    def with_features(self, features: np.ndarray) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.coords, self.resolution, features, self.counts)


def voxel_cells(positions: np.ndarray, resolution: float) -> np.ndarray:
    return np.floor(np.asarray(positions) * resolution).astype(np.int64)


def voxelize(positions: np.ndarray, features: np.ndarray, resolution: float):
    """Average vertex features into the cells ``floor(x * r)``.

    Returns ``(grid, vertex_to_voxel)``; ``grid.counts`` holds the members per cell.
    """
    if not resolution > 0:
        raise VoxelError(f"resolution must be positive, got {resolution}")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        raise VoxelError("cannot voxelize an empty vertex set")
    keys = pack(voxel_cells(positions, resolution))
    ukeys, inverse = np.unique(keys, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(ukeys))
    features = np.asarray(features)
    sums = np.zeros((len(ukeys), features.shape[1]), dtype=np.float64)
    np.add.at(sums, inverse, features)
    feats = (sums / counts[:, None]).astype(features.dtype)
    grid = SparseVoxelGrid(unpack(ukeys), resolution, feats, counts)
    return grid, inverse


def voxelize_mesh(mesh, resolution: float):
    return voxelize(mesh.positions, mesh.colors, resolution)


# ---------------------------------------------------------------------------
# rulebooks

@dataclass(frozen=True)
class Rulebook:
    """Per-offset (input row, output row) pairs for one convolution."""

    mode: str
    pairs: tuple
    n_in: int
    n_out: int
    in_coords: np.ndarray
    out_coords: np.ndarray

    @property
    def num_offsets(self) -> int:
        return len(self.pairs)


def submanifold_rulebook(grid: SparseVoxelGrid, size: int = 3) -> Rulebook:
    pairs = []
    for off in kernel_offsets(size):
        rows = grid.lookup(grid.coords + off)
        out = np.flatnonzero(rows >= 0)
        pairs.append((rows[out], out))
    return Rulebook("submanifold", tuple(pairs), len(grid), len(grid), grid.coords, grid.coords)


def strided_rulebook(grid: SparseVoxelGrid) -> Rulebook:
    """Kernel-2 stride-2 downsampling: output coords are the unique floor(c / 2)."""
    parent = np.floor_divide(grid.coords, 2)
    ukeys, inverse = np.unique(pack(parent), return_inverse=True)
    inverse = inverse.reshape(-1)
    local = grid.coords - 2 * parent
    offs = kernel_offsets(2)
    code = local[:, 0] * 4 + local[:, 1] * 2 + local[:, 2]
    ocode = offs[:, 0] * 4 + offs[:, 1] * 2 + offs[:, 2]
    pairs = []
    for oc in ocode:
        rows = np.flatnonzero(code == oc)
        pairs.append((rows, inverse[rows]))
    return Rulebook("strided", tuple(pairs), len(grid), len(ukeys), grid.coords, unpack(ukeys))


def transposed_rulebook(strided: Rulebook) -> Rulebook:
    """Inverse pattern of a strided rulebook: coarse rows scatter back to the fine set."""
    if strided.mode != "strided":
        raise VoxelError("transposed convolution needs the rulebook of its paired strided conv")
    pairs = tuple((o, i) for i, o in strided.pairs)
    return Rulebook("transposed", pairs, strided.n_out, strided.n_in, strided.out_coords,
                    strided.in_coords)


# ---------------------------------------------------------------------------
# convolution

@dataclass
class ConvKernel:
    """Weights of shape (offsets, C_in, C_out) plus optional bias."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    mode: str = "submanifold"

    def __post_init__(self):
        if self.mode not in ("submanifold", "strided", "transposed"):
            raise VoxelError(f"unknown conv mode {self.mode!r}")

    @property
    def kernel_size(self) -> int:
        return round(len(self.weight) ** (1 / 3))


def conv_forward(x: np.ndarray, weight: np.ndarray, bias, rb: Rulebook) -> np.ndarray:
    if x.shape[0] != rb.n_in:
        raise VoxelError(f"conv input has {x.shape[0]} rows, rulebook expects {rb.n_in}")
    if weight.shape[0] != rb.num_offsets or weight.shape[1] != x.shape[1]:
        raise VoxelError(
            f"kernel shape {weight.shape} incompatible with {rb.num_offsets} offsets and "
            f"{x.shape[1]} input channels")
    out = np.zeros((rb.n_out, weight.shape[2]), dtype=x.dtype)
    # each offset touches an output row at most once, so buffered += is exact
    for k, (i, o) in enumerate(rb.pairs):
        if len(i):
            out[o] += x[i] @ weight[k]
    if bias is not None:
        out += bias
    return out


def conv_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray, rb: Rulebook):
    """Returns (dx, dweight, dbias)."""
    dx = np.zeros_like(x)
    dw = np.zeros_like(weight)
    for k, (i, o) in enumerate(rb.pairs):
        if len(i):
            g = dout[o]
            dx[i] += g @ weight[k].T
            dw[k] = x[i].T @ g
    return dx, dw, dout.sum(axis=0)


def sparse_conv(grid: SparseVoxelGrid, kernel: ConvKernel, pairing: Rulebook | None = None):
    """Apply a sparse convolution and return the output grid.

    ``pairing`` is the rulebook of the strided conv that a transposed conv undoes.
    The output grid carries its rulebook as ``grid.rulebook``.
    """
    if grid.features is None:
        raise VoxelError("grid has no features")
    scale = 1.0
    if kernel.mode == "submanifold":
        rb = submanifold_rulebook(grid, kernel.kernel_size)
    elif kernel.mode == "strided":
        rb = strided_rulebook(grid)
        scale = 0.5
    else:
        if pairing is None:
            raise VoxelError("transposed conv called without a recorded strided pairing")
        rb = transposed_rulebook(pairing)
        if len(rb.in_coords) != len(grid) or np.any(rb.in_coords != grid.coords):
            raise VoxelError("transposed conv input does not match the paired strided output")
        scale = 2.0
    out = conv_forward(grid.features, kernel.weight, kernel.bias, rb)
    res = SparseVoxelGrid(rb.out_coords, grid.resolution * scale, out)
    res.rulebook = rb
    return res


# ---------------------------------------------------------------------------
# voxel -> vertex projection

def trilinear_weights(positions: np.ndarray, resolution: float):
    """Corner cells (N, 8, 3) and weights (N, 8) of the 8 voxel centers around each point.

    Voxel c has its center at (c + 0.5) / r.
    """
    q = np.asarray(positions, dtype=np.float64) * resolution - 0.5
    base = np.floor(q).astype(np.int64)
    t = q - base
    corners = kernel_offsets(2)
    cells = base[:, None, :] + corners[None]
    w = np.prod(np.where(corners[None] == 1, t[:, None, :], 1.0 - t[:, None, :]), axis=2)
    return cells, w


def projection_matrix(grid: SparseVoxelGrid, positions: np.ndarray) -> sp.csr_matrix:
    """Sparse (N_vertices x N_voxels) trilinear interpolation matrix.

    Inactive corners are dropped without renormalizing the remaining weights.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    cells, w = trilinear_weights(positions, grid.resolution)
    rows = grid.lookup(cells.reshape(-1, 3)).reshape(w.shape)
    vi = np.repeat(np.arange(len(positions)), 8).reshape(w.shape)
    m = rows >= 0
    return sp.csr_matrix((w[m], (vi[m], rows[m])), shape=(len(positions), len(grid)))


def project_to_vertices(grid: SparseVoxelGrid, positions: np.ndarray) -> np.ndarray:
    if grid.features is None:
        raise VoxelError("grid has no features")
    P = projection_matrix(grid, positions)
    return np.asarray(P @ grid.features).astype(grid.features.dtype, copy=False)


def project_forward(features: np.ndarray, P: sp.csr_matrix) -> np.ndarray:
    return np.asarray(P @ features).astype(features.dtype, copy=False)


def project_backward(dout: np.ndarray, P: sp.csr_matrix) -> np.ndarray:
    return np.asarray(P.T @ dout).astype(dout.dtype, copy=False)
