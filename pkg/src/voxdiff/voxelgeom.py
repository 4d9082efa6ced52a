"""Voxel occupancy grids: world-frame geometry, surfaces, and CVX1 serialization.

A grid covers the cube [-1, 1]^3 at resolution R. occ[x, y, z] is True when
the voxel whose center is at -1 + (index + 0.5) * (2 / R) along each axis is
solid. Surface extraction and point sampling operate on exposed faces: the
faces of occupied voxels whose 6-neighbour in that direction is empty (voxels
beyond the grid boundary count as empty).

The CVX1 container stores a batch of same-resolution grids as a bit stream,
x-fastest, least-significant-bit first, little-endian header:

    magic "CVX1" | u16 version=1 | u16 R | u32 count | count * ceil(R^3/8) bytes
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError, ShapeError

Array = np.ndarray

_MAGIC = b"CVX1"
_VERSION = 1

# (axis, sign) for the six face directions: +x, -x, +y, -y, +z, -z
_DIRS = ((0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1))


class VoxelGrid:
    """Cubic boolean occupancy volume in the [-1, 1]^3 frame."""

    __slots__ = ("occ",)

    def __init__(self, occ: Array):
        occ = np.asarray(occ)
        if occ.ndim != 3 or len(set(occ.shape)) != 1:
            raise ShapeError(f"occupancy must be cubic (R, R, R), got {occ.shape}")
        if occ.dtype != np.bool_:
            raise ShapeError(f"occupancy must be boolean, got dtype {occ.dtype}")
        self.occ = occ

    @property
    def R(self) -> int:
        return self.occ.shape[0]

    @property
    def count(self) -> int:
        return int(self.occ.sum())

    def __eq__(self, other):
        return isinstance(other, VoxelGrid) and np.array_equal(self.occ, other.occ)


def voxel_centers(R: int) -> Array:
    """1-D world coordinates of voxel centers along one axis."""
    return (-1.0 + (np.arange(R) + 0.5) * (2.0 / R)).astype(np.float64)


def binarize(volume: Array, threshold: float = 0.0) -> VoxelGrid:
    """Threshold a real-valued volume into occupancy (strictly greater than)."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ShapeError(f"binarize expects one (R, R, R) volume, got {volume.shape}")
    return VoxelGrid(volume > threshold)


def _occ(grid) -> Array:
    return grid.occ if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=bool)


def _neighbor_mask(occ: Array, axis: int, sign: int) -> Array:
    """occ shifted so entry v holds the occupancy of v's neighbour along (axis, sign)."""
    nb = np.zeros_like(occ)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if sign > 0:
        dst[axis] = slice(0, -1)
        src[axis] = slice(1, None)
    else:
        dst[axis] = slice(1, None)
        src[axis] = slice(0, -1)
    nb[tuple(dst)] = occ[tuple(src)]
    return nb


def surface_voxels(grid) -> Array:
    """Indices (M, 3) of occupied voxels with at least one empty 6-neighbour."""
    occ = _occ(grid)
    interior = occ.copy()
    for axis, sign in _DIRS:
        interior &= _neighbor_mask(occ, axis, sign)
    return np.argwhere(occ & ~interior)


def exposed_faces(grid) -> tuple[Array, Array]:
    """All exposed faces as (voxel_indices (F, 3), direction_ids (F,)).

    Direction ids index into (+x, -x, +y, -y, +z, -z). Faces on the grid
    boundary are exposed.
    """
    occ = _occ(grid)
    idx_parts = []
    dir_parts = []
    for d, (axis, sign) in enumerate(_DIRS):
        exp = occ & ~_neighbor_mask(occ, axis, sign)
        where = np.argwhere(exp)
        idx_parts.append(where)
        dir_parts.append(np.full(len(where), d, dtype=np.int64))
    return np.concatenate(idx_parts, axis=0), np.concatenate(dir_parts, axis=0)


def surface_sample(grid, n: int, rng: np.random.Generator) -> Array:
    """Sample n points uniformly over the exposed surface; returns (n, 3) float32.

    Every exposed face has equal area, so faces are drawn uniformly and a
    point is placed uniformly within each chosen face square.
    """
    occ = _occ(grid)
    if int(n) <= 0:
        raise ShapeError(f"surface_sample needs n > 0, got {n}")
    faces, dirs = exposed_faces(occ)
    if len(faces) == 0:
        raise DataError("surface_sample: grid has no occupied voxels (no surface)")
    R = occ.shape[0]
    h = 2.0 / R
    centers = voxel_centers(R)

    pick = rng.integers(len(faces), size=int(n))
    uv = rng.random((int(n), 2))
    fidx = faces[pick]
    fdir = dirs[pick]

    pts = centers[fidx]  # voxel centers, (n, 3)
    axis = fdir // 2
    sign = np.where(fdir % 2 == 0, 1.0, -1.0)
    rows = np.arange(int(n))
    pts[rows, axis] += sign * (h / 2.0)
    other = np.array([[1, 2], [0, 2], [0, 1]])[axis]  # in-plane axes per face
    pts[rows[:, None], other] += (uv - 0.5) * h
    return pts.astype(np.float32)


def iou_voxels(a, b) -> float:
    """Intersection over union of two same-resolution grids (helper; both empty -> 1)."""
    oa, ob = _occ(a), _occ(b)
    if oa.shape != ob.shape:
        raise ShapeError(f"IoU resolution mismatch: {oa.shape} vs {ob.shape}")
    union = int(np.logical_or(oa, ob).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(oa, ob).sum()) / union


# --------------------------------------------------------------------------
# CVX1 container

def _grid_nbytes(R: int) -> int:
    return (R ** 3 + 7) // 8


def save_cvx(path, grids) -> None:
    """Write grids (list of VoxelGrid, or a (N, R, R, R) bool array) as CVX1."""
    if isinstance(grids, VoxelGrid):
        grids = [grids]
    if isinstance(grids, np.ndarray):
        if grids.ndim != 4:
            raise ShapeError(f"save_cvx expects (N, R, R, R), got {grids.shape}")
        occs = [grids[i] for i in range(grids.shape[0])]
    else:
        occs = [_occ(g) for g in grids]
    if not occs:
        raise ShapeError("save_cvx: empty grid list")
    R = occs[0].shape[0]
    for o in occs:
        if o.shape != (R, R, R):
            raise ShapeError(f"save_cvx: mixed resolutions {o.shape} vs {(R, R, R)}")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HHI", _VERSION, R, len(occs)))
        for o in occs:
            bits = np.asarray(o, dtype=bool).ravel(order="F")
            f.write(np.packbits(bits, bitorder="little").tobytes())


def load_cvx(path) -> Array:
    """Read a CVX1 file; returns a (N, R, R, R) bool array."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise DataError(f"CVX1 file too short ({len(blob)} bytes)")
    if blob[:4] != _MAGIC:
        raise DataError(f"bad CVX1 magic {blob[:4]!r}")
    version, R, count = struct.unpack("<HHI", blob[4:12])
    if version != _VERSION:
        raise DataError(f"unsupported CVX1 version {version}")
    if R == 0:
        raise DataError("CVX1 resolution 0")
    per = _grid_nbytes(R)
    expect = 12 + per * count
    if len(blob) != expect:
        raise DataError(f"CVX1 payload is {len(blob)} bytes, expected {expect} "
                        f"for {count} grids at R={R}")
    out = np.zeros((count, R, R, R), dtype=bool)
    for i in range(count):
        raw = np.frombuffer(blob, dtype=np.uint8, count=per, offset=12 + i * per)
        bits = np.unpackbits(raw, count=R ** 3, bitorder="little").astype(bool)
        out[i] = bits.reshape((R, R, R), order="F")
    return out
