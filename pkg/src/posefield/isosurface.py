"""Dense scalar fields and marching-cubes extraction.

Grid convention: a field with resolution (nx, ny, nz) samples the function at
lattice points lo + idx * spacing with spacing = (hi - lo) / res, so doubling
the resolution re-visits every coarse sample point exactly.

The cell sweep exists twice: a numba kernel and a vectorized numpy fallback
(see backend). Both emit vertices ordered by global lattice-edge key and
triangles in cell-scan order, so their outputs are identical.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import backend
from ._mc_tables import CORNER_OFFSETS, EDGE_ANCHOR, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE
from .backend import njit
from .errors import EmptySurfaceError
from .meshio import Mesh, drop_degenerate_faces

TRI_COUNT = ((TRI_TABLE >= 0).sum(axis=1) // 3).astype(np.int32)


@dataclass
class ScalarField:
    values: np.ndarray   # (nx,ny,nz)
    lo: np.ndarray       # (3,)
    hi: np.ndarray       # (3,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.lo = np.asarray(self.lo, dtype=float).reshape(3)
        self.hi = np.asarray(self.hi, dtype=float).reshape(3)
        if self.values.ndim != 3:
            raise ValueError("field values must be a 3-D array")
        if not np.all(self.hi > self.lo):
            raise ValueError("bounds must satisfy hi > lo")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def res(self):
        return self.values.shape

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / np.array(self.values.shape, dtype=float)

    def sample_points(self) -> np.ndarray:
        """All lattice points, shape (nx*ny*nz, 3), index-major order."""
        nx, ny, nz = self.values.shape
        idx = np.stack(
            np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"),
            axis=-1,
        ).reshape(-1, 3)
        return self.lo + idx * self.spacing


def save_field(field: ScalarField, path) -> None:
    """Debug dump: u32 res triple, f64 bounds, row-major float32 values."""
    with open(path, "wb") as fh:
        fh.write(b"PFLD")
        fh.write(struct.pack("<III", *field.values.shape))
        fh.write(struct.pack("<6d", *field.lo, *field.hi))
        fh.write(np.ascontiguousarray(field.values, dtype="<f4").tobytes())


def load_field(path) -> ScalarField:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != b"PFLD":
        raise ValueError(f"{path}: not a field dump")
    nx, ny, nz = struct.unpack_from("<III", data, 4)
    bounds = struct.unpack_from("<6d", data, 16)
    values = np.frombuffer(data, dtype="<f4", count=nx * ny * nz, offset=64)
    return ScalarField(values.reshape(nx, ny, nz).astype(float), bounds[:3], bounds[3:])


# --- shared vertex construction --------------------------------------------------

def _vertices_from_keys(keys, values, lo, spacing):
    """Interpolated vertex positions for sorted global lattice-edge keys."""
    nx, ny, nz = values.shape
    axis = keys % 3
    lin = keys // 3
    k = lin % nz
    j = (lin // nz) % ny
    i = lin // (nz * ny)
    i1 = i + (axis == 0)
    j1 = j + (axis == 1)
    k1 = k + (axis == 2)
    v0 = values[i, j, k]
    v1 = values[i1, j1, k1]
    return v0, v1, np.stack([i, j, k], axis=1).astype(float)


def _interp_positions(keys, values, lo, spacing, iso):
    v0, v1, base = _vertices_from_keys(keys, values, lo, spacing)
    t = (iso - v0) / (v1 - v0)
    pos = lo[None, :] + base * spacing[None, :]
    axis = (keys % 3).astype(np.int64)
    pos[np.arange(len(keys)), axis] += t * spacing[axis]
    return pos


# --- numpy cell sweep -------------------------------------------------------------

def _sweep_numpy(values, iso):
    nx, ny, nz = values.shape
    inside = values < iso
    codes = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for bit in range(8):
        dx, dy, dz = CORNER_OFFSETS[bit]
        codes |= inside[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz].astype(np.int32) << bit
    active = (codes > 0) & (codes < 255)
    cells = np.argwhere(active)
    if cells.size == 0:
        return np.empty(0, np.int64), np.empty((0, 3), np.int64)
    acodes = codes[active]

    anchor = EDGE_ANCHOR.astype(np.int64)
    cell_keys = np.empty((cells.shape[0], 12), dtype=np.int64)
    for e in range(12):
        di, dj, dk, axis = anchor[e]
        cell_keys[:, e] = (
            ((cells[:, 0] + di) * ny + (cells[:, 1] + dj)) * nz + (cells[:, 2] + dk)
        ) * 3 + axis

    used = (EDGE_TABLE[acodes][:, None] >> np.arange(12)[None, :]) & 1
    uniq_keys = np.unique(cell_keys[used.astype(bool)])

    rows = TRI_TABLE[acodes]
    valid = rows >= 0
    row_ids = np.repeat(np.arange(cells.shape[0]), 16)[valid.ravel()]
    local_edges = rows[valid]
    tri_keys = cell_keys[row_ids, local_edges].reshape(-1, 3)
    return uniq_keys, tri_keys


# --- numba cell sweep --------------------------------------------------------------

@njit(cache=True)
def _sweep_flags_numba(values, iso, edge_table, tri_count, anchor):
    nx, ny, nz = values.shape
    flags = np.zeros(nx * ny * nz * 3, dtype=np.uint8)
    n_tri = 0
    for i in range(nx - 1):
        for j in range(ny - 1):
            for k in range(nz - 1):
                code = 0
                if values[i, j, k] < iso:
                    code |= 1
                if values[i + 1, j, k] < iso:
                    code |= 2
                if values[i + 1, j + 1, k] < iso:
                    code |= 4
                if values[i, j + 1, k] < iso:
                    code |= 8
                if values[i, j, k + 1] < iso:
                    code |= 16
                if values[i + 1, j, k + 1] < iso:
                    code |= 32
                if values[i + 1, j + 1, k + 1] < iso:
                    code |= 64
                if values[i, j + 1, k + 1] < iso:
                    code |= 128
                if code == 0 or code == 255:
                    continue
                mask = edge_table[code]
                for e in range(12):
                    if mask & (1 << e):
                        key = (
                            ((i + anchor[e, 0]) * ny + (j + anchor[e, 1])) * nz
                            + (k + anchor[e, 2])
                        ) * 3 + anchor[e, 3]
                        flags[key] = 1
                n_tri += tri_count[code]
    return flags, n_tri


@njit(cache=True)
def _sweep_faces_numba(values, iso, tri_table, anchor, n_tri):
    nx, ny, nz = values.shape
    tri_keys = np.empty((n_tri, 3), dtype=np.int64)
    t = 0
    for i in range(nx - 1):
        for j in range(ny - 1):
            for k in range(nz - 1):
                code = 0
                if values[i, j, k] < iso:
                    code |= 1
                if values[i + 1, j, k] < iso:
                    code |= 2
                if values[i + 1, j + 1, k] < iso:
                    code |= 4
                if values[i, j + 1, k] < iso:
                    code |= 8
                if values[i, j, k + 1] < iso:
                    code |= 16
                if values[i + 1, j, k + 1] < iso:
                    code |= 32
                if values[i + 1, j + 1, k + 1] < iso:
                    code |= 64
                if values[i, j + 1, k + 1] < iso:
                    code |= 128
                if code == 0 or code == 255:
                    continue
                row = tri_table[code]
                s = 0
                while s < 16 and row[s] >= 0:
                    for c in range(3):
                        e = row[s + c]
                        tri_keys[t, c] = (
                            ((i + anchor[e, 0]) * ny + (j + anchor[e, 1])) * nz
                            + (k + anchor[e, 2])
                        ) * 3 + anchor[e, 3]
                    t += 1
                    s += 3
    return tri_keys


def _sweep_numba(values, iso):
    anchor = EDGE_ANCHOR.astype(np.int64)
    flags, n_tri = _sweep_flags_numba(values, iso, EDGE_TABLE, TRI_COUNT, anchor)
    uniq_keys = np.flatnonzero(flags).astype(np.int64)
    if n_tri == 0:
        return np.empty(0, np.int64), np.empty((0, 3), np.int64)
    tri_keys = _sweep_faces_numba(values, iso, TRI_TABLE, anchor, n_tri)
    return uniq_keys, tri_keys


# --- public entry points --------------------------------------------------------------

def marching_cubes(field: ScalarField, iso: float = 0.0) -> Mesh:
    """Extract the iso level set as a triangle mesh.

    Triangles are wound so geometric normals point toward increasing field
    values (outward, for a negative-inside SDF). Raises EmptySurfaceError when
    the level is never crossed.
    """
    values = np.ascontiguousarray(field.values, dtype=float)
    if backend.use_numba():
        uniq_keys, tri_keys = _sweep_numba(values, float(iso))
    else:
        uniq_keys, tri_keys = _sweep_numpy(values, float(iso))
    if uniq_keys.size == 0 or tri_keys.size == 0:
        raise EmptySurfaceError(f"no crossings of level {iso}")

    verts = _interp_positions(uniq_keys, values, field.lo, field.spacing, float(iso))
    faces = np.searchsorted(uniq_keys, tri_keys)
    # table order yields inward-facing triangles for the inside = (value < iso)
    # convention used here; swap to make normals follow increasing values
    faces = faces[:, [0, 2, 1]]
    return drop_degenerate_faces(Mesh(verts, faces))


def thin_surface_mesh(field: ScalarField, tau: float) -> Mesh:
    """Closed shell |field| = tau around a thin / open surface."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    shell = ScalarField(np.abs(field.values) - tau, field.lo, field.hi)
    return marching_cubes(shell, 0.0)
