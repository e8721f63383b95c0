"""Inference: dense SDF grids, isosurface meshes, predicted vertex normals.

eval_grid accepts any evaluator exposing ``sdf_values(points, pose) ->
(values, ok_mask)``; the trained model satisfies this, and analytic fixtures
can stand in for it.
"""

import logging

import numpy as np

from . import skeleton as sk
from .isosurface import ScalarField, marching_cubes, thin_surface_mesh
from .meshio import Mesh, vertex_normals

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.3


def grid_bounds_for_pose(skeleton: sk.Skeleton, pose: sk.Pose, margin: float = DEFAULT_MARGIN):
    """Axis-aligned bounds from the posed joints plus a margin."""
    B = sk.forward_kinematics(skeleton, pose)
    joints = sk.posed_joints(skeleton, B)
    return joints.min(axis=0) - margin, joints.max(axis=0) + margin


def eval_grid(
    model,
    pose: sk.Pose,
    bounds=None,
    res: int = 128,
    beta=None,
    chunk: int = 16384,
) -> ScalarField:
    """Sample the predicted SDF on a res^3 lattice.

    Lattice points are lo + idx * (hi - lo) / res, so doubling the resolution
    revisits every coarse point. Voxels with a singular blend are assigned the
    field's maximum positive value; their count lands in ``singular_count``.
    """
    if res < 8:
        raise ValueError("res must be >= 8")
    if bounds is None:
        bounds = grid_bounds_for_pose(model.skeleton, pose)
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)

    axes = [lo[a] + np.arange(res) * (hi[a] - lo[a]) / res for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    values = np.empty(pts.shape[0])
    ok = np.empty(pts.shape[0], dtype=bool)
    kwargs = {} if beta is None else {"beta": beta}
    for s in range(0, pts.shape[0], chunk):
        e = min(pts.shape[0], s + chunk)
        values[s:e], ok[s:e] = model.sdf_values(pts[s:e], pose, **kwargs)

    n_bad = int(np.count_nonzero(~ok))
    if n_bad:
        fill = float(values[ok].max()) if np.any(ok) else 1.0
        values[~ok] = max(fill, 0.0)
        log.warning("eval_grid: %d singular-blend voxels assigned %.4g", n_bad, fill)

    field = ScalarField(values.reshape(res, res, res), lo, hi)
    field.singular_count = n_bad
    return field


def attach_normals(mesh: Mesh, model, pose: sk.Pose, beta=None, chunk: int = 16384) -> Mesh:
    """Per-vertex normals from the normal net; geometric fallback on failure."""
    verts = mesh.vertices
    normals = np.empty_like(verts)
    ok = np.empty(len(verts), dtype=bool)
    kwargs = {} if beta is None else {"beta": beta}
    for s in range(0, len(verts), chunk):
        e = min(len(verts), s + chunk)
        n, cache = model.normal_forward(verts[s:e], pose, **kwargs)
        normals[s:e] = n
        ok[s:e] = cache.ok
    if not np.all(ok):
        fallback = vertex_normals(mesh)
        normals[~ok] = fallback[~ok]
        log.warning("attach_normals: %d vertices fell back to geometric normals",
                    int(np.count_nonzero(~ok)))
    return Mesh(mesh.vertices, mesh.faces, normals)


def close_boundary(field: ScalarField, level: float = 0.0) -> ScalarField:
    """Copy of the field with the outermost sample shell clamped outside.

    An imperfectly trained field can dip below the level near the grid edges,
    which would leave the extracted surface open there; clamping the boundary
    shell guarantees a closed mesh while leaving interior samples untouched.
    """
    v = field.values.copy()
    fill = level + float(field.spacing.max())
    for axis in range(3):
        sl = [slice(None)] * 3
        for idx in (0, -1):
            sl[axis] = idx
            v[tuple(sl)] = np.maximum(v[tuple(sl)], fill)
    return ScalarField(v, field.lo, field.hi)


def reconstruct(
    model,
    pose: sk.Pose,
    res: int = 128,
    bounds=None,
    beta=None,
    iso: float = 0.0,
    thin_tau: float = None,
    with_normals: bool = True,
    watertight: bool = True,
    chunk: int = 16384,
) -> Mesh:
    """Full inference path: grid, marching cubes, optional predicted normals.

    With ``thin_tau`` set, extracts the closed |d| = tau shell instead of the
    zero level set (for open, sheet-like surfaces). ``watertight`` clamps the
    boundary shell of the sampled grid before extraction.
    """
    field = eval_grid(model, pose, bounds=bounds, res=res, beta=beta, chunk=chunk)
    if thin_tau is not None:
        mesh = thin_surface_mesh(field, thin_tau)
    else:
        if watertight:
            field = close_boundary(field, iso)
        mesh = marching_cubes(field, iso)
    if with_normals and hasattr(model, "normal_forward"):
        mesh = attach_normals(mesh, model, pose, beta=beta, chunk=chunk)
    return mesh
