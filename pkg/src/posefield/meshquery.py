"""Spatial queries on triangle meshes: closest points, ray-parity signs, sampling.

A TriangleIndex is a flat median-split BVH. The accelerated traversals are
numba kernels; with the pure-numpy backend the same queries run as chunked
vectorized sweeps over all triangles. Per-triangle math is written with the
identical operation order in both paths so results agree to machine precision.
"""

import numpy as np

from . import backend
from .backend import njit
from .errors import DegenerateRayError
from .meshio import Mesh, face_normals

RAY_T_MIN = 1e-9        # hits closer than this are the starting surface itself
RAY_BARY_TOL = 1e-9     # barycentric edge-grazing tolerance -> re-cast
MAX_RAY_RETRIES = 8


# --- BVH construction (plain numpy, deterministic) --------------------------------

class TriangleIndex:
    """Median-split bounding volume hierarchy over mesh triangles."""

    def __init__(self, mesh: Mesh, leaf_size: int = 8):
        self.mesh = mesh
        tri = np.ascontiguousarray(mesh.triangle_corners(), dtype=float)
        if tri.shape[0] == 0:
            raise ValueError("cannot index an empty mesh")
        self.tri_verts = tri
        lo = tri.min(axis=1)
        hi = tri.max(axis=1)
        centroids = tri.mean(axis=1)

        node_lo, node_hi, node_left, node_right = [], [], [], []
        node_start, node_count = [], []
        order = np.arange(tri.shape[0])

        def new_node():
            node_lo.append(np.zeros(3))
            node_hi.append(np.zeros(3))
            node_left.append(-1)
            node_right.append(-1)
            node_start.append(0)
            node_count.append(0)
            return len(node_lo) - 1

        stack = [(new_node(), 0, tri.shape[0])]
        while stack:
            nid, start, end = stack.pop()
            ids = order[start:end]
            node_lo[nid] = lo[ids].min(axis=0)
            node_hi[nid] = hi[ids].max(axis=0)
            if end - start <= leaf_size:
                node_start[nid] = start
                node_count[nid] = end - start
                continue
            cen = centroids[ids]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            local = np.argsort(cen[:, axis], kind="stable")
            order[start:end] = ids[local]
            mid = start + (end - start) // 2
            left = new_node()
            right = new_node()
            node_left[nid] = left
            node_right[nid] = right
            stack.append((left, start, mid))
            stack.append((right, mid, end))

        self.order = order
        self.node_lo = np.array(node_lo)
        self.node_hi = np.array(node_hi)
        self.node_left = np.array(node_left, dtype=np.int64)
        self.node_right = np.array(node_right, dtype=np.int64)
        self.node_start = np.array(node_start, dtype=np.int64)
        self.node_count = np.array(node_count, dtype=np.int64)
        self.ordered_tris = np.ascontiguousarray(tri[order])


# --- closest point on triangle ------------------------------------------------------
# region-based closest point (Ericson, Real-Time Collision Detection)

def _closest_on_triangles_numpy(tri, p):
    """Closest points on each triangle of ``tri`` (F,3,3) to each ``p`` (N,3).

    Returns squared distances (N,F) and closest points (N,F,3).
    """
    a = tri[None, :, 0]
    b = tri[None, :, 1]
    c = tri[None, :, 2]
    pp = p[:, None, :]
    ab = b - a
    ac = c - a
    ap = pp - a
    d1 = np.sum(ab * ap, axis=2)
    d2 = np.sum(ac * ap, axis=2)
    bp = pp - b
    d3 = np.sum(ab * bp, axis=2)
    d4 = np.sum(ac * bp, axis=2)
    cp = pp - c
    d5 = np.sum(ab * cp, axis=2)
    d6 = np.sum(ac * cp, axis=2)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom

    r_a = (d1 <= 0) & (d2 <= 0)
    r_b = (d3 >= 0) & (d4 <= d3)
    r_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    r_c = (d6 >= 0) & (d5 <= d6)
    r_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    r_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    v_ab3 = np.nan_to_num(v_ab)[..., None]
    w_ac3 = np.nan_to_num(w_ac)[..., None]
    w_bc3 = np.nan_to_num(w_bc)[..., None]
    v_in3 = np.nan_to_num(v_in)[..., None]
    w_in3 = np.nan_to_num(w_in)[..., None]

    close = a + ab * v_in3 + ac * w_in3
    m = r_bc & ~(r_a | r_b | r_ab | r_c | r_ac)
    close = np.where(m[..., None], b + w_bc3 * (c - b), close)
    m = r_ac & ~(r_a | r_b | r_ab | r_c)
    close = np.where(m[..., None], a + w_ac3 * ac, close)
    m = r_c & ~(r_a | r_b | r_ab)
    close = np.where(m[..., None], c, close)
    m = r_ab & ~(r_a | r_b)
    close = np.where(m[..., None], a + v_ab3 * ab, close)
    m = r_b & ~r_a
    close = np.where(m[..., None], b, close)
    close = np.where(r_a[..., None], a, close)

    diff = pp - close
    return np.sum(diff * diff, axis=2), close


@njit(cache=True)
def _closest_on_triangle_scalar(tri, px, py, pz):
    ax, ay, az = tri[0, 0], tri[0, 1], tri[0, 2]
    bx, by, bz = tri[1, 0], tri[1, 1], tri[1, 2]
    cx, cy, cz = tri[2, 0], tri[2, 1], tri[2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@njit(cache=True)
def _closest_bvh_kernel(
    points, tris, order, node_lo, node_hi, node_left, node_right, node_start, node_count
):
    n = points.shape[0]
    out_d2 = np.empty(n)
    out_pt = np.empty((n, 3))
    out_tri = np.empty(n, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        bx = by = bz = 0.0
        btri = -1
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            nid = stack[top]
            # squared distance to node box
            dx = max(node_lo[nid, 0] - px, 0.0, px - node_hi[nid, 0])
            dy = max(node_lo[nid, 1] - py, 0.0, py - node_hi[nid, 1])
            dz = max(node_lo[nid, 2] - pz, 0.0, pz - node_hi[nid, 2])
            if dx * dx + dy * dy + dz * dz >= best:
                continue
            left = node_left[nid]
            if left < 0:
                s = node_start[nid]
                for t in range(s, s + node_count[nid]):
                    cxx, cyy, czz = _closest_on_triangle_scalar(tris[t], px, py, pz)
                    ddx, ddy, ddz = px - cxx, py - cyy, pz - czz
                    d2 = ddx * ddx + ddy * ddy + ddz * ddz
                    if d2 < best:
                        best = d2
                        bx, by, bz = cxx, cyy, czz
                        btri = order[t]
            else:
                stack[top] = left
                top += 1
                stack[top] = node_right[nid]
                top += 1
        out_d2[i] = best
        out_pt[i, 0] = bx
        out_pt[i, 1] = by
        out_pt[i, 2] = bz
        out_tri[i] = btri
    return out_d2, out_pt, out_tri


def closest_points_brute(mesh_or_tris, points, chunk: int = 262144):
    """Reference all-triangles closest-point sweep (the brute-force oracle).

    Returns (distances, closest_points, triangle_ids).
    """
    tri = mesh_or_tris.triangle_corners() if isinstance(mesh_or_tris, Mesh) else mesh_or_tris
    p = np.atleast_2d(np.asarray(points, dtype=float))
    n, f = p.shape[0], tri.shape[0]
    rows = max(1, chunk // max(f, 1))
    d = np.empty(n)
    cp = np.empty((n, 3))
    ti = np.empty(n, dtype=np.int64)
    for s in range(0, n, rows):
        e = min(n, s + rows)
        d2, close = _closest_on_triangles_numpy(tri, p[s:e])
        idx = np.argmin(d2, axis=1)
        rr = np.arange(e - s)
        d[s:e] = np.sqrt(d2[rr, idx])
        cp[s:e] = close[rr, idx]
        ti[s:e] = idx
    return d, cp, ti


def closest_points(index: TriangleIndex, points):
    """Accelerated nearest-surface query. Returns (dist, point, triangle_id)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if backend.use_numba():
        d2, cp, ti = _closest_bvh_kernel(
            np.ascontiguousarray(p),
            index.ordered_tris,
            index.order,
            index.node_lo,
            index.node_hi,
            index.node_left,
            index.node_right,
            index.node_start,
            index.node_count,
        )
        return np.sqrt(d2), cp, ti
    return closest_points_brute(index.tri_verts, p)


# --- ray parity ----------------------------------------------------------------------

@njit(cache=True)
def _ray_crossings_bvh(
    ox, oy, oz, dx, dy, dz, tris, node_lo, node_hi, node_left, node_right, node_start, node_count
):
    """Count ray-mesh crossings; returns (count, degenerate_flag)."""
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    count = 0
    degenerate = False
    inv_x = 1.0 / dx if dx != 0.0 else np.inf
    inv_y = 1.0 / dy if dy != 0.0 else np.inf
    inv_z = 1.0 / dz if dz != 0.0 else np.inf
    while top > 0:
        top -= 1
        nid = stack[top]
        # slab test against [t_min, inf)
        t0 = -np.inf
        t1 = np.inf
        ta = (node_lo[nid, 0] - ox) * inv_x
        tb = (node_hi[nid, 0] - ox) * inv_x
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
        ta = (node_lo[nid, 1] - oy) * inv_y
        tb = (node_hi[nid, 1] - oy) * inv_y
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
        ta = (node_lo[nid, 2] - oz) * inv_z
        tb = (node_hi[nid, 2] - oz) * inv_z
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
        if t1 < max(t0, 0.0):
            continue
        left = node_left[nid]
        if left >= 0:
            stack[top] = left
            top += 1
            stack[top] = node_right[nid]
            top += 1
            continue
        s = node_start[nid]
        for t in range(s, s + node_count[nid]):
            ax, ay, az = tris[t, 0, 0], tris[t, 0, 1], tris[t, 0, 2]
            e1x, e1y, e1z = tris[t, 1, 0] - ax, tris[t, 1, 1] - ay, tris[t, 1, 2] - az
            e2x, e2y, e2z = tris[t, 2, 0] - ax, tris[t, 2, 1] - ay, tris[t, 2, 2] - az
            px = dy * e2z - dz * e2y
            py = dz * e2x - dx * e2z
            pz = dx * e2y - dy * e2x
            det = e1x * px + e1y * py + e1z * pz
            if abs(det) < 1e-14:
                continue
            inv = 1.0 / det
            tx, ty, tz = ox - ax, oy - ay, oz - az
            u = (tx * px + ty * py + tz * pz) * inv
            if u < -RAY_BARY_TOL or u > 1.0 + RAY_BARY_TOL:
                continue
            qx = ty * e1z - tz * e1y
            qy = tz * e1x - tx * e1z
            qz = tx * e1y - ty * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < -RAY_BARY_TOL or u + v > 1.0 + RAY_BARY_TOL:
                continue
            th = (e2x * qx + e2y * qy + e2z * qz) * inv
            if th <= RAY_T_MIN:
                continue
            if (
                u < RAY_BARY_TOL
                or v < RAY_BARY_TOL
                or u + v > 1.0 - RAY_BARY_TOL
            ):
                degenerate = True
            count += 1
    return count, degenerate


@njit(cache=True)
def _parity_kernel(
    points, dirs, n_rays, tris, node_lo, node_hi, node_left, node_right, node_start, node_count
):
    n = points.shape[0]
    n_dirs = dirs.shape[1]
    signs = np.empty(n, dtype=np.int8)
    failed = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        votes_in = 0
        votes = 0
        nxt = n_rays
        for r in range(n_rays):
            d = dirs[i, r]
            cnt, bad = _ray_crossings_bvh(
                points[i, 0], points[i, 1], points[i, 2], d[0], d[1], d[2],
                tris, node_lo, node_hi, node_left, node_right, node_start, node_count,
            )
            while bad and nxt < n_dirs:
                d = dirs[i, nxt]
                nxt += 1
                cnt, bad = _ray_crossings_bvh(
                    points[i, 0], points[i, 1], points[i, 2], d[0], d[1], d[2],
                    tris, node_lo, node_hi, node_left, node_right, node_start, node_count,
                )
            if bad:
                failed[i] = 1
                break
            votes += 1
            if cnt % 2 == 1:
                votes_in += 1
        signs[i] = -1 if 2 * votes_in > votes else 1
    return signs, failed


def _ray_crossings_numpy(origin, direction, tri):
    """Crossing count of one ray against all triangles (vectorized MT)."""
    a = tri[:, 0]
    e1 = tri[:, 1] - a
    e2 = tri[:, 2] - a
    pvec = np.cross(direction[None, :], e2)
    det = np.sum(e1 * pvec, axis=1)
    ok = np.abs(det) >= 1e-14
    inv = np.where(ok, 1.0 / np.where(det == 0, 1.0, det), 0.0)
    tvec = origin[None, :] - a
    u = np.sum(tvec * pvec, axis=1) * inv
    qvec = np.cross(tvec, e1)
    v = np.sum(direction[None, :] * qvec, axis=1) * inv
    t = np.sum(e2 * qvec, axis=1) * inv
    hit = (
        ok
        & (u >= -RAY_BARY_TOL)
        & (u <= 1.0 + RAY_BARY_TOL)
        & (v >= -RAY_BARY_TOL)
        & (u + v <= 1.0 + RAY_BARY_TOL)
        & (t > RAY_T_MIN)
    )
    grazing = hit & (
        (u < RAY_BARY_TOL) | (v < RAY_BARY_TOL) | (u + v > 1.0 - RAY_BARY_TOL)
    )
    return int(np.count_nonzero(hit)), bool(np.any(grazing))


def _random_directions(rng, shape):
    v = rng.normal(size=shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def ray_parity_signs(
    index: TriangleIndex,
    points,
    n_rays: int = 5,
    rng: np.random.Generator = None,
    max_retries: int = MAX_RAY_RETRIES,
):
    """Inside/outside signs (-1 inside) by majority vote over random rays."""
    if n_rays % 2 == 0 or n_rays < 1:
        raise ValueError("n_rays must be odd and positive")
    p = np.atleast_2d(np.asarray(points, dtype=float))
    rng = np.random.default_rng(0) if rng is None else rng
    dirs = _random_directions(rng, (p.shape[0], n_rays + max_retries))

    if backend.use_numba():
        signs, failed = _parity_kernel(
            np.ascontiguousarray(p), dirs, n_rays,
            index.ordered_tris,
            index.node_lo, index.node_hi, index.node_left,
            index.node_right, index.node_start, index.node_count,
        )
        if np.any(failed):
            raise DegenerateRayError(
                f"{int(failed.sum())} point(s) exhausted ray retries"
            )
        return signs.astype(int)

    tri = index.tri_verts
    signs = np.empty(p.shape[0], dtype=int)
    for i in range(p.shape[0]):
        votes_in = 0
        nxt = n_rays
        for r in range(n_rays):
            cnt, bad = _ray_crossings_numpy(p[i], dirs[i, r], tri)
            while bad and nxt < dirs.shape[1]:
                cnt, bad = _ray_crossings_numpy(p[i], dirs[i, nxt], tri)
                nxt += 1
            if bad:
                raise DegenerateRayError(f"point {i} exhausted ray retries")
            if cnt % 2 == 1:
                votes_in += 1
        signs[i] = -1 if 2 * votes_in > n_rays else 1
    return signs


def sign_by_ray_parity(mesh: Mesh, p, n_rays: int = 5, rng=None) -> int:
    """Single-point membership sign: -1 inside, +1 outside."""
    index = TriangleIndex(mesh)
    return int(ray_parity_signs(index, np.asarray(p, dtype=float)[None, :], n_rays, rng)[0])


# --- surface sampling ------------------------------------------------------------------

def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator):
    """Area-weighted uniform samples. Returns (points, face_ids)."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    probs = areas / total
    fids = rng.choice(len(probs), size=n, p=probs)
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    b0 = 1.0 - su
    b1 = su * (1.0 - v)
    b2 = su * v
    c = mesh.triangle_corners()[fids]
    pts = b0[:, None] * c[:, 0] + b1[:, None] * c[:, 1] + b2[:, None] * c[:, 2]
    return pts, fids


def surface_samples_with_normals(mesh: Mesh, n: int, rng: np.random.Generator):
    pts, fids = sample_surface(mesh, n, rng)
    return pts, face_normals(mesh)[fids]
