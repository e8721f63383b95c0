"""Triangle mesh container and OBJ / PLY readers and writers.

Files are written at float32 precision and round-trip losslessly through the
matching importer at that precision.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Mesh:
    vertices: np.ndarray              # (V,3) float
    faces: np.ndarray                 # (F,3) int
    normals: np.ndarray = None        # optional (V,3) unit vectors

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if self.normals.shape[0] != self.vertices.shape[0]:
                raise ValueError("need one normal per vertex")

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    def triangle_corners(self) -> np.ndarray:
        """(F,3,3) corner positions."""
        return self.vertices[self.faces]

    def triangle_areas(self) -> np.ndarray:
        c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def face_normals(mesh: Mesh) -> np.ndarray:
    """Per-face unit normals following the winding order."""
    c = mesh.triangle_corners()
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    lens = np.linalg.norm(n, axis=1)
    lens[lens == 0] = 1.0
    return n / lens[:, None]


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted average of incident face normals, normalized."""
    c = mesh.triangle_corners()
    fn = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])  # area-weighted
    vn = np.zeros_like(mesh.vertices)
    np.add.at(vn, mesh.faces.ravel(), np.repeat(fn, 3, axis=0))
    lens = np.linalg.norm(vn, axis=1)
    lens[lens == 0] = 1.0
    return vn / lens[:, None]


def is_watertight(mesh: Mesh) -> bool:
    """Every undirected edge shared by exactly two faces."""
    if mesh.n_faces == 0:
        return False
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def drop_degenerate_faces(mesh: Mesh) -> Mesh:
    """Remove faces with a repeated vertex index."""
    f = mesh.faces
    good = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    if np.all(good):
        return mesh
    return Mesh(mesh.vertices, f[good], mesh.normals)


# --- OBJ ---------------------------------------------------------------------

def _f32(x: float) -> str:
    return format(np.float32(x), ".9g")


def export_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {_f32(v[0])} {_f32(v[1])} {_f32(v[2])}\n")
        if mesh.normals is not None:
            for n in mesh.normals:
                fh.write(f"vn {_f32(n[0])} {_f32(n[1])} {_f32(n[2])}\n")
            for f in mesh.faces:
                a, b, c = f + 1
                fh.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")
        else:
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def import_obj(path) -> Mesh:
    verts, norms, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            toks = line.split()
            if not toks:
                continue
            if toks[0] == "v":
                verts.append([float(t) for t in toks[1:4]])
            elif toks[0] == "vn":
                norms.append([float(t) for t in toks[1:4]])
            elif toks[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in toks[1:4]]
                faces.append(idx)
    return Mesh(
        np.array(verts, dtype=float).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(norms, dtype=float) if norms else None,
    )


# --- PLY ---------------------------------------------------------------------

def export_ply(mesh: Mesh, path, binary: bool = True) -> None:
    has_n = mesh.normals is not None
    props = ["property float x", "property float y", "property float z"]
    if has_n:
        props += ["property float nx", "property float ny", "property float nz"]
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        *props,
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    vdata = mesh.vertices if not has_n else np.hstack([mesh.vertices, mesh.normals])
    vdata = vdata.astype("<f4")
    if binary:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(vdata.tobytes())
            for f in mesh.faces:
                fh.write(struct.pack("<Biii", 3, int(f[0]), int(f[1]), int(f[2])))
    else:
        with open(path, "w") as fh:
            fh.write("\n".join(header) + "\n")
            for row in vdata:
                fh.write(" ".join(_f32(x) for x in row) + "\n")
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def import_ply(path) -> Mesh:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header") + len(b"end_header") + 1
    header = data[:end].decode("ascii").splitlines()
    fmt = None
    n_vert = n_face = 0
    vprops = []
    section = None
    for line in header:
        toks = line.split()
        if not toks:
            continue
        if toks[0] == "format":
            fmt = toks[1]
        elif toks[0] == "element":
            section = toks[1]
            if section == "vertex":
                n_vert = int(toks[2])
            elif section == "face":
                n_face = int(toks[2])
        elif toks[0] == "property" and section == "vertex" and toks[1] != "list":
            vprops.append(toks[2])
    has_n = "nx" in vprops
    width = len(vprops)

    if fmt == "binary_little_endian":
        body = data[end:]
        vdata = np.frombuffer(body, dtype="<f4", count=n_vert * width).reshape(n_vert, width)
        off = n_vert * width * 4
        faces = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            cnt = body[off]
            if cnt != 3:
                raise ValueError("only triangle faces supported")
            faces[i] = struct.unpack_from("<iii", body, off + 1)
            off += 1 + 12
    elif fmt == "ascii":
        lines = data[end:].decode("ascii").splitlines()
        vdata = np.array([[float(t) for t in ln.split()] for ln in lines[:n_vert]])
        vdata = vdata.reshape(n_vert, width) if n_vert else np.zeros((0, width))
        faces = np.array(
            [[int(t) for t in ln.split()[1:4]] for ln in lines[n_vert : n_vert + n_face]],
            dtype=np.int64,
        ).reshape(-1, 3)
    else:
        raise ValueError(f"unsupported PLY format {fmt!r}")

    verts = vdata[:, :3].astype(float)
    normals = vdata[:, 3:6].astype(float) if has_n else None
    return Mesh(verts, faces, normals)


def export_mesh(mesh: Mesh, path, fmt: str = None) -> None:
    """Write OBJ or PLY based on ``fmt`` or the file extension."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        export_obj(mesh, path)
    elif fmt == "ply":
        export_ply(mesh, path)
    elif fmt == "ply-ascii":
        export_ply(mesh, path, binary=False)
    else:
        raise ValueError(f"unsupported mesh format {fmt!r}")


def import_mesh(path) -> Mesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return import_obj(path)
    if path.suffix.lower() == ".ply":
        return import_ply(path)
    raise ValueError(f"unsupported mesh extension {path.suffix!r}")
