"""Training data pipeline: posed ground-truth meshes and noisy point samples.

Dataset directory layout:

    manifest            key = value lines plus the train/held-out frame split
    body.txt            capsule body record (skeleton + capsules)
    frames/{id}.obj     ground-truth surface mesh of the posed frame
    frames/{id}.pose    pose record
    samples/{id}.bin    packed sample records (p, d, n as float32, band u8)

Per-frame random streams derive from (seed, frame index) so regeneration is
byte-identical for a fixed seed and frame order.
"""

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import skeleton as sk
from .body import CapsuleBody
from .errors import ConfigError
from .isosurface import ScalarField, marching_cubes
from .meshio import Mesh, export_obj, face_normals, import_obj
from .meshquery import TriangleIndex, closest_points, ray_parity_signs, sample_surface

BAND_SURFACE, BAND_NEAR, BAND_FAR = 0, 1, 2
BAND_NAMES = {BAND_SURFACE: "surface", BAND_NEAR: "near", BAND_FAR: "far"}

SAMPLE_DTYPE = np.dtype(
    [("p", "<f4", 3), ("d", "<f4"), ("n", "<f4", 3), ("band", "u1")]
)


@dataclass
class Frame:
    frame_id: int
    pose: sk.Pose
    mesh: Mesh
    beta: np.ndarray = None


@dataclass
class FrameSamples:
    frame_id: int
    p: np.ndarray      # (M,3) posed-space points
    d: np.ndarray      # (M,) signed distances
    n: np.ndarray      # (M,3) unit normals at the nearest surface point
    band: np.ndarray   # (M,) u8 band tags


@dataclass(frozen=True)
class DataConfig:
    n_poses: int = 50
    n_surface: int = 10000
    sigmas: tuple = (0.01, 0.1)
    mesh_res: int = 128
    train_fraction: float = 0.8
    seed: int = 0
    pose_amplitude: float = 1.0
    gt_source: str = "mesh"        # "mesh": nearest triangle + ray parity; "oracle": exact
    margin: float = 0.3

    def validate(self):
        if self.n_poses < 1:
            raise ConfigError("n_poses must be >= 1")
        if self.mesh_res < 32:
            raise ConfigError("mesh_res must be >= 32")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must be in (0, 1]")
        if self.gt_source not in ("mesh", "oracle"):
            raise ConfigError(f"unknown gt_source {self.gt_source!r}")
        if any(s <= 0 for s in self.sigmas):
            raise ConfigError("sigmas must be positive")

    def content_hash(self) -> str:
        text = repr(sorted(self.__dict__.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def frame_mesh(body: CapsuleBody, pose: sk.Pose, resolution: int = 128, margin: float = 0.3) -> Mesh:
    """Watertight triangle mesh of the posed body via the exact oracle."""
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    lo, hi = body.posed_bounds(pose, margin=margin)
    n = resolution
    axes = [lo[a] + np.arange(n) * (hi[a] - lo[a]) / n for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    vals = body.posed_sdf(pose, pts).reshape(n, n, n)
    return marching_cubes(ScalarField(vals, lo, hi), 0.0)


def sample_poses(body: CapsuleBody, n: int, rng: np.random.Generator, amplitude: float = 1.0):
    """Random plausible poses for the biped fragment, asymmetric per limb.

    Shoulders swing down/forward, elbows bend, head and torso wiggle. Ranges
    scale with ``amplitude``.
    """
    skel = body.skeleton
    K = skel.joint_count
    parents = skel.parents
    side_sign = np.sign(skel.rest_joints[:, 0])  # +1 left arm, -1 right arm
    poses = []
    for _ in range(n):
        rot = np.zeros((K, 3))
        rot[0] = rng.uniform(-0.15, 0.15, 3)
        if K > 1:
            rot[1] = rng.uniform(-0.3, 0.3, 3) * np.array([1.0, 1.0, 0.5])
        for i in range(2, K):
            if parents[i] == 0:  # shoulder
                swing = rng.uniform(-1.2, 0.35)
                fwd = rng.uniform(-0.7, 0.7)
                twist = rng.uniform(-0.3, 0.3)
                rot[i] = [twist, fwd, swing * (1.0 if side_sign[i] > 0 else -1.0)]
            else:  # elbow-like
                bend = rng.uniform(0.0, 1.5)
                fwd = rng.uniform(-0.5, 0.5)
                rot[i] = [0.0, fwd, bend * (-1.0 if side_sign[i] > 0 else 1.0)]
        poses.append(sk.Pose(rot * amplitude))
    return poses


def sample_training_points(
    frame: Frame,
    n_surface: int,
    sigmas=(0.01, 0.1),
    rng: np.random.Generator = None,
    gt_source: str = "mesh",
    body: CapsuleBody = None,
) -> FrameSamples:
    """Surface samples plus one Gaussian-displaced band per sigma.

    Ground truth is the unsigned nearest-triangle distance signed by ray
    parity ("mesh"), or the exact capsule oracle ("oracle", needs body).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    mesh = frame.mesh
    if mesh.n_faces == 0 or float(mesh.triangle_areas().sum()) <= 0:
        raise ValueError("frame mesh is degenerate (no area)")

    base, fids = sample_surface(mesh, n_surface, rng)
    fn = face_normals(mesh)

    pts_list = [base]
    band_list = [np.full(n_surface, BAND_SURFACE, dtype=np.uint8)]
    for code, sigma in zip((BAND_NEAR, BAND_FAR), sigmas):
        noisy_base, _ = sample_surface(mesh, n_surface, rng)
        noise = rng.normal(scale=sigma, size=(n_surface, 3))
        pts_list.append(noisy_base + noise)
        band_list.append(np.full(n_surface, code, dtype=np.uint8))
    pts = np.concatenate(pts_list, axis=0)
    bands = np.concatenate(band_list)

    if gt_source == "oracle":
        if body is None:
            raise ValueError("oracle ground truth requires the capsule body")
        d, normals = body.posed_sdf_normal(frame.pose, pts)
    else:
        index = TriangleIndex(mesh)
        dist, _, tid = closest_points(index, pts)
        normals = fn[tid]
        signs = np.ones(len(pts))
        noisy = bands != BAND_SURFACE
        if np.any(noisy):
            signs[noisy] = ray_parity_signs(index, pts[noisy], n_rays=5, rng=rng)
        d = dist * signs
        # points generated on faces are the surface itself
        d[~noisy] = dist[~noisy]

    return FrameSamples(frame.frame_id, pts, d, normals, bands)


def save_samples(samples: FrameSamples, path) -> None:
    rec = np.empty(len(samples.p), dtype=SAMPLE_DTYPE)
    rec["p"] = samples.p.astype("<f4")
    rec["d"] = samples.d.astype("<f4")
    rec["n"] = samples.n.astype("<f4")
    rec["band"] = samples.band
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def load_samples(path, frame_id: int) -> FrameSamples:
    rec = np.fromfile(path, dtype=SAMPLE_DTYPE)
    return FrameSamples(
        frame_id,
        rec["p"].astype(float),
        rec["d"].astype(float),
        rec["n"].astype(float),
        rec["band"].copy(),
    )


@dataclass
class Dataset:
    root: Path
    body: CapsuleBody
    config: DataConfig
    train_ids: list
    heldout_ids: list
    poses: dict                      # frame_id -> Pose
    _mesh_cache: dict = field(default_factory=dict)
    _sample_cache: dict = field(default_factory=dict)

    @property
    def skeleton(self) -> sk.Skeleton:
        return self.body.skeleton

    def frame_ids(self):
        return sorted(self.train_ids + self.heldout_ids)

    def mesh(self, frame_id: int) -> Mesh:
        if frame_id not in self._mesh_cache:
            self._mesh_cache[frame_id] = import_obj(self.root / "frames" / f"{frame_id:04d}.obj")
        return self._mesh_cache[frame_id]

    def samples(self, frame_id: int) -> FrameSamples:
        if frame_id not in self._sample_cache:
            self._sample_cache[frame_id] = load_samples(
                self.root / "samples" / f"{frame_id:04d}.bin", frame_id
            )
        return self._sample_cache[frame_id]

    def pose(self, frame_id: int) -> sk.Pose:
        return self.poses[frame_id]


def build_dataset(body: CapsuleBody, poses, config: DataConfig, out_dir) -> Dataset:
    """Generate meshes and samples for every pose and persist the dataset."""
    config.validate()
    if len(poses) < 1:
        raise ValueError("need at least one pose")
    root = Path(out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "samples").mkdir(parents=True, exist_ok=True)

    n_train = int(round(len(poses) * config.train_fraction))
    n_train = min(max(n_train, 1), len(poses))
    train_ids = list(range(n_train))
    heldout_ids = list(range(n_train, len(poses)))

    pose_map = {}
    for fid, pose in enumerate(poses):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, fid]))
        mesh = frame_mesh(body, pose, config.mesh_res, config.margin)
        frame = Frame(fid, pose, mesh)
        samples = sample_training_points(
            frame, config.n_surface, config.sigmas, rng, config.gt_source, body
        )
        export_obj(mesh, root / "frames" / f"{fid:04d}.obj")
        with open(root / "frames" / f"{fid:04d}.pose", "w") as fh:
            fh.write(sk.pose_to_text(pose))
        save_samples(samples, root / "samples" / f"{fid:04d}.bin")
        pose_map[fid] = pose

    with open(root / "body.txt", "w") as fh:
        fh.write(body.to_text())

    lines = [
        "posefield-dataset 1",
        f"seed {config.seed}",
        f"frames {len(poses)}",
        f"n_surface {config.n_surface}",
        f"sigmas {' '.join(repr(s) for s in config.sigmas)}",
        f"mesh_res {config.mesh_res}",
        f"gt_source {config.gt_source}",
        f"config_hash {config.content_hash()}",
        "train " + " ".join(str(i) for i in train_ids),
        "heldout " + " ".join(str(i) for i in heldout_ids),
    ]
    with open(root / "manifest", "w") as fh:
        fh.write("\n".join(lines) + "\n")

    return Dataset(root, body, config, train_ids, heldout_ids, pose_map)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = {}
    with open(root / "manifest") as fh:
        for ln in fh:
            toks = ln.split()
            if not toks:
                continue
            manifest[toks[0]] = toks[1:]
    with open(root / "body.txt") as fh:
        body = CapsuleBody.from_text(fh.read())
    train_ids = [int(t) for t in manifest.get("train", [])]
    heldout_ids = [int(t) for t in manifest.get("heldout", [])]
    poses = {}
    for fid in train_ids + heldout_ids:
        with open(root / "frames" / f"{fid:04d}.pose") as fh:
            poses[fid] = sk.pose_from_text(fh.read())
    config = DataConfig(
        n_poses=int(manifest["frames"][0]),
        n_surface=int(manifest["n_surface"][0]),
        sigmas=tuple(float(s) for s in manifest["sigmas"]),
        mesh_res=int(manifest["mesh_res"][0]),
        seed=int(manifest["seed"][0]),
        gt_source=manifest["gt_source"][0],
    )
    return Dataset(root, body, config, train_ids, heldout_ids, poses)
