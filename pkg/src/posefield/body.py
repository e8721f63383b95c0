"""Synthetic articulated capsule body with exact ground truth.

The body is a union of per-joint capsules, rigidly carried by the skeleton's
joint transforms, which makes its posed signed distance closed-form. An
optional per-joint bulge inflates capsule radii as a function of the joint's
bend angle, providing genuinely pose-dependent deformation for the
displacement network to learn.
"""

from dataclasses import dataclass, field

import numpy as np

from . import skeleton as sk
from .errors import ConfigError


@dataclass(frozen=True)
class BodyConfig:
    """Layout of the default biped fragment: torso, head, two arms."""

    arm_segments: int = 2
    torso_radius: float = 0.13
    head_radius: float = 0.095
    arm_radius: float = 0.055
    arm_taper: float = 0.85
    bulge_arm: tuple = (0.25, 0.45)   # fractional radius gain per arm segment
    bulge_torso: float = 0.0
    bulge_head: float = 0.0
    weight_sharpness: float = 25.0

    def validate(self):
        if self.arm_segments < 1:
            raise ConfigError("arm_segments must be >= 1")
        for name in ("torso_radius", "head_radius", "arm_radius"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 < self.arm_taper <= 1):
            raise ConfigError("arm_taper must be in (0, 1]")
        if self.weight_sharpness <= 0:
            raise ConfigError("weight_sharpness must be positive")


@dataclass(frozen=True)
class CapsuleBody:
    """Skeleton plus one capsule (segment + radius) per joint."""

    skeleton: sk.Skeleton
    seg_a: np.ndarray        # (K,3) canonical segment start
    seg_b: np.ndarray        # (K,3) canonical segment end
    radii: np.ndarray        # (K,)
    bulge: np.ndarray        # (K,) fractional radius gain at 90 degree bend
    sharpness: float = 25.0  # analytic weight falloff

    def __post_init__(self):
        K = self.skeleton.joint_count
        for name, arr, shape in (
            ("seg_a", self.seg_a, (K, 3)),
            ("seg_b", self.seg_b, (K, 3)),
            ("radii", self.radii, (K,)),
            ("bulge", self.bulge, (K,)),
        ):
            a = np.asarray(arr, dtype=float)
            if a.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {a.shape}")
            object.__setattr__(self, name, a)
        if np.any(self.radii <= 0):
            raise ConfigError("capsule radii must be positive")

    @property
    def joint_count(self) -> int:
        return self.skeleton.joint_count

    # --- geometry ---------------------------------------------------------

    def effective_radii(self, pose: sk.Pose) -> np.ndarray:
        """Per-part radius after the bend-angle bulge."""
        bend = np.linalg.norm(pose.rotations, axis=1)
        return self.radii * (1.0 + self.bulge * np.sin(np.clip(bend, 0.0, np.pi)))

    def _segment_distance(self, points, a, b):
        """Distance of (N,3) points to one segment, plus the foot parameter."""
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-18:
            t = np.zeros(points.shape[0])
        else:
            t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
        foot = a + t[:, None] * ab
        return np.linalg.norm(points - foot, axis=1), foot

    def canonical_part_sdf(self, points, radii=None) -> np.ndarray:
        """(N,K) per-part capsule SDF in canonical space."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        radii = self.radii if radii is None else radii
        out = np.empty((p.shape[0], self.joint_count))
        for i in range(self.joint_count):
            dist, _ = self._segment_distance(p, self.seg_a[i], self.seg_b[i])
            out[:, i] = dist - radii[i]
        return out

    def canonical_sdf(self, points) -> np.ndarray:
        """Exact union SDF of the rest-pose body."""
        single = np.asarray(points).ndim == 1
        d = self.canonical_part_sdf(points).min(axis=1)
        return float(d[0]) if single else d

    def analytic_weights(self, points) -> np.ndarray:
        """Smooth simplex weights from proximity to the capsule axes.

        softmax(-sharpness * segment_distance); tends to one-hot as the
        sharpness grows.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        dist = np.empty((p.shape[0], self.joint_count))
        for i in range(self.joint_count):
            dist[:, i], _ = self._segment_distance(p, self.seg_a[i], self.seg_b[i])
        logits = -self.sharpness * dist
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        w = e / e.sum(axis=1, keepdims=True)
        return w[0] if np.asarray(points).ndim == 1 else w

    def _local_points(self, pose: sk.Pose, points):
        """Points pulled into every part's canonical frame: (K,N,3)."""
        B = sk.forward_kinematics(self.skeleton, pose)
        p = np.atleast_2d(np.asarray(points, dtype=float))
        B_inv = np.linalg.inv(B)
        local = np.einsum("kab,nb->kna", B_inv[:, :3, :3], p) + B_inv[:, :3, 3][:, None, :]
        return B, local

    def posed_part_sdf(self, pose: sk.Pose, points) -> np.ndarray:
        """(N,K) per-part SDF of the posed (and bulged) body."""
        _, local = self._local_points(pose, points)
        radii = self.effective_radii(pose)
        n = local.shape[1]
        out = np.empty((n, self.joint_count))
        for i in range(self.joint_count):
            dist, _ = self._segment_distance(local[i], self.seg_a[i], self.seg_b[i])
            out[:, i] = dist - radii[i]
        return out

    def posed_sdf(self, pose: sk.Pose, points) -> np.ndarray:
        single = np.asarray(points).ndim == 1
        d = self.posed_part_sdf(pose, points).min(axis=1)
        return float(d[0]) if single else d

    def posed_sdf_normal(self, pose: sk.Pose, points):
        """Exact (d, n) of the posed body; n is the minimizing part's capsule
        gradient pushed forward by that part's rotation."""
        B, local = self._local_points(pose, points)
        radii = self.effective_radii(pose)
        n_pts = local.shape[1]
        dists = np.empty((n_pts, self.joint_count))
        normals_local = np.empty((self.joint_count, n_pts, 3))
        for i in range(self.joint_count):
            dist, foot = self._segment_distance(local[i], self.seg_a[i], self.seg_b[i])
            dists[:, i] = dist - radii[i]
            diff = local[i] - foot
            lens = np.linalg.norm(diff, axis=1)
            safe = np.where(lens < 1e-12, 1.0, lens)
            normals_local[i] = diff / safe[:, None]
        best = np.argmin(dists, axis=1)
        rows = np.arange(n_pts)
        d = dists[rows, best]
        n_loc = normals_local[best, rows]
        n_posed = np.einsum("nab,nb->na", B[best][:, :3, :3], n_loc)
        single = np.asarray(points).ndim == 1
        if single:
            return float(d[0]), n_posed[0]
        return d, n_posed

    def nearest_surface_weights(self, pose: sk.Pose, points) -> np.ndarray:
        """Analytic weights at the nearest posed-body surface point.

        The nearest-neighbor stand-in for learned associations: the query is
        pulled into its closest part's canonical frame, projected onto that
        capsule's surface, and the smooth weight profile is read off there.
        """
        _, local = self._local_points(pose, points)
        radii = self.effective_radii(pose)
        n_pts = local.shape[1]
        dists = np.empty((n_pts, self.joint_count))
        surf_pts = np.empty((self.joint_count, n_pts, 3))
        for i in range(self.joint_count):
            dist, foot = self._segment_distance(local[i], self.seg_a[i], self.seg_b[i])
            dists[:, i] = dist - radii[i]
            diff = local[i] - foot
            lens = np.linalg.norm(diff, axis=1)
            deg = lens < 1e-12
            dirs = np.where(deg[:, None], np.array([0.0, 0.0, 1.0]), diff)
            dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
            # canonical surface uses the canonical radius
            surf_pts[i] = foot + self.radii[i] * dirs
        best = np.argmin(dists, axis=1)
        rows = np.arange(n_pts)
        w = self.analytic_weights(surf_pts[best, rows])
        return w[0] if np.asarray(points).ndim == 1 else w

    def posed_bounds(self, pose: sk.Pose, margin: float = 0.3):
        """Axis-aligned box enclosing the posed body plus margin."""
        B = sk.forward_kinematics(self.skeleton, pose)
        ends = np.concatenate([self.seg_a, self.seg_b], axis=0)
        which = np.concatenate([np.arange(self.joint_count)] * 2)
        posed = np.einsum("nab,nb->na", B[which][:, :3, :3], ends) + B[which][:, :3, 3]
        r = np.concatenate([self.effective_radii(pose)] * 2)
        lo = (posed - r[:, None]).min(axis=0) - margin
        hi = (posed + r[:, None]).max(axis=0) + margin
        return lo, hi

    # --- serialization ------------------------------------------------------

    def to_text(self) -> str:
        lines = ["capsulebody 1", f"sharpness {self.sharpness!r}", f"joints {self.joint_count}"]
        lines.append("parents " + " ".join(str(int(p)) for p in self.skeleton.parents))
        for i in range(self.joint_count):
            j = self.skeleton.rest_joints[i]
            a = self.seg_a[i]
            b = self.seg_b[i]
            vals = [*j, *a, *b, self.radii[i], self.bulge[i]]
            lines.append(f"{i} " + " ".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "CapsuleBody":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines[0].startswith("capsulebody"):
            raise ValueError("not a capsule body record")
        sharpness = float(lines[1].split()[1])
        K = int(lines[2].split()[1])
        parents = np.array([int(t) for t in lines[3].split()[1:]], dtype=int)
        rest = np.zeros((K, 3))
        seg_a = np.zeros((K, 3))
        seg_b = np.zeros((K, 3))
        radii = np.zeros(K)
        bulge = np.zeros(K)
        for ln in lines[4 : 4 + K]:
            toks = ln.split()
            i = int(toks[0])
            vals = [float(t) for t in toks[1:]]
            rest[i] = vals[0:3]
            seg_a[i] = vals[3:6]
            seg_b[i] = vals[6:9]
            radii[i] = vals[9]
            bulge[i] = vals[10]
        return CapsuleBody(
            sk.Skeleton(parents, rest), seg_a, seg_b, radii, bulge, sharpness
        )


def make_synthetic_body(config: BodyConfig = None) -> CapsuleBody:
    """Build the default biped fragment, normalized to unit height.

    Torso and head stack along +y; two arms extend along +/-x in T-pose, each
    a chain of ``arm_segments`` capsules with tapering radius and length.
    """
    config = BodyConfig() if config is None else config
    config.validate()

    joints = [np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.52, 0.0])]
    parents = [-1, 0]
    seg_a = [np.array([0.0, 0.02, 0.0]), np.array([0.0, 0.56, 0.0])]
    seg_b = [np.array([0.0, 0.50, 0.0]), np.array([0.0, 0.70, 0.0])]
    radii = [config.torso_radius, config.head_radius]
    bulges = [config.bulge_torso, config.bulge_head]

    shoulder_y = 0.44
    seg_len0 = 0.23
    for side in (1.0, -1.0):
        parent = 0
        x = 0.11 * side
        for s in range(config.arm_segments):
            length = seg_len0 * (0.92**s)
            r = config.arm_radius * (config.arm_taper**s)
            joints.append(np.array([x, shoulder_y, 0.0]))
            parents.append(parent)
            a = np.array([x + 0.02 * side, shoulder_y, 0.0])
            b = np.array([x + (0.02 + length) * side, shoulder_y, 0.0])
            seg_a.append(a)
            seg_b.append(b)
            radii.append(r)
            gains = config.bulge_arm
            bulges.append(gains[min(s, len(gains) - 1)])
            parent = len(joints) - 1
            x += (0.02 + length + 0.01) * side

    joints = np.array(joints)
    seg_a = np.array(seg_a)
    seg_b = np.array(seg_b)
    radii = np.array(radii)
    bulges = np.array(bulges)

    y_lo = min((seg_a[:, 1] - radii).min(), (seg_b[:, 1] - radii).min())
    y_hi = max((seg_a[:, 1] + radii).max(), (seg_b[:, 1] + radii).max())
    scale = 1.0 / (y_hi - y_lo)

    return CapsuleBody(
        skeleton=sk.Skeleton(np.array(parents, dtype=int), joints * scale),
        seg_a=seg_a * scale,
        seg_b=seg_b * scale,
        radii=radii * scale,
        bulge=bulges,
        sharpness=config.weight_sharpness,
    )


def body_height(body: CapsuleBody) -> float:
    """Vertical extent of the rest-pose body including capsule radii."""
    y_lo = min(
        (body.seg_a[:, 1] - body.radii).min(), (body.seg_b[:, 1] - body.radii).min()
    )
    y_hi = max(
        (body.seg_a[:, 1] + body.radii).max(), (body.seg_b[:, 1] + body.radii).max()
    )
    return float(y_hi - y_lo)
