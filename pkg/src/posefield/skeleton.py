"""Kinematic chain, rigid joint transforms and the differentiable un-posing layer.

Conventions:
  * a skeleton is a tree of K joints; parents[i] < i and parents[root] == -1
  * a pose stores one axis-angle rotation per joint plus a root translation
  * joint transforms B (K,4,4) map canonical space to posed space so that the
    posed joint position is ``B[i] @ rest_joint_h[i]``; the identity pose gives
    B[i] == eye(4) for every joint
  * blend weights w are convex (simplex) coefficients over the K joints
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularBlendError

DEFAULT_COND_LIMIT = 1e8


def rotation_from_axis_angle(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues formula: axis-angle 3-vector to 3x3 rotation matrix."""
    aa = np.asarray(axis_angle, dtype=float)
    angle = float(np.linalg.norm(aa))
    if angle < 1e-12:
        return np.eye(3)
    axis = aa / angle
    x, y, z = axis
    cross = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) * np.cos(angle) + np.sin(angle) * cross + (1.0 - np.cos(angle)) * np.outer(axis, axis)


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree with canonical (rest) joint positions."""

    parents: np.ndarray       # (K,) int, -1 for the root
    rest_joints: np.ndarray   # (K,3) canonical joint positions

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=int)
        rest = np.asarray(self.rest_joints, dtype=float)
        if parents.ndim != 1 or rest.shape != (parents.shape[0], 3):
            raise ValueError(f"parents {parents.shape} / rest_joints {rest.shape} mismatch")
        if parents.shape[0] < 1:
            raise ValueError("skeleton needs at least one joint")
        if np.count_nonzero(parents < 0) != 1:
            raise ValueError("skeleton must have exactly one root")
        for i, p in enumerate(parents):
            if p >= 0 and p >= i:
                raise ValueError(f"joint {i} has parent {p}; parents must precede children")
        if not np.all(np.isfinite(rest)):
            raise ValueError("rest joints must be finite")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_joints", rest)

    @property
    def joint_count(self) -> int:
        return int(self.parents.shape[0])


@dataclass(frozen=True)
class Pose:
    """Per-joint axis-angle rotations plus a root translation."""

    rotations: np.ndarray                               # (K,3) radians
    root_translation: np.ndarray = field(default=None)  # (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=float)
        if rot.ndim != 2 or rot.shape[1] != 3:
            raise ValueError(f"rotations must be (K,3), got {rot.shape}")
        if not np.all(np.isfinite(rot)):
            raise ValueError("rotations must be finite")
        trans = self.root_translation
        trans = np.zeros(3) if trans is None else np.asarray(trans, dtype=float)
        if trans.shape != (3,) or not np.all(np.isfinite(trans)):
            raise ValueError("root_translation must be a finite 3-vector")
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "root_translation", trans)

    @property
    def joint_count(self) -> int:
        return int(self.rotations.shape[0])

    def flat(self) -> np.ndarray:
        """Rotations as the flat length-3K vector fed to the networks."""
        return self.rotations.reshape(-1)

    @staticmethod
    def identity(joint_count: int) -> "Pose":
        return Pose(np.zeros((joint_count, 3)))


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Per-joint rigid transforms B (K,4,4) from canonical to posed space.

    Rotations act about each joint's rest position; transforms compose down
    the kinematic chain. The root additionally carries the pose's global
    translation.
    """
    if pose.joint_count != skeleton.joint_count:
        raise ValueError(
            f"pose has {pose.joint_count} joints, skeleton has {skeleton.joint_count}"
        )
    K = skeleton.joint_count
    rest = skeleton.rest_joints

    # Globals G[i] map joint-local coordinates (origin at the joint) to posed
    # space; B[i] = G[i] @ translate(-rest[i]) is then relative to canonical.
    G = np.zeros((K, 4, 4))
    for i in range(K):
        local = np.eye(4)
        local[:3, :3] = rotation_from_axis_angle(pose.rotations[i])
        p = skeleton.parents[i]
        if p < 0:
            local[:3, 3] = rest[i] + pose.root_translation
            G[i] = local
        else:
            local[:3, 3] = rest[i] - rest[p]
            G[i] = G[p] @ local

    B = G.copy()
    # right-multiply by translate(-rest): only the last column changes
    B[:, :3, 3] -= np.einsum("kab,kb->ka", G[:, :3, :3], rest)
    return B


def posed_joints(skeleton: Skeleton, transforms: np.ndarray) -> np.ndarray:
    """Posed joint positions j_i = B_i applied to the rest joints."""
    rest = skeleton.rest_joints
    return np.einsum("kab,kb->ka", transforms[:, :3, :3], rest) + transforms[:, :3, 3]


def validate_blend_weights(w: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    """Check the simplex invariants; returns the weights as float array."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise ValueError(f"blend weights must be 1-D, got shape {w.shape}")
    if np.any(w < -atol) or np.any(w > 1.0 + atol):
        raise ValueError("blend weights must lie in [0, 1]")
    if abs(float(w.sum()) - 1.0) > atol:
        raise ValueError(f"blend weights must sum to 1, got {w.sum()!r}")
    return w


def blend_transform(w: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    """Entrywise convex combination sum_i w_i B_i of the joint transforms."""
    w = validate_blend_weights(w)
    if transforms.shape != (w.shape[0], 4, 4):
        raise ValueError(f"expected ({w.shape[0]},4,4) transforms, got {transforms.shape}")
    return np.einsum("k,kab->ab", w, transforms)


def blend_transform_batch(w: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    """Blend for a batch of weight rows: (N,K) x (K,4,4) -> (N,4,4)."""
    flat = w @ transforms.reshape(transforms.shape[0], 16)
    return flat.reshape(-1, 4, 4)


def _cond_estimate(A: np.ndarray, A_inv: np.ndarray) -> np.ndarray:
    """Frobenius-norm condition estimate, an upper bound on the 2-norm one."""
    na = np.sqrt(np.sum(A * A, axis=(-2, -1)))
    nb = np.sqrt(np.sum(A_inv * A_inv, axis=(-2, -1)))
    return na * nb


def unpose_point(
    p: np.ndarray,
    w: np.ndarray,
    transforms: np.ndarray,
    cond_limit: float = DEFAULT_COND_LIMIT,
) -> np.ndarray:
    """Map a posed point to canonical space through the inverse blended transform.

    Returns pbar with ``blend @ [pbar,1] == [p,1]``. Raises SingularBlendError
    when the blend's condition estimate exceeds ``cond_limit``.
    """
    p = np.asarray(p, dtype=float)
    A = blend_transform(w, transforms)
    try:
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise SingularBlendError(p, np.inf) from None
    cond = _cond_estimate(A, A_inv)
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularBlendError(p, cond)
    return A_inv[:3, :3] @ p + A_inv[:3, 3]


def unpose_points_batch(
    p: np.ndarray,
    w: np.ndarray,
    transforms: np.ndarray,
    cond_limit: float = DEFAULT_COND_LIMIT,
):
    """Batched un-posing: (N,3) points, (N,K) weights.

    Returns (pbar, A_inv, ok) where ok flags rows whose blend was invertible
    within the condition limit; bad rows hold zeros instead of raising so grid
    sweeps can record them.
    """
    A = blend_transform_batch(w, transforms)
    ok = np.ones(A.shape[0], dtype=bool)
    A_inv = np.zeros_like(A)
    # singular matrices would make the batched inverse throw; detect first
    det = np.linalg.det(A)
    good = np.abs(det) > 1e-300
    if np.any(good):
        A_inv[good] = np.linalg.inv(A[good])
    ok &= good
    cond = _cond_estimate(A, A_inv)
    ok &= np.isfinite(cond) & (cond <= cond_limit)
    pbar = np.einsum("nab,nb->na", A_inv[:, :3, :3], p) + A_inv[:, :3, 3]
    pbar[~ok] = 0.0
    return pbar, A_inv, ok


def unpose_jacobians(p: np.ndarray, w: np.ndarray, transforms: np.ndarray):
    """Analytic Jacobians of unpose_point at (p, w).

    Returns (d_dp, d_dw): d_dp is (3,3) with d pbar / d p, and d_dw is (K,3)
    whose i-th row is d pbar / d w_i = -(A^-1 B_i [pbar,1])_xyz.
    """
    p = np.asarray(p, dtype=float)
    A = blend_transform(w, transforms)
    A_inv = np.linalg.inv(A)
    pbar_h = A_inv @ np.append(p, 1.0)
    d_dp = A_inv[:3, :3].copy()
    d_dw = -np.einsum("ab,kbc,c->ka", A_inv, transforms, pbar_h)[:, :3]
    return d_dp, d_dw


def pose_encoding(p: np.ndarray, joints: np.ndarray) -> np.ndarray:
    """Offset vectors p - j_i, one row per joint.

    Used with posed joints for the posed-space encoding and with rest joints
    for its canonical counterpart.
    """
    p = np.asarray(p, dtype=float)
    joints = np.asarray(joints, dtype=float)
    if joints.ndim != 2 or joints.shape[1] != 3:
        raise ValueError(f"joints must be (K,3), got {joints.shape}")
    if p.shape == (3,):
        return p[None, :] - joints
    if p.ndim == 2 and p.shape[1] == 3:
        return p[:, None, :] - joints[None, :, :]
    raise ValueError(f"point must be (3,) or (N,3), got {p.shape}")


def weighted_pose(w: np.ndarray, pose: Pose) -> np.ndarray:
    """Per-joint scaling of the flat pose vector: component (i,c) -> w_i * theta_ic."""
    w = np.asarray(w, dtype=float)
    theta = pose.rotations
    if w.ndim == 1:
        if w.shape[0] != theta.shape[0]:
            raise ValueError("weight/pose joint count mismatch")
        return (w[:, None] * theta).reshape(-1)
    if w.ndim == 2 and w.shape[1] == theta.shape[0]:
        return (w[:, :, None] * theta[None, :, :]).reshape(w.shape[0], -1)
    raise ValueError(f"weights must be (K,) or (N,K), got {w.shape}")


# --- structured-text serialization ------------------------------------------

def skeleton_to_text(skeleton: Skeleton) -> str:
    lines = [f"joints {skeleton.joint_count}"]
    lines.append("parents " + " ".join(str(int(p)) for p in skeleton.parents))
    for i, j in enumerate(skeleton.rest_joints):
        lines.append(f"{i} {j[0]!r} {j[1]!r} {j[2]!r}")
    return "\n".join(lines) + "\n"


def skeleton_from_text(text: str) -> Skeleton:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != "joints":
        raise ValueError("skeleton text must start with 'joints <K>'")
    K = int(head[1])
    parents = np.array([int(t) for t in lines[1].split()[1:]], dtype=int)
    rest = np.zeros((K, 3))
    for ln in lines[2 : 2 + K]:
        toks = ln.split()
        rest[int(toks[0])] = [float(toks[1]), float(toks[2]), float(toks[3])]
    return Skeleton(parents=parents, rest_joints=rest)


def pose_to_text(pose: Pose) -> str:
    lines = [f"joints {pose.joint_count}"]
    t = pose.root_translation
    lines.append(f"translation {t[0]!r} {t[1]!r} {t[2]!r}")
    for i, r in enumerate(pose.rotations):
        lines.append(f"{i} {r[0]!r} {r[1]!r} {r[2]!r}")
    return "\n".join(lines) + "\n"


def pose_from_text(text: str) -> Pose:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    K = int(lines[0].split()[1])
    trans = np.array([float(t) for t in lines[1].split()[1:]])
    rot = np.zeros((K, 3))
    for ln in lines[2 : 2 + K]:
        toks = ln.split()
        rot[int(toks[0])] = [float(toks[1]), float(toks[2]), float(toks[3])]
    return Pose(rotations=rot, root_translation=trans)
