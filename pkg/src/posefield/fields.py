"""The composed pose-conditioned SDF evaluator.

Four (optionally five) networks cooperate per query point p in posed space:

  weight_net       encode(p), joint offsets         -> blend weights w (simplex)
  (un-posing)      pbar = (sum_i w_i B_i)^-1 p
  displacement_net encode(pbar), w*theta, rest offs -> delta (pose deformation)
  shape_net        encode(pbar), beta               -> delta_shape (optional)
  sdf_net          encode(q), w*theta, rest offs    -> signed distance at q = pbar + deltas
  normal_net       encode(q), w*theta, rest offs    -> canonical unit normal

All of it is differentiable; sdf_backward implements the exact reverse-mode
chain through the blended-matrix inverse, the encodings and every network, so
the training loop gets gradients for weight_net, displacement_net and sdf_net
(and optionally the query point itself).
"""

from dataclasses import dataclass

import numpy as np

from . import skeleton as sk
from .errors import DegenerateNormalError, SingularBlendError
from .nets import (
    EncodingConfig,
    Mlp,
    init_mlp,
    load_mlps,
    mlp_backward,
    mlp_forward,
    positional_encode,
    positional_encode_backward,
    save_mlps,
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; relative capacities are deliberately config-exposed."""

    octaves: int = 6
    include_input: bool = True
    hidden_weight: tuple = (256, 256, 256, 256)
    hidden_displacement: tuple = (256, 256, 256)
    hidden_sdf: tuple = (256, 256, 256, 256, 256)
    hidden_normal: tuple = (256, 256, 256)
    hidden_shape: tuple = (256, 256, 256)
    softplus_beta: float = 100.0
    shape_dim: int = 0
    sdf_bias_init: float = 0.1
    cond_limit: float = sk.DEFAULT_COND_LIMIT

    def encoding(self) -> EncodingConfig:
        return EncodingConfig(self.octaves, self.include_input)


@dataclass
class PosedSdfModel:
    """Parameter bundle plus the evaluation logic."""

    skeleton: sk.Skeleton
    encoding: EncodingConfig
    weight_net: Mlp
    displacement_net: Mlp
    sdf_net: Mlp
    normal_net: Mlp
    shape_net: Mlp = None
    shape_dim: int = 0
    cond_limit: float = sk.DEFAULT_COND_LIMIT
    # analytic nearest-surface weights instead of weight_net (ablation mode)
    nn_weight_body: object = None

    @property
    def joint_count(self) -> int:
        return self.skeleton.joint_count

    @property
    def uses_learned_weights(self) -> bool:
        return self.nn_weight_body is None

    # --- construction -----------------------------------------------------

    @staticmethod
    def create(skeleton: sk.Skeleton, config: ModelConfig, rng: np.random.Generator):
        K = skeleton.joint_count
        enc = config.encoding()
        e = enc.output_dim(3)
        sd = config.shape_dim
        cond_dim = 3 * K + 3 * K + sd  # weighted pose + canonical offsets + beta

        weight_net = init_mlp(
            rng, [e + 3 * K + sd, *config.hidden_weight, K],
            head="simplex", softplus_beta=config.softplus_beta,
        )
        displacement_net = init_mlp(
            rng, [e + cond_dim, *config.hidden_displacement, 3],
            head="linear", softplus_beta=config.softplus_beta, zero_final=True,
        )
        sdf_net = init_mlp(
            rng, [e + cond_dim, *config.hidden_sdf, 1],
            head="linear", softplus_beta=config.softplus_beta,
            final_bias=config.sdf_bias_init,
        )
        normal_net = init_mlp(
            rng, [e + cond_dim, *config.hidden_normal, 3],
            head="unit", softplus_beta=config.softplus_beta,
        )
        shape_net = None
        if sd > 0:
            shape_net = init_mlp(
                rng, [e + sd, *config.hidden_shape, 3],
                head="linear", softplus_beta=config.softplus_beta, zero_final=True,
            )
        return PosedSdfModel(
            skeleton=skeleton,
            encoding=enc,
            weight_net=weight_net,
            displacement_net=displacement_net,
            sdf_net=sdf_net,
            normal_net=normal_net,
            shape_net=shape_net,
            shape_dim=sd,
            cond_limit=config.cond_limit,
        )

    def trainable(self):
        nets = {
            "weight": self.weight_net,
            "displacement": self.displacement_net,
            "sdf": self.sdf_net,
            "normal": self.normal_net,
        }
        if self.shape_net is not None:
            nets["shape"] = self.shape_net
        return nets

    # --- forward ------------------------------------------------------------

    def _check_beta(self, beta, n):
        if self.shape_dim == 0:
            if beta is not None:
                raise ValueError("model has no shape branch; beta must be None")
            return None
        b = np.asarray(beta, dtype=float)
        if b.ndim == 1:
            if b.shape[0] != self.shape_dim:
                raise ValueError(f"beta must have length {self.shape_dim}")
            b = np.broadcast_to(b, (n, self.shape_dim))
        if b.shape != (n, self.shape_dim):
            raise ValueError(f"beta batch shape {b.shape} invalid")
        return np.ascontiguousarray(b)

    def _weights(self, points, enc_p, p_off, pose, beta_rows):
        """Blend weights for a batch, learned or analytic-nearest-neighbor."""
        if self.uses_learned_weights:
            cols = [enc_p, p_off] if beta_rows is None else [enc_p, p_off, beta_rows]
            x_w = np.concatenate(cols, axis=1)
            w, cache_w = mlp_forward(self.weight_net, x_w)
            return w, cache_w
        w = self.nn_weight_body.nearest_surface_weights(pose, points)
        return w, None

    def sdf_forward(self, points, pose: sk.Pose, beta=None, use_displacement=True):
        """Batched SDF evaluation retaining everything the backward pass needs.

        Returns (d, SdfForwardCache). Rows with a near-singular blend are
        flagged in cache.ok and get d = 0 there.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        n = p.shape[0]
        if pose.joint_count != self.joint_count:
            raise ValueError("pose joint count does not match model skeleton")
        beta_rows = self._check_beta(beta, n)

        B = sk.forward_kinematics(self.skeleton, pose)
        joints = sk.posed_joints(self.skeleton, B)
        theta = pose.rotations  # (K,3)

        enc_p = positional_encode(p, self.encoding)
        p_off = sk.pose_encoding(p, joints).reshape(n, -1)
        w, cache_w = self._weights(p, enc_p, p_off, pose, beta_rows)

        pbar, A_inv, ok = sk.unpose_points_batch(p, w, B, self.cond_limit)

        wtheta = (w[:, :, None] * theta[None, :, :]).reshape(n, -1)
        rest_off = sk.pose_encoding(pbar, self.skeleton.rest_joints).reshape(n, -1)
        enc_pb = positional_encode(pbar, self.encoding)

        cond_cols = [wtheta, rest_off]
        if beta_rows is not None:
            cond_cols.append(beta_rows)

        delta = np.zeros((n, 3))
        cache_def = None
        x_def = None
        if use_displacement:
            x_def = np.concatenate([enc_pb, *cond_cols], axis=1)
            delta, cache_def = mlp_forward(self.displacement_net, x_def)

        delta_shape = np.zeros((n, 3))
        cache_shape = None
        if self.shape_net is not None and use_displacement:
            x_shape = np.concatenate([enc_pb, beta_rows], axis=1)
            delta_shape, cache_shape = mlp_forward(self.shape_net, x_shape)

        q = pbar + delta + delta_shape
        enc_q = positional_encode(q, self.encoding)
        x_sdf = np.concatenate([enc_q, *cond_cols], axis=1)
        d_col, cache_sdf = mlp_forward(self.sdf_net, x_sdf)
        d = d_col[:, 0].copy()
        d[~ok] = 0.0

        cache = SdfForwardCache(
            points=p, pose=pose, beta_rows=beta_rows, transforms=B,
            posed_joints=joints, enc_p=enc_p, p_off=p_off, w=w, cache_w=cache_w,
            A_inv=A_inv, ok=ok, pbar=pbar, wtheta=wtheta, rest_off=rest_off,
            enc_pb=enc_pb, delta=delta, cache_def=cache_def,
            delta_shape=delta_shape, cache_shape=cache_shape, q=q,
            cache_sdf=cache_sdf, d=d, use_displacement=use_displacement,
        )
        return d, cache

    def sdf_backward(
        self,
        cache,
        d_grad,
        delta_grad_extra=None,
        train_weight=True,
        train_displacement=True,
        train_sdf=True,
        want_point_grad=False,
    ):
        """Reverse-mode pass of sdf_forward.

        d_grad is dLoss/dd per row. delta_grad_extra, if given, is an extra
        dLoss/ddelta term (the displacement regularizer). Rows flagged not-ok
        in the cache must carry zero d_grad. Returns (grads, point_grad) where
        grads maps net name -> per-layer (dW, db) lists.
        """
        n = cache.points.shape[0]
        K = self.joint_count
        enc = self.encoding
        theta = cache.pose.rotations

        gd = np.asarray(d_grad, dtype=float).reshape(n, 1)
        grads = {}

        grads_sdf, gx_sdf = mlp_backward(self.sdf_net, cache.cache_sdf, gd)
        if train_sdf:
            grads["sdf"] = grads_sdf
        e = enc.output_dim(3)
        g_enc_q = gx_sdf[:, :e]
        g_wtheta = gx_sdf[:, e : e + 3 * K].copy()
        g_rest_off = gx_sdf[:, e + 3 * K : e + 6 * K].copy()

        gq = positional_encode_backward(cache.q, enc, g_enc_q)

        g_delta = gq.copy()
        if delta_grad_extra is not None:
            g_delta = g_delta + delta_grad_extra

        g_pbar = gq.copy()  # via q = pbar + delta (+ delta_shape)
        if cache.use_displacement and cache.cache_def is not None:
            grads_def, gx_def = mlp_backward(self.displacement_net, cache.cache_def, g_delta)
            if train_displacement:
                grads["displacement"] = grads_def
            g_enc_pb = gx_def[:, :e]
            g_wtheta += gx_def[:, e : e + 3 * K]
            g_rest_off += gx_def[:, e + 3 * K : e + 6 * K]
            g_pbar += positional_encode_backward(cache.pbar, enc, g_enc_pb)

        if cache.cache_shape is not None:
            grads_shape, gx_shape = mlp_backward(self.shape_net, cache.cache_shape, gq)
            if train_displacement:
                grads["shape"] = grads_shape
            g_pbar += positional_encode_backward(cache.pbar, enc, gx_shape[:, :e])

        # canonical offsets: block i of rest_off is pbar - rest_joint_i
        g_pbar += g_rest_off.reshape(n, K, 3).sum(axis=1)

        # weighted pose: component (i,c) is w_i * theta_ic
        g_w = np.einsum("nkc,kc->nk", g_wtheta.reshape(n, K, 3), theta)

        # un-posing: d pbar / d w_i = -(A^-1 B_i [pbar,1])_xyz
        pbar_h = np.concatenate([cache.pbar, np.ones((n, 1))], axis=1)
        M = np.einsum("kab,nb->nka", cache.transforms, pbar_h)
        M = np.einsum("nab,nkb->nka", cache.A_inv, M)
        g_w -= np.einsum("nka,na->nk", M[:, :, :3], g_pbar)

        point_grad = None
        if cache.cache_w is not None and (train_weight or want_point_grad):
            grads_w, gx_w = mlp_backward(self.weight_net, cache.cache_w, g_w)
            if train_weight:
                grads["weight"] = grads_w
            if want_point_grad:
                g_enc_p = gx_w[:, :e]
                g_p_off = gx_w[:, e : e + 3 * K]
                point_grad = positional_encode_backward(cache.points, enc, g_enc_p)
                point_grad += g_p_off.reshape(n, K, 3).sum(axis=1)
                point_grad += np.einsum("nab,na->nb", cache.A_inv[:, :3, :3], g_pbar)
        elif want_point_grad:
            point_grad = np.einsum("nab,na->nb", cache.A_inv[:, :3, :3], g_pbar)

        return grads, point_grad

    def weight_forward(self, points, pose: sk.Pose, beta=None):
        """weight_net on posed points with the same input layout as sdf_forward.

        Used for the supervised weight pretraining stage. Returns (w, cache).
        """
        if self.nn_weight_body is not None:
            raise ValueError("analytic-weight model has no trainable weight net")
        p = np.atleast_2d(np.asarray(points, dtype=float))
        beta_rows = self._check_beta(beta, p.shape[0])
        B = sk.forward_kinematics(self.skeleton, pose)
        joints = sk.posed_joints(self.skeleton, B)
        enc_p = positional_encode(p, self.encoding)
        p_off = sk.pose_encoding(p, joints).reshape(p.shape[0], -1)
        return self._weights(p, enc_p, p_off, pose, beta_rows)

    def normal_from_sdf_cache(self, cache, rows):
        """normal_net on a row subset of an existing sdf_forward cache."""
        q = cache.q[rows]
        cond_cols = [cache.wtheta[rows], cache.rest_off[rows]]
        if cache.beta_rows is not None:
            cond_cols.append(cache.beta_rows[rows])
        x_norm = np.concatenate([positional_encode(q, self.encoding), *cond_cols], axis=1)
        u, cache_u = mlp_forward(self.normal_net, x_norm, strict_head=False)
        ok = cache.ok[rows] & cache_u.ok_rows()
        A = sk.blend_transform_batch(cache.w[rows], cache.transforms)
        v = np.einsum("nab,nb->na", A[:, :3, :3], u)
        vnorm = np.linalg.norm(v, axis=1)
        ok &= vnorm >= 1e-8
        safe = np.where(vnorm < 1e-8, 1.0, vnorm)
        normals = v / safe[:, None]
        normals[~ok] = 0.0
        return normals, NormalForwardCache(
            sdf_cache=cache, cache_u=cache_u, u=u, blend_rot=A[:, :3, :3],
            v=v, vnorm=vnorm, normals=normals, ok=ok,
        )

    # --- the public spec operations -----------------------------------------

    def canonical_map(self, p, pose: sk.Pose, beta=None):
        """Blend weights and canonical point for posed-space queries.

        Scalar input raises SingularBlendError on ill-conditioned blends;
        batched input returns rows flagged via the ok mask in eval order.
        """
        single = np.asarray(p).ndim == 1
        d, cache = self.sdf_forward(p, pose, beta=beta, use_displacement=False)
        if single:
            if not cache.ok[0]:
                raise SingularBlendError(np.asarray(p, dtype=float), np.inf)
            return cache.w[0], cache.pbar[0]
        return cache.w, cache.pbar

    def pose_displacement(self, pbar, w, pose: sk.Pose, beta=None):
        """Continuous pose-conditioned displacement at canonical points."""
        pb = np.atleast_2d(np.asarray(pbar, dtype=float))
        wb = np.atleast_2d(np.asarray(w, dtype=float))
        n = pb.shape[0]
        beta_rows = self._check_beta(beta, n)
        wtheta = (wb[:, :, None] * pose.rotations[None, :, :]).reshape(n, -1)
        rest_off = sk.pose_encoding(pb, self.skeleton.rest_joints).reshape(n, -1)
        cols = [positional_encode(pb, self.encoding), wtheta, rest_off]
        if beta_rows is not None:
            cols.append(beta_rows)
        delta, _ = mlp_forward(self.displacement_net, np.concatenate(cols, axis=1))
        return delta[0] if np.asarray(pbar).ndim == 1 else delta

    def shape_displacement(self, pbar, beta):
        """Shape-conditioned displacement; only on multi-subject models."""
        if self.shape_net is None:
            raise ValueError("single-subject model has no shape displacement branch")
        pb = np.atleast_2d(np.asarray(pbar, dtype=float))
        beta_rows = self._check_beta(beta, pb.shape[0])
        x = np.concatenate([positional_encode(pb, self.encoding), beta_rows], axis=1)
        delta, _ = mlp_forward(self.shape_net, x)
        return delta[0] if np.asarray(pbar).ndim == 1 else delta

    def eval_sdf(self, p, pose: sk.Pose, beta=None):
        """Signed distance at posed-space points; scalar in, scalar out."""
        single = np.asarray(p).ndim == 1
        d, cache = self.sdf_forward(p, pose, beta=beta)
        if single:
            if not cache.ok[0]:
                raise SingularBlendError(np.asarray(p, dtype=float), np.inf)
            return float(d[0])
        if not np.all(cache.ok):
            bad = np.flatnonzero(~cache.ok)
            raise SingularBlendError(cache.points[bad[0]], np.inf)
        return d

    def sdf_values(self, points, pose: sk.Pose, beta=None):
        """Grid-eval protocol: (d, ok) with no exceptions for singular rows."""
        d, cache = self.sdf_forward(points, pose, beta=beta)
        return d, cache.ok

    def normal_forward(self, points, pose: sk.Pose, beta=None):
        """Posed-space normals with cache for normal_net training.

        Returns (normals, NormalForwardCache); rows are flagged not-ok on
        singular blends or degenerate normal vectors.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        n = p.shape[0]
        d, cache = self.sdf_forward(p, pose, beta=beta)
        cond_cols = [cache.wtheta, cache.rest_off]
        if cache.beta_rows is not None:
            cond_cols.append(cache.beta_rows)
        x_norm = np.concatenate([positional_encode(cache.q, self.encoding), *cond_cols], axis=1)
        u, cache_u = mlp_forward(self.normal_net, x_norm, strict_head=False)
        ok = cache.ok & cache_u.ok_rows()

        A = sk.blend_transform_batch(cache.w, cache.transforms)
        v = np.einsum("nab,nb->na", A[:, :3, :3], u)
        vnorm = np.linalg.norm(v, axis=1)
        ok &= vnorm >= 1e-8
        safe = np.where(vnorm < 1e-8, 1.0, vnorm)
        normals = v / safe[:, None]
        normals[~ok] = 0.0
        return normals, NormalForwardCache(
            sdf_cache=cache, cache_u=cache_u, u=u, blend_rot=A[:, :3, :3],
            v=v, vnorm=vnorm, normals=normals, ok=ok,
        )

    def normal_backward(self, ncache, n_grad):
        """Gradients of the normal loss for normal_net only.

        The rest of the pipeline is treated as frozen context, matching the
        training schedule where normals are fit after the SDF stabilizes.
        """
        g = np.asarray(n_grad, dtype=float)
        safe = np.where(ncache.vnorm < 1e-8, 1.0, ncache.vnorm)
        gv = (g - ncache.normals * np.sum(g * ncache.normals, axis=1, keepdims=True))
        gv /= safe[:, None]
        gv[~ncache.ok] = 0.0
        gu = np.einsum("nab,na->nb", ncache.blend_rot, gv)
        grads_norm, _ = mlp_backward(self.normal_net, ncache.cache_u, gu)
        return {"normal": grads_norm}

    def eval_normal(self, p, pose: sk.Pose, beta=None):
        """Unit surface normal at a posed-space point (near-surface use)."""
        single = np.asarray(p).ndim == 1
        normals, ncache = self.normal_forward(p, pose, beta=beta)
        if single:
            if not ncache.sdf_cache.ok[0]:
                raise SingularBlendError(np.asarray(p, dtype=float), np.inf)
            if not ncache.ok[0]:
                raise DegenerateNormalError("normal vector collapsed below 1e-8")
            return normals[0]
        return normals, ncache.ok


@dataclass
class SdfForwardCache:
    points: np.ndarray
    pose: sk.Pose
    beta_rows: np.ndarray
    transforms: np.ndarray
    posed_joints: np.ndarray
    enc_p: np.ndarray
    p_off: np.ndarray
    w: np.ndarray
    cache_w: object
    A_inv: np.ndarray
    ok: np.ndarray
    pbar: np.ndarray
    wtheta: np.ndarray
    rest_off: np.ndarray
    enc_pb: np.ndarray
    delta: np.ndarray
    cache_def: object
    delta_shape: np.ndarray
    cache_shape: object
    q: np.ndarray
    cache_sdf: object
    d: np.ndarray = None
    use_displacement: bool = True


@dataclass
class NormalForwardCache:
    sdf_cache: SdfForwardCache
    cache_u: object
    u: np.ndarray
    blend_rot: np.ndarray
    v: np.ndarray
    vnorm: np.ndarray
    normals: np.ndarray
    ok: np.ndarray


# --- model persistence ----------------------------------------------------------

_NET_ORDER = ("weight", "displacement", "sdf", "normal", "shape")


def save_model(model: PosedSdfModel, path) -> None:
    """Checkpoint = binary net file plus a '<path>.meta' structured-text sidecar."""
    named = [
        ("weight", model.weight_net),
        ("displacement", model.displacement_net),
        ("sdf", model.sdf_net),
        ("normal", model.normal_net),
    ]
    if model.shape_net is not None:
        named.append(("shape", model.shape_net))
    save_mlps(path, named)

    lines = ["format posefield-model 1"]
    lines.append(f"shape_dim {model.shape_dim}")
    lines.append(f"octaves {model.encoding.octaves}")
    lines.append(f"include_input {int(model.encoding.include_input)}")
    lines.append(f"cond_limit {model.cond_limit!r}")
    lines.append(f"weight_mode {'learned' if model.uses_learned_weights else 'analytic_nn'}")
    lines.append("skeleton_begin")
    lines.append(sk.skeleton_to_text(model.skeleton).rstrip("\n"))
    lines.append("skeleton_end")
    if model.nn_weight_body is not None:
        lines.append("body_begin")
        lines.append(model.nn_weight_body.to_text().rstrip("\n"))
        lines.append("body_end")
    with open(str(path) + ".meta", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> PosedSdfModel:
    nets = dict(load_mlps(path))
    with open(str(path) + ".meta") as fh:
        text = fh.read()

    def block(tag):
        start = text.index(f"{tag}_begin") + len(f"{tag}_begin") + 1
        end = text.index(f"{tag}_end")
        return text[start:end]

    kv = {}
    for ln in text.splitlines():
        toks = ln.split()
        if len(toks) == 2 and toks[0] not in ("skeleton_begin", "body_begin"):
            kv[toks[0]] = toks[1]
    skeleton = sk.skeleton_from_text(block("skeleton"))
    body = None
    if kv.get("weight_mode") == "analytic_nn":
        from .body import CapsuleBody

        body = CapsuleBody.from_text(block("body"))
    return PosedSdfModel(
        skeleton=skeleton,
        encoding=EncodingConfig(int(kv["octaves"]), bool(int(kv["include_input"]))),
        weight_net=nets["weight"],
        displacement_net=nets["displacement"],
        sdf_net=nets["sdf"],
        normal_net=nets["normal"],
        shape_net=nets.get("shape"),
        shape_dim=int(kv["shape_dim"]),
        cond_limit=float(kv["cond_limit"]),
        nn_weight_body=body,
    )
