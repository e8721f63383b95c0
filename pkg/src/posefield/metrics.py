"""Reconstruction quality metrics: point-to-surface distance, IoU, F-score."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .meshio import Mesh, is_watertight
from .meshquery import TriangleIndex, closest_points, ray_parity_signs, sample_surface


def point_to_surface(pred: Mesh, gt: Mesh, n_samples: int = 10000, rng=None) -> float:
    """Mean unsigned distance from area-uniform gt-surface samples to pred."""
    if pred.n_faces == 0 or gt.n_faces == 0:
        raise ValueError("point_to_surface needs non-empty meshes")
    rng = np.random.default_rng(0) if rng is None else rng
    samples, _ = sample_surface(gt, n_samples, rng)
    dist, _, _ = closest_points(TriangleIndex(pred), samples)
    return float(dist.mean())


def _inside_mask(mesh: Mesh, pts, n_rays, rng):
    return ray_parity_signs(TriangleIndex(mesh), pts, n_rays=n_rays, rng=rng) < 0


def iou(pred: Mesh, gt: Mesh, res: int = 64, n_rays: int = 5, rng=None) -> float:
    """Volumetric intersection-over-union on a shared voxel grid.

    Occupancy per voxel center comes from the ray-parity membership test;
    both meshes must be watertight.
    """
    for name, mesh in (("pred", pred), ("gt", gt)):
        if not is_watertight(mesh):
            raise ValueError(f"iou: {name} mesh is not watertight")
    rng = np.random.default_rng(0) if rng is None else rng
    lo = np.minimum(pred.bounds()[0], gt.bounds()[0])
    hi = np.maximum(pred.bounds()[1], gt.bounds()[1])
    pad = 0.02 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    axes = [lo[a] + (np.arange(res) + 0.5) * (hi[a] - lo[a]) / res for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    in_pred = _inside_mask(pred, pts, n_rays, rng)
    in_gt = _inside_mask(gt, pts, n_rays, rng)
    union = np.count_nonzero(in_pred | in_gt)
    if union == 0:
        return 1.0  # both empty volumes agree
    return float(np.count_nonzero(in_pred & in_gt) / union)


def fscore(pred: Mesh, gt: Mesh, tau_f: float = 0.01, n_samples: int = 10000, rng=None) -> float:
    """Percentage F-score at threshold tau_f over mutual surface samples."""
    if pred.n_faces == 0 or gt.n_faces == 0:
        raise ValueError("fscore needs non-empty meshes")
    rng = np.random.default_rng(0) if rng is None else rng
    pred_pts, _ = sample_surface(pred, n_samples, rng)
    gt_pts, _ = sample_surface(gt, n_samples, rng)
    d_pred_to_gt, _, _ = closest_points(TriangleIndex(gt), pred_pts)
    d_gt_to_pred, _, _ = closest_points(TriangleIndex(pred), gt_pts)
    precision = float(np.mean(d_pred_to_gt <= tau_f))
    recall = float(np.mean(d_gt_to_pred <= tau_f))
    if precision + recall == 0:
        return 0.0
    return 200.0 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    """Per-frame metric rows plus aggregate means."""

    rows: list = field(default_factory=list)  # dicts with frame_id + metrics
    tau_f: float = 0.01
    iou_res: int = 64

    def add_frame(self, frame_id, p2s, p2s_reverse, iou_value, fscore_value):
        self.rows.append(
            dict(
                frame_id=frame_id,
                point2surface=p2s,
                point2surface_reverse=p2s_reverse,
                iou=iou_value,
                fscore=fscore_value,
            )
        )

    def _mean(self, key):
        return float(np.mean([r[key] for r in self.rows])) if self.rows else float("nan")

    @property
    def point2surface(self) -> float:
        return self._mean("point2surface")

    @property
    def point2surface_reverse(self) -> float:
        return self._mean("point2surface_reverse")

    @property
    def iou(self) -> float:
        return self._mean("iou")

    @property
    def fscore(self) -> float:
        return self._mean("fscore")

    def write_csv(self, path) -> None:
        cols = ("frame_id", "point2surface", "point2surface_reverse", "iou", "fscore")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r[c] for c in cols])
            w.writerow(
                ["aggregate", self.point2surface, self.point2surface_reverse,
                 self.iou, self.fscore]
            )

    def write_text(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.summary())

    def summary(self) -> str:
        lines = [
            f"frames evaluated: {len(self.rows)}",
            f"point-to-surface (gt->pred, x1000): {1000 * self.point2surface:.3f}",
            f"point-to-surface (pred->gt, x1000): {1000 * self.point2surface_reverse:.3f}",
            f"IoU (res {self.iou_res}): {self.iou:.4f}",
            f"F-score (tau {self.tau_f}): {self.fscore:.2f}",
        ]
        return "\n".join(lines) + "\n"


def evaluate_mesh_pair(
    pred: Mesh, gt: Mesh, tau_f: float = 0.01, iou_res: int = 64,
    n_samples: int = 10000, seed: int = 0,
):
    """All Table-style metrics for one (prediction, ground truth) pair."""
    rng = np.random.default_rng(seed)
    p2s = point_to_surface(pred, gt, n_samples, rng)
    p2s_rev = point_to_surface(gt, pred, n_samples, rng)
    iou_value = iou(pred, gt, res=iou_res, rng=rng)
    f_value = fscore(pred, gt, tau_f=tau_f, n_samples=n_samples, rng=rng)
    return p2s, p2s_rev, iou_value, f_value
