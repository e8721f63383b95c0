"""Losses and the three-stage training schedule.

Stage 1 supervises the weight net with the analytic skinning weights at
surface samples (cross-entropy on the simplex output). Stage 2 trains the
weight and SDF nets end-to-end on the distance loss, with the displacement
branch held at zero. Stage 3 freezes the weight net and trains the SDF and
displacement nets jointly, adding the squared-displacement regularizer; the
normal net starts training once the held-out SDF loss has stabilized
(relative improvement per epoch below ``stabilize_threshold``).
"""

import csv
import logging
import shutil
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from .dataset import BAND_SURFACE, Dataset
from .errors import ConfigError, TrainingDiverged
from .fields import PosedSdfModel, save_model, load_model
from .nets import AdamHyper, AdamState, adam_step, mlp_backward

log = logging.getLogger(__name__)


# --- pointwise losses -------------------------------------------------------------

def loss_sdf(d_pred, d_gt):
    """Absolute distance residual (elementwise)."""
    return np.abs(np.asarray(d_pred, dtype=float) - np.asarray(d_gt, dtype=float))


def loss_normal(n_pred, n_gt):
    """1 - cos between unit normals; inputs must be unit length."""
    a = np.asarray(n_pred, dtype=float)
    b = np.asarray(n_gt, dtype=float)
    for name, v in (("n_pred", a), ("n_gt", b)):
        norms = np.linalg.norm(v, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise ValueError(f"{name} must be unit length")
    return 1.0 - np.sum(a * b, axis=-1)


def reg_displacement(delta):
    """Squared L2 magnitude of a displacement (elementwise over rows)."""
    d = np.asarray(delta, dtype=float)
    return np.sum(d * d, axis=-1)


# --- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: tuple = (3, 10, 10)     # stage 1, 2, 3
    lr: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_sdf: float = 1.0
    lambda_norm: float = 0.1
    lambda_reg: float = 1e-3
    delta: float = 0.02             # |d*| band for normal training
    batch_size: int = 1024
    samples_per_epoch: int = 120000
    val_samples_per_frame: int = 2048
    seed: int = 0
    stabilize_threshold: float = 0.01
    norm_min_epochs: int = 2

    def validate(self):
        if len(self.epochs) != 3 or any(e < 0 for e in self.epochs):
            raise ConfigError("epochs must be three non-negative stage counts")
        for name in (
            "lr", "lambda_sdf", "delta", "batch_size", "samples_per_epoch",
            "val_samples_per_frame",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lambda_norm < 0 or self.lambda_reg < 0:
            raise ConfigError("loss weights must be non-negative")

    def hyper(self) -> AdamHyper:
        return AdamHyper(self.lr, self.adam_beta1, self.adam_beta2, self.adam_eps)


def train_config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in dc_fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "epochs":
            lines.append("epochs " + ",".join(str(int(e)) for e in v))
        else:
            lines.append(f"{f.name} {v!r}")
    return "\n".join(lines) + "\n"


def train_config_from_text(text: str) -> TrainConfig:
    known = {f.name: f for f in dc_fields(TrainConfig)}
    kwargs = {}
    for ln in text.splitlines():
        ln = ln.split("#")[0].strip()
        if not ln:
            continue
        toks = ln.replace("=", " ").split(None, 1)
        key = toks[0]
        if key not in known:
            raise ConfigError(f"unknown training config key {key!r}")
        raw = toks[1].strip() if len(toks) > 1 else ""
        if key == "epochs":
            kwargs[key] = tuple(int(t) for t in raw.replace(",", " ").split())
        elif known[key].type in ("int", int):
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    cfg = TrainConfig(**kwargs)
    cfg.validate()
    return cfg


# --- helpers ------------------------------------------------------------------------

@dataclass
class _FrameData:
    frame_id: int
    pose: object
    p: np.ndarray
    d: np.ndarray
    n: np.ndarray
    band: np.ndarray


def _load_frames(dataset: Dataset, ids):
    out = []
    for fid in ids:
        s = dataset.samples(fid)
        out.append(_FrameData(fid, dataset.pose(fid), s.p, s.d, s.n, s.band))
    return out


def _checkpoint(model, out_dir: Path, name: str, stage: int, epoch: int) -> Path:
    path = out_dir / name
    save_model(model, path)
    with open(str(path) + ".meta", "a") as fh:
        fh.write(f"train_stage {stage}\ntrain_epoch {epoch}\n")
    return path


def _read_progress(meta_path: Path):
    stage = epoch = 0
    for ln in meta_path.read_text().splitlines():
        toks = ln.split()
        if toks and toks[0] == "train_stage":
            stage = int(toks[1])
        if toks and toks[0] == "train_epoch":
            epoch = int(toks[1])
    return stage, epoch


class _CurveWriter:
    COLUMNS = ("epoch", "stage", "L_SDF", "L_norm", "L_reg", "val_L_SDF")

    def __init__(self, path: Path, resume: bool):
        self.path = path
        self.rows = []
        mode = "a" if (resume and path.exists()) else "w"
        self._fh = open(path, mode, newline="")
        self._csv = csv.writer(self._fh)
        if mode == "w":
            self._csv.writerow(self.COLUMNS)

    def add(self, epoch, stage, l_sdf, l_norm, l_reg, val):
        row = dict(
            epoch=epoch, stage=stage, L_SDF=l_sdf, L_norm=l_norm, L_reg=l_reg,
            val_L_SDF=val,
        )
        self.rows.append(row)
        self._csv.writerow([row[c] for c in self.COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()


# --- weight pretraining (stage 1) ------------------------------------------------------

def pretrain_canonical(
    model: PosedSdfModel, dataset: Dataset, epochs: int, config: TrainConfig
):
    """Fit weight_net to the analytic surface weights by cross-entropy.

    Returns the per-epoch mean losses (empty list for zero epochs; the model
    is untouched in that case).
    """
    if epochs <= 0:
        return []
    body = dataset.body
    frames = _load_frames(dataset, dataset.train_ids)
    state = AdamState.for_mlp(model.weight_net)
    hyper = config.hyper()
    losses = []
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, epoch]))
        per_frame = max(1, config.samples_per_epoch // max(len(frames), 1))
        total, count = 0.0, 0
        for fi in rng.permutation(len(frames)):
            fr = frames[fi]
            surf = np.flatnonzero(fr.band == BAND_SURFACE)
            take = min(per_frame, len(surf))
            sel = surf[rng.choice(len(surf), size=take, replace=False)]
            targets = body.nearest_surface_weights(fr.pose, fr.p[sel])
            for s in range(0, take, config.batch_size):
                rows = sel[s : s + config.batch_size]
                tgt = targets[s : s + config.batch_size]
                w, cache = model.weight_forward(fr.p[rows], fr.pose)
                ce = -np.sum(tgt * np.log(w + 1e-12), axis=1)
                loss = float(ce.mean())
                if not np.isfinite(loss):
                    raise TrainingDiverged("weight pretraining loss went non-finite")
                g = -(tgt / (w + 1e-12)) / len(rows)
                grads, _ = mlp_backward(model.weight_net, cache, g)
                adam_step(model.weight_net, grads, state, hyper)
                total += loss * len(rows)
                count += len(rows)
        losses.append(total / max(count, 1))
        log.info("stage1 epoch %d weight CE %.5f", epoch + 1, losses[-1])
    return losses


# --- SDF stages (2 and 3) -----------------------------------------------------------------

def _validation_loss(model, frames, config, use_displacement):
    total, count = 0.0, 0
    for fr in frames:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 9, fr.frame_id]))
        take = min(config.val_samples_per_frame, len(fr.d))
        sel = rng.choice(len(fr.d), size=take, replace=False)
        d, cache = model.sdf_forward(fr.p[sel], fr.pose, use_displacement=use_displacement)
        ok = cache.ok
        total += float(np.abs(d[ok] - fr.d[sel][ok]).sum())
        count += int(ok.sum())
    return total / max(count, 1)


def _sdf_epoch(
    model, frames, config, stage, epoch, states, train_nets, use_displacement,
    train_normals,
):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, stage, epoch]))
    hyper = config.hyper()
    per_frame = max(1, config.samples_per_epoch // max(len(frames), 1))
    sums = {"sdf": 0.0, "reg": 0.0, "norm": 0.0}
    counts = {"sdf": 0, "norm": 0}
    for fi in rng.permutation(len(frames)):
        fr = frames[fi]
        take = min(per_frame, len(fr.d))
        sel = rng.choice(len(fr.d), size=take, replace=False)
        for s in range(0, take, config.batch_size):
            rows = sel[s : s + config.batch_size]
            pts = fr.p[rows]
            d_gt = fr.d[rows]
            d, cache = model.sdf_forward(pts, fr.pose, use_displacement=use_displacement)
            ok = cache.ok
            n_ok = int(ok.sum())
            if n_ok == 0:
                continue
            resid = d - d_gt
            resid[~ok] = 0.0
            l_sdf = float(np.abs(resid[ok]).mean())
            d_grad = config.lambda_sdf * np.sign(resid) / n_ok
            d_grad[~ok] = 0.0

            delta_extra = None
            l_reg = 0.0
            if use_displacement and config.lambda_reg > 0:
                reg_rows = reg_displacement(cache.delta)
                reg_rows[~ok] = 0.0
                l_reg = float(reg_rows[ok].mean())
                delta_extra = (config.lambda_reg * 2.0 / n_ok) * cache.delta
                delta_extra[~ok] = 0.0

            if not np.isfinite(l_sdf) or not np.isfinite(l_reg):
                raise TrainingDiverged(f"stage {stage} loss went non-finite")

            grads, _ = model.sdf_backward(
                cache,
                d_grad,
                delta_grad_extra=delta_extra,
                train_weight="weight" in train_nets,
                train_displacement="displacement" in train_nets,
                train_sdf="sdf" in train_nets,
            )
            for name, g in grads.items():
                if name in train_nets:
                    adam_step(model.trainable()[name], g, states[name], hyper)

            if train_normals:
                near = ok & (np.abs(d) < config.delta)
                n_near = int(near.sum())
                if n_near:
                    nrows = np.flatnonzero(near)
                    n_pred, ncache = model.normal_from_sdf_cache(cache, nrows)
                    valid = ncache.ok
                    if np.any(valid):
                        n_gt = fr.n[rows][nrows]
                        cosml = 1.0 - np.sum(n_pred * n_gt, axis=1)
                        l_norm = float(cosml[valid].mean())
                        if not np.isfinite(l_norm):
                            raise TrainingDiverged("normal loss went non-finite")
                        g_n = -(config.lambda_norm / max(int(valid.sum()), 1)) * n_gt
                        g_n[~valid] = 0.0
                        gr = model.normal_backward(ncache, g_n)
                        adam_step(model.normal_net, gr["normal"], states["normal"], hyper)
                        sums["norm"] += l_norm * int(valid.sum())
                        counts["norm"] += int(valid.sum())

            sums["sdf"] += l_sdf * n_ok
            sums["reg"] += l_reg * n_ok
            counts["sdf"] += n_ok
    mean_sdf = sums["sdf"] / max(counts["sdf"], 1)
    mean_reg = sums["reg"] / max(counts["sdf"], 1)
    mean_norm = sums["norm"] / max(counts["norm"], 1) if counts["norm"] else float("nan")
    return mean_sdf, mean_reg, mean_norm


def train(
    model: PosedSdfModel,
    dataset: Dataset,
    config: TrainConfig,
    out_dir,
    resume: bool = False,
):
    """Run the full schedule; writes stage checkpoints and the loss-curve CSV.

    Returns (model, curve_rows). Raises TrainingDiverged (with the last good
    checkpoint) if a loss goes non-finite.
    """
    config.validate()
    if dataset.skeleton.joint_count != model.joint_count or not np.allclose(
        dataset.skeleton.rest_joints, model.skeleton.rest_joints
    ):
        raise ValueError("dataset skeleton does not match the model")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    s1, s2, s3 = config.epochs
    done_stage, done_epoch = 0, 0
    if resume:
        latest = out_dir / "latest.ckpt"
        if latest.exists():
            prev = load_model(latest)
            for name, net in prev.trainable().items():
                mine = model.trainable().get(name)
                if mine is not None:
                    mine.weights = net.weights
                    mine.biases = net.biases
            done_stage, done_epoch = _read_progress(Path(str(latest) + ".meta"))
            log.info("resuming after stage %d epoch %d", done_stage, done_epoch)

    curves = _CurveWriter(out_dir / "losses.csv", resume)
    last_good = None
    train_frames = _load_frames(dataset, dataset.train_ids)
    val_frames = _load_frames(dataset, dataset.heldout_ids) if dataset.heldout_ids else []

    try:
        # stage 1: supervised weight pretraining (skipped for analytic weights)
        if model.uses_learned_weights and done_stage < 1 and s1 > 0:
            pretrain_canonical(model, dataset, s1, config)
        if done_stage < 1:
            last_good = _checkpoint(model, out_dir, f"stage1_epoch{s1}.ckpt", 1, s1)
            shutil.copy(last_good, out_dir / "latest.ckpt")
            shutil.copy(str(last_good) + ".meta", str(out_dir / "latest.ckpt") + ".meta")

        # stage 2: weights + SDF end to end, displacement off
        stage2_nets = {"sdf"} | ({"weight"} if model.uses_learned_weights else set())
        states = {n: AdamState.for_mlp(model.trainable()[n]) for n in stage2_nets}
        start = done_epoch if done_stage == 2 else 0
        for epoch in range(start, s2):
            if done_stage > 2:
                break
            l_sdf, l_reg, _ = _sdf_epoch(
                model, train_frames, config, 2, epoch, states, stage2_nets,
                use_displacement=False, train_normals=False,
            )
            val = (
                _validation_loss(model, val_frames, config, use_displacement=False)
                if val_frames
                else float("nan")
            )
            log.info("stage2 epoch %d/%d L_SDF %.5f val %.5f", epoch + 1, s2, l_sdf, val)
            curves.add(epoch + 1, 2, f"{l_sdf:.8f}", "", f"{l_reg:.8f}", f"{val:.8f}")
            last_good = _checkpoint(model, out_dir, "latest.ckpt", 2, epoch + 1)
        if done_stage < 3:
            last_good = _checkpoint(model, out_dir, f"stage2_epoch{s2}.ckpt", 2, s2)

        # stage 3: freeze weights, train SDF + displacement; normals after
        # the validation loss stabilizes
        stage3_nets = {"sdf", "displacement"}
        if model.shape_net is not None:
            stage3_nets.add("shape")
        states = {n: AdamState.for_mlp(model.trainable()[n]) for n in stage3_nets}
        states["normal"] = AdamState.for_mlp(model.normal_net)
        norm_active = False
        prev_val = None
        start = done_epoch if done_stage == 3 else 0
        for epoch in range(start, s3):
            if not norm_active and epoch >= s3 - config.norm_min_epochs:
                norm_active = True  # guarantee the normal net trains
            l_sdf, l_reg, l_norm = _sdf_epoch(
                model, train_frames, config, 3, epoch, states, stage3_nets,
                use_displacement=True, train_normals=norm_active,
            )
            val = (
                _validation_loss(model, val_frames, config, use_displacement=True)
                if val_frames
                else float("nan")
            )
            if prev_val is not None and np.isfinite(val) and prev_val > 0:
                if (prev_val - val) / prev_val < config.stabilize_threshold:
                    norm_active = True
            prev_val = val if np.isfinite(val) else prev_val
            log.info(
                "stage3 epoch %d/%d L_SDF %.5f L_norm %s val %.5f",
                epoch + 1, s3, l_sdf, f"{l_norm:.5f}" if np.isfinite(l_norm) else "-", val,
            )
            curves.add(
                epoch + 1, 3, f"{l_sdf:.8f}",
                f"{l_norm:.8f}" if np.isfinite(l_norm) else "",
                f"{l_reg:.8f}", f"{val:.8f}",
            )
            last_good = _checkpoint(model, out_dir, "latest.ckpt", 3, epoch + 1)
        last_good = _checkpoint(model, out_dir, f"stage3_epoch{s3}.ckpt", 3, s3)
    except TrainingDiverged as exc:
        curves.close()
        raise TrainingDiverged(str(exc), last_checkpoint=last_good) from None
    finally:
        curves.close()

    return model, curves.rows
