"""Command line front end: generate | train | reconstruct | evaluate.

Exit codes: 0 success, 2 invalid input or configuration, 3 training diverged
(last good checkpoint retained), 4 empty reconstructed surface.

The POSEFIELD_THREADS environment variable caps BLAS / numba thread counts;
it must take effect before numpy loads, so heavy imports happen inside main().
"""

import argparse
import os
import sys
from pathlib import Path

EXIT_BAD_INPUT = 2
EXIT_DIVERGED = 3
EXIT_EMPTY_SURFACE = 4


def _apply_thread_env():
    n = os.environ.get("POSEFIELD_THREADS", "").strip()
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, n)


class _Lock:
    """Exclusive .lock file guarding an output directory."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".lock"
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise SystemExit(
                f"error: {self.path} exists; another run owns this directory "
                f"(delete the lock if that run is gone)"
            ) from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def _build_parser():
    p = argparse.ArgumentParser(
        prog="posefield",
        description="Train and evaluate a pose-conditioned neural SDF on a synthetic articulated body.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build a synthetic dataset")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--poses", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-surface", type=int, default=10000)
    g.add_argument("--mesh-res", type=int, default=128)
    g.add_argument("--sigmas", default="0.01,0.1")
    g.add_argument("--gt-source", choices=("mesh", "oracle"), default="mesh")
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--pose-amplitude", type=float, default=1.0)
    g.add_argument("--torso-radius", type=float, default=None)
    g.add_argument("--head-radius", type=float, default=None)
    g.add_argument("--arm-radius", type=float, default=None)
    g.add_argument("--arm-segments", type=int, default=None)
    g.add_argument("--sharpness", type=float, default=None)
    g.add_argument("--bulge", default=None, help="per-arm-segment gains, e.g. 0.25,0.45")

    t = sub.add_parser("train", help="run the three-stage schedule")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--config", default=None, help="structured-text training config")
    t.add_argument("--epochs", default=None, help="stage epochs, e.g. 3,10,10")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--samples-per-epoch", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--weight-mode", choices=("learned", "nn"), default="learned",
                   help="'nn': analytic nearest-surface weights instead of the learned mapping")
    t.add_argument("--width", type=int, default=None,
                   help="hidden width override for all sub-networks")
    t.add_argument("--octaves", type=int, default=None)
    t.add_argument("--resume", action="store_true")

    r = sub.add_parser("reconstruct", help="mesh held-out or explicit poses")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--poses", default=None, help="pose file or directory of .pose files")
    r.add_argument("--dataset", default=None, help="take poses from a dataset")
    r.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    r.add_argument("--res", type=int, default=128)
    r.add_argument("--format", choices=("obj", "ply"), default="obj")
    r.add_argument("--thin", action="store_true", help="extract a |d|=tau shell")
    r.add_argument("--tau", type=float, default=0.01)
    r.add_argument("--no-normals", action="store_true")

    e = sub.add_parser("evaluate", help="metric reports for predicted meshes")
    e.add_argument("--pred", required=True, help="directory of predicted meshes")
    e.add_argument("--gt", required=True, help="directory of ground-truth meshes")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--tau", type=float, default=0.01)
    e.add_argument("--iou-res", type=int, default=64)
    e.add_argument("--samples", type=int, default=10000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--ablation", choices=("nn-weights",), default=None)
    e.add_argument("--pred-nn", default=None,
                   help="meshes of the nearest-neighbor-weights variant (with --ablation)")
    return p


# --- subcommands -----------------------------------------------------------------


def _cmd_generate(args) -> int:
    import numpy as np

    from .body import BodyConfig, make_synthetic_body
    from .dataset import DataConfig, build_dataset, sample_poses
    from .errors import ConfigError

    body_kwargs = {}
    for flag, name in (
        ("torso_radius", "torso_radius"), ("head_radius", "head_radius"),
        ("arm_radius", "arm_radius"), ("arm_segments", "arm_segments"),
        ("sharpness", "weight_sharpness"),
    ):
        v = getattr(args, flag)
        if v is not None:
            body_kwargs[name] = v
    if args.bulge is not None:
        body_kwargs["bulge_arm"] = tuple(float(t) for t in args.bulge.split(","))
    try:
        body = make_synthetic_body(BodyConfig(**body_kwargs))
        config = DataConfig(
            n_poses=args.poses,
            n_surface=args.n_surface,
            sigmas=tuple(float(t) for t in args.sigmas.split(",")),
            mesh_res=args.mesh_res,
            train_fraction=args.train_fraction,
            seed=args.seed,
            pose_amplitude=args.pose_amplitude,
            gt_source=args.gt_source,
        )
        config.validate()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT

    out = Path(args.out)
    with _Lock(out):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 7]))
        poses = sample_poses(body, args.poses, rng, args.pose_amplitude)
        ds = build_dataset(body, poses, config, out)
    print((out / "manifest").read_text().rstrip())
    print(f"wrote {len(ds.frame_ids())} frames to {out}")
    return 0


def _cmd_train(args) -> int:
    import numpy as np

    from .dataset import load_dataset
    from .errors import ConfigError, TrainingDiverged
    from .fields import ModelConfig, PosedSdfModel, load_model
    from .train import TrainConfig, train, train_config_from_text

    try:
        dataset = load_dataset(args.dataset)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load dataset: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT

    try:
        cfg = (
            train_config_from_text(Path(args.config).read_text())
            if args.config
            else TrainConfig()
        )
        overrides = {}
        if args.epochs:
            overrides["epochs"] = tuple(int(t) for t in args.epochs.split(","))
        for name in ("lr", "batch_size", "samples_per_epoch", "seed"):
            v = getattr(args, name)
            if v is not None:
                overrides[name] = v
        if overrides:
            from dataclasses import replace

            cfg = replace(cfg, **overrides)
        cfg.validate()
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT

    out = Path(args.out)
    latest = out / "latest.ckpt"
    if args.resume and latest.exists():
        model = load_model(latest)
    else:
        mc_kwargs = {}
        if args.width:
            w = args.width
            mc_kwargs.update(
                hidden_weight=(w,) * 4,
                hidden_displacement=(w,) * 3,
                hidden_sdf=(w,) * 5,
                hidden_normal=(w,) * 3,
            )
        if args.octaves is not None:
            mc_kwargs["octaves"] = args.octaves
        model = PosedSdfModel.create(
            dataset.skeleton,
            ModelConfig(**mc_kwargs),
            np.random.default_rng(np.random.SeedSequence([cfg.seed, 11])),
        )
        if args.weight_mode == "nn":
            model.nn_weight_body = dataset.body

    with _Lock(out):
        try:
            train(model, dataset, cfg, out, resume=args.resume)
        except TrainingDiverged as exc:
            print(f"error: training diverged: {exc}", file=sys.stderr)
            if exc.last_checkpoint:
                print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
            return EXIT_DIVERGED
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_BAD_INPUT
    print(f"training complete; checkpoints in {out}")
    return 0


def _read_pose_records(path: Path):
    from . import skeleton as sk

    text = path.read_text()
    chunks = []
    cur = []
    for ln in text.splitlines():
        if ln.startswith("joints") and cur:
            chunks.append("\n".join(cur))
            cur = []
        if ln.strip():
            cur.append(ln)
    if cur:
        chunks.append("\n".join(cur))
    return [sk.pose_from_text(c) for c in chunks]


def _cmd_reconstruct(args) -> int:
    from .dataset import load_dataset
    from .errors import EmptySurfaceError
    from .fields import load_model
    from .meshio import export_mesh
    from .recon import reconstruct

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        print(f"error: checkpoint {ckpt} not found", file=sys.stderr)
        return EXIT_BAD_INPUT
    model = load_model(ckpt)

    named_poses = []
    if args.dataset:
        ds = load_dataset(args.dataset)
        ids = {
            "heldout": ds.heldout_ids, "train": ds.train_ids, "all": ds.frame_ids()
        }[args.split]
        named_poses = [(f"{fid:04d}", ds.pose(fid)) for fid in ids]
    elif args.poses:
        src = Path(args.poses)
        if src.is_dir():
            for f in sorted(src.glob("*.pose")):
                named_poses.extend((f.stem, p) for p in _read_pose_records(f))
        else:
            named_poses = [
                (f"{src.stem}_{i:03d}" if i else src.stem, p)
                for i, p in enumerate(_read_pose_records(src))
            ]
    if not named_poses:
        print("error: no poses given (use --dataset or --poses)", file=sys.stderr)
        return EXIT_BAD_INPUT
    for name, pose in named_poses:
        if pose.joint_count != model.joint_count:
            print(
                f"error: pose {name} has {pose.joint_count} joints, model has "
                f"{model.joint_count}",
                file=sys.stderr,
            )
            return EXIT_BAD_INPUT

    out = Path(args.out)
    with _Lock(out):
        for name, pose in named_poses:
            try:
                mesh = reconstruct(
                    model, pose, res=args.res,
                    thin_tau=args.tau if args.thin else None,
                    with_normals=not args.no_normals,
                )
            except EmptySurfaceError as exc:
                print(f"error: frame {name}: {exc}", file=sys.stderr)
                return EXIT_EMPTY_SURFACE
            path = out / f"{name}.{args.format}"
            export_mesh(mesh, path, args.format)
            print(f"{path}  ({mesh.n_vertices} vertices, {mesh.n_faces} faces)")
    return 0


def _evaluate_dir_pair(pred_dir: Path, gt_dir: Path, args):
    from .errors import PoseFieldError
    from .meshio import import_mesh
    from .metrics import EvalReport, evaluate_mesh_pair

    preds = {p.stem: p for p in sorted(pred_dir.glob("*.obj")) + sorted(pred_dir.glob("*.ply"))}
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.obj")) + sorted(gt_dir.glob("*.ply"))}
    missing = sorted(set(gts) ^ set(preds))
    if not preds or missing:
        raise PoseFieldError(
            "frame mismatch between prediction and ground-truth directories: "
            + (", ".join(missing) if missing else "no meshes found")
        )
    report = EvalReport(tau_f=args.tau, iou_res=args.iou_res)
    for stem in sorted(preds):
        pred = import_mesh(preds[stem])
        gt = import_mesh(gts[stem])
        p2s, p2s_rev, iou_v, f_v = evaluate_mesh_pair(
            pred, gt, tau_f=args.tau, iou_res=args.iou_res,
            n_samples=args.samples, seed=args.seed,
        )
        report.add_frame(stem, p2s, p2s_rev, iou_v, f_v)
    return report


def _cmd_evaluate(args) -> int:
    from .errors import PoseFieldError

    out = Path(args.out)
    if args.ablation and not args.pred_nn:
        print("error: --ablation nn-weights needs --pred-nn", file=sys.stderr)
        return EXIT_BAD_INPUT
    with _Lock(out):
        try:
            report = _evaluate_dir_pair(Path(args.pred), Path(args.gt), args)
        except (PoseFieldError, OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_BAD_INPUT
        report.write_csv(out / "report.csv")
        report.write_text(out / "report.txt")
        print(report.summary().rstrip())

        if args.ablation == "nn-weights":
            try:
                nn_report = _evaluate_dir_pair(Path(args.pred_nn), Path(args.gt), args)
            except (PoseFieldError, OSError, ValueError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_BAD_INPUT
            nn_report.write_csv(out / "report_nn_weights.csv")
            nn_report.write_text(out / "report_nn_weights.txt")
            learned_better = report.iou > nn_report.iou
            lines = [
                f"learned-weights IoU:   {report.iou:.4f}",
                f"nn-weights IoU:        {nn_report.iou:.4f}",
                f"learned > nn:          {learned_better}",
            ]
            (out / "ablation.txt").write_text("\n".join(lines) + "\n")
            print("\n".join(lines))
    return 0


def main(argv=None) -> int:
    _apply_thread_env()
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return _cmd_generate(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "reconstruct":
            return _cmd_reconstruct(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return EXIT_BAD_INPUT
        raise
    return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
