"""Command-line entry points tying the pipeline together.

Subcommands: synth, pretrain-nmff, decompose, train, render, eval, gradcheck.
Every run logs its fully resolved configuration; exit codes are 0 success,
1 validation, 2 numeric failure, 3 I/O. SPLATFLOW_THREADS caps worker
threads (applied to the BLAS and numba layers before they start).
"""

import argparse
import json
import os
import sys
from pathlib import Path


def _apply_thread_cap():
    cap = os.environ.get("SPLATFLOW_THREADS")
    if not cap:
        return
    for var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, cap)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # unknown flags and bad values are validation failures (exit 1)
        self.print_usage(sys.stderr)
        raise SystemExit_(1, f"argument error: {message}")


class SystemExit_(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _add_train_config_flags(p):
    """Mirror every TrainConfig field (and the loss weights) as CLI flags."""
    import dataclasses
    from .losses import LossWeights
    from .trainer import TrainConfig

    skip = {"weights"}
    for f in dataclasses.fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            p.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"),
                           default=None, metavar="BOOL")
        else:
            p.add_argument(flag, type=type(f.default), default=None)
    for f in dataclasses.fields(LossWeights):
        p.add_argument("--lambda-" + f.name.replace("_", "-"),
                       type=float, default=None)


def _train_config_from_args(args):
    import dataclasses
    from .losses import LossWeights
    from .trainer import TrainConfig

    cfg_kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "weights":
            continue
        v = getattr(args, f.name, None)
        if v is not None:
            cfg_kwargs[f.name] = v
    w_kwargs = {}
    for f in dataclasses.fields(LossWeights):
        v = getattr(args, "lambda_" + f.name, None)
        if v is not None:
            w_kwargs[f.name] = v
    return TrainConfig(weights=LossWeights(**w_kwargs), **cfg_kwargs)


def _log_config(out_dir, name, payload):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}_config.json"
    path.write_text(json.dumps(payload, indent=1, default=str))
    print(f"[splatflow] resolved config -> {path}")


def build_parser():
    p = _Parser(prog="splatflow",
                description="Self-supervised dynamic Gaussian splatting at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    ps.add_argument("--spec", required=True,
                    help="named scene: static-room | one-box | two-cars-crossing | fast-mover")
    ps.add_argument("--out", required=True)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--frames", type=int, default=None)
    ps.add_argument("--width", type=int, default=384)
    ps.add_argument("--height", type=int, default=256)

    pp = sub.add_parser("pretrain-nmff", help="fit the motion field on LiDAR")
    pp.add_argument("scene_dir")
    pp.add_argument("--out", default=None, help="SFMF checkpoint path")
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--lr", type=float, default=8e-3)
    pp.add_argument("--max-iters", type=int, default=4000)
    pp.add_argument("--smooth-weight", type=float, default=0.1)
    pp.add_argument("--max-points", type=int, default=4096)

    pd = sub.add_parser("decompose", help="static/dynamic decomposition")
    pd.add_argument("scene_dir")
    pd.add_argument("--field", required=True)
    pd.add_argument("--tau", type=float, default=0.05)
    pd.add_argument("--out", required=True)
    pd.add_argument("--seed", type=int, default=0)

    pt = sub.add_parser("train", help="optimize the Gaussian scene")
    pt.add_argument("scene_dir")
    pt.add_argument("--field", default=None, help="pretrained SFMF checkpoint")
    pt.add_argument("--no-nmff", action="store_true",
                    help="ablation: static-only Gaussians, no motion field")
    pt.add_argument("--out", required=True)
    pt.add_argument("--tau", type=float, default=0.05)
    _add_train_config_flags(pt)

    pr = sub.add_parser("render", help="render RGB/depth/flow from a checkpoint")
    pr.add_argument("scene_dir")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--frame", type=int, required=True,
                    help="manifest frame supplying the camera pose")
    pr.add_argument("--camera", type=int, default=0)
    pr.add_argument("--time", type=float, default=None,
                    help="arbitrary timestamp (defaults to the frame's own)")
    pr.add_argument("--out", required=True)

    pe = sub.add_parser("eval", help="metrics vs ground truth")
    pe.add_argument("scene_dir")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--holdout-every", type=int, default=4)
    pe.add_argument("--split", choices=("train", "heldout", "all"), default="heldout")
    pe.add_argument("--tau", type=float, default=0.05)
    pe.add_argument("--out", default=None, help="metrics JSON path")

    pg = sub.add_parser("gradcheck", help="finite-difference gradient check")
    pg.add_argument("--samples", type=int, default=40)
    pg.add_argument("--tolerance", type=float, default=1e-4)
    pg.add_argument("--step", type=float, default=1e-4)
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--out", default=None)
    return p


def cmd_synth(args):
    from . import synth
    spec = synth.make_scene_spec(args.spec, frames=args.frames,
                                 width=args.width, height=args.height)
    _log_config(args.out, "synth", {"spec": args.spec, "seed": args.seed,
                                    "frames": spec.frames, "width": spec.width,
                                    "height": spec.height})
    manifest = synth.generate_scene(spec, args.seed, args.out)
    print(f"[splatflow] wrote {len(manifest.frames)} frames to {args.out}")
    return 0


def cmd_pretrain(args):
    from . import nmff, scenegraph
    manifest = scenegraph.load_manifest(Path(args.scene_dir) / "scene.json")
    fieldm = nmff.MotionFlowField.create(manifest, seed=args.seed)
    cfg = nmff.PretrainConfig(lr=args.lr, max_iters=args.max_iters,
                              smooth_weight=args.smooth_weight,
                              max_points=args.max_points, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.scene_dir) / "field.sfmf"
    _log_config(out.parent, "pretrain", {**vars(args), "out": str(out)})

    def progress(pair, loss, iters):
        print(f"[splatflow] pair {pair}: {iters} iters, final loss {loss:.6g}")

    result = nmff.pretrain(fieldm, manifest, cfg, progress=progress)
    nmff.save_field(fieldm, out)
    curve_path = out.with_suffix(".losses.json")
    curve_path.write_text(json.dumps(
        {"loss_curves": result["loss_curves"], "iters": result["iters"]}))
    print(f"[splatflow] field -> {out}; loss curves -> {curve_path}")
    return 0


def cmd_decompose(args):
    import numpy as np
    from . import nmff, scenegraph
    from .scenegraph import PointCloud, save_point_cloud
    manifest = scenegraph.load_manifest(Path(args.scene_dir) / "scene.json")
    fieldm = nmff.load_field(args.field)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _log_config(out, "decompose", vars(args))
    decomp = nmff.decompose(fieldm, manifest, tau=args.tau, seed=args.seed)
    for i, lab in enumerate(decomp.labels):
        lab.astype(np.uint8).tofile(out / f"pred_labels_{i:03d}.bin")
    if decomp.static_points.shape[0]:
        save_point_cloud(PointCloud(points=decomp.static_points, frame_tag="world"),
                         out / "static_merged.sfpc")
    for i, pts in enumerate(decomp.dynamic_points):
        if pts.shape[0]:
            save_point_cloud(PointCloud(points=pts, frame_tag="world"),
                             out / f"dynamic_{i:03d}.sfpc")
    n_dyn = int(sum(int(l.sum()) for l in decomp.labels))
    print(f"[splatflow] decomposition: {n_dyn} dynamic points across "
          f"{len(decomp.labels)} frames -> {out}")
    return 0


def cmd_train(args):
    from . import evaluation, nmff, scenegraph, trainer
    manifest = scenegraph.load_manifest(Path(args.scene_dir) / "scene.json")
    cfg = _train_config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.no_nmff:
        fieldm = None
    elif args.field:
        fieldm = nmff.load_field(args.field)
    else:
        field_path = Path(args.scene_dir) / "field.sfmf"
        if not field_path.exists():
            raise FileNotFoundError(
                f"no motion field at {field_path}; run pretrain-nmff or pass --field/--no-nmff")
        fieldm = nmff.load_field(field_path)

    import dataclasses
    _log_config(out, "train", {**{f.name: getattr(cfg, f.name)
                                  for f in dataclasses.fields(cfg) if f.name != "weights"},
                               "weights": dataclasses.asdict(cfg.weights),
                               "scene_dir": args.scene_dir, "no_nmff": args.no_nmff,
                               "tau": args.tau})

    if fieldm is None:
        # ablation: every LiDAR point is treated as static background
        import numpy as np
        labels, s_pts, s_src = [], [], []
        for i in range(len(manifest.frames)):
            pts = manifest.lidar_world(i).points
            labels.append(np.zeros(pts.shape[0], dtype=bool))
            s_pts.append(pts)
            s_src.append(np.full(pts.shape[0], i))
        decomp = nmff.DecompositionResult(
            labels=labels, static_points=np.concatenate(s_pts),
            dynamic_points=[np.zeros((0, 3))] * len(manifest.frames),
            static_sources=np.concatenate(s_src),
            dynamic_sources=[np.zeros(0, dtype=np.int64)] * len(manifest.frames))
    else:
        decomp = nmff.decompose(fieldm, manifest, tau=args.tau, seed=cfg.seed)

    scene = trainer.initialize_scene(decomp, manifest, cfg)
    train_frames, held = evaluation.split_frames(len(manifest.frames), cfg.holdout_every)
    print(f"[splatflow] training on {len(train_frames)} frames "
          f"({scene.static.count} static + {scene.dynamic.count} dynamic Gaussians); "
          f"held out: {held}")
    telemetry_path = out / "telemetry.jsonl"
    with open(telemetry_path, "w") as tf:
        def telemetry(rec):
            tf.write(json.dumps(rec) + "\n")
        trainer.train(scene, fieldm, manifest, cfg, train_frames, telemetry)
    ck = out / "scene.sfck"
    trainer.save_checkpoint(scene, fieldm, ck, config=cfg,
                            extra={"train_frames": train_frames, "heldout": held})
    print(f"[splatflow] checkpoint -> {ck}; telemetry -> {telemetry_path}")
    return 0


def cmd_render(args):
    import numpy as np
    from . import evaluation, scenegraph, trainer
    from .scenegraph import save_depth, save_flow_map, save_image
    manifest = scenegraph.load_manifest(Path(args.scene_dir) / "scene.json")
    scene, fieldm, _ = trainer.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _log_config(out, "render", vars(args))
    view = evaluation.render_view(scene, fieldm, manifest, args.frame,
                                  args.camera, timestamp=args.time)
    tag = f"f{args.frame:03d}" + (f"_t{args.time:.3f}" if args.time is not None else "")
    save_image(view.color, out / f"{tag}_color.png")
    save_depth(view.depth, out / f"{tag}_depth.bin")
    from PIL import Image
    dnorm = np.clip(view.depth / max(view.depth.max(), 1e-6) * 65535, 0, 65535)
    Image.fromarray(dnorm.astype(np.uint16)).save(out / f"{tag}_depth.png")
    save_flow_map(view.flow, out / f"{tag}_flow.flo")
    print(f"[splatflow] rendered {tag} -> {out}")
    return 0


def cmd_eval(args):
    from . import evaluation, nmff, scenegraph, trainer
    manifest = scenegraph.load_manifest(Path(args.scene_dir) / "scene.json")
    scene, fieldm, header = trainer.load_checkpoint(args.checkpoint)
    train, held = evaluation.split_frames(len(manifest.frames), args.holdout_every)
    frames = {"train": train, "heldout": held,
              "all": list(range(len(manifest.frames)))}[args.split]
    metrics = evaluation.evaluate_views(scene, fieldm, manifest, frames)
    metrics["split"] = args.split
    metrics["frames"] = frames
    if fieldm is not None:
        gt_labels = []
        ok = True
        for i in range(len(manifest.frames)):
            try:
                gt_labels.append(evaluation.load_gt_labels(manifest, i))
            except FileNotFoundError:
                ok = False
                break
        if ok:
            decomp = nmff.decompose(fieldm, manifest, tau=args.tau)
            metrics["decomposition_f1"] = evaluation.decomposition_f1(
                decomp.labels, gt_labels)
    text = json.dumps(metrics, indent=1, default=float)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"[splatflow] metrics -> {args.out}")
    else:
        print(text)
    return 0


def cmd_gradcheck(args):
    from . import grad
    scene, fieldm, frames, weights = grad.make_gradcheck_fixture()
    report = grad.finite_diff_check(scene, fieldm, frames, weights,
                                    step=args.step, tolerance=args.tolerance,
                                    samples_per_class=args.samples, seed=args.seed)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0 if report.passed else 2


def main(argv=None):
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "synth": cmd_synth, "pretrain-nmff": cmd_pretrain,
            "decompose": cmd_decompose, "train": cmd_train,
            "render": cmd_render, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
        }[args.command]
        return handler(args)
    except SystemExit_ as e:
        print(f"[splatflow] {e}", file=sys.stderr)
        return e.code
    except Exception as e:  # map the taxonomy onto exit codes
        from .errors import FormatError, NumericError, ValidationError
        print(f"[splatflow] error: {e}", file=sys.stderr)
        if isinstance(e, (ValidationError, FormatError)):
            return 1
        if isinstance(e, (NumericError, FloatingPointError)):
            return 2
        if isinstance(e, (OSError, FileNotFoundError)):
            return 3
        raise


if __name__ == "__main__":
    sys.exit(main())
