"""Command-line entry point: ``sdfocc <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .config import describe_defaults, load_config
from .errors import ConfigError, DomainError, NumericError, ParseError
from .field import load_field
from .geometry import Camera, Pose, yaw_pitch_pose
from .renderer import DEFAULT_SAMPLES, render_image

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _csv_out(rows, header):
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def cmd_synth(args):
    from .scenes import parse_scene_file, synthesize

    cfg = parse_scene_file(args.scene)
    m = synthesize(cfg, args.out_dir)
    print(f"wrote {len(m.frames)} frames to {args.out_dir}")


def cmd_fit(args):
    from .fitting import fit_scene

    cfg = load_config(args.config)
    if args.resume:
        cfg.values["optim.resume"] = os.path.abspath(args.resume)

    def progress(k, report):
        if k % args.log_every == 0:
            logging.info("step %d total %.6f", k, report.total)

    res = fit_scene(cfg, progress=progress)
    print(f"checkpoint {res.checkpoint}")
    print(f"loss csv {res.csv_path}")


def cmd_eval_occ(args):
    from .evaluation import extract_occupancy, load_occ, miou, occ_metrics

    field, _ = load_field(args.checkpoint)
    gt = load_occ(args.gt)
    pred = extract_occupancy(field, gt.spec)
    m = occ_metrics(pred, gt, use_mask=args.mask)
    row = [args.run_id, f"{m.iou:.6f}", f"{m.precision:.6f}", f"{m.recall:.6f}", m.tp, m.fp, m.fn]
    header = ["run_id", "iou", "precision", "recall", "tp", "fp", "fn"]
    if field.n_classes:
        header.append("miou")
        row.append(f"{miou(pred, gt, gt.n_classes, use_mask=args.mask):.6f}")
    _csv_out([row], header)
    if args.save:
        from .evaluation import save_occ
        save_occ(args.save, pred)


def cmd_eval_depth(args):
    from .evaluation import depth_metrics, median_scale, subsampled_view
    from .scenes import load_dataset

    manifest = args.dataset
    if os.path.isdir(manifest):
        manifest = os.path.join(manifest, "manifest.txt")
    field, _ = load_field(args.checkpoint)
    data = load_dataset(manifest, args.split)
    if not data.cameras:
        raise DomainError(f"dataset has no {args.split!r} frames")
    preds, gts = [], []
    for cam, gt in zip(data.cameras, data.depths):
        if gt is None:
            raise DomainError("depth evaluation needs ground-truth depth maps")
        cam_eval, gt_eval = (cam, gt) if args.full_res else subsampled_view(cam, gt)
        z, _ = render_image(field, cam_eval, M=args.samples, dtype=np.float32)
        z = np.where(np.isfinite(z), z, 0.0)
        if args.median_scale:
            z = median_scale(z, gt_eval)
        preds.append(z.ravel())
        gts.append(gt_eval.ravel())
    m = depth_metrics(np.concatenate(preds), np.concatenate(gts))
    d = m.as_dict()
    _csv_out([[args.run_id] + [d[k] if k == "valid_count" else f"{d[k]:.6f}" for k in d]],
             ["run_id"] + list(d))


def _offset_pose(pose: Pose, dx, dy, yaw_deg):
    """Shift the camera in its own heading frame and turn it left by ``yaw_deg``."""
    fwd = pose.rotation[2]
    yaw = np.arctan2(-fwd[0], fwd[1])
    pitch = -np.arcsin(np.clip(fwd[2], -1.0, 1.0))
    right = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    ahead = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
    eye = pose.center + dx * right + dy * ahead
    return yaw_pitch_pose(eye, yaw + np.deg2rad(yaw_deg), pitch)


def cmd_render_novel(args):
    from .scenes import read_cameras, write_pfm, write_ppm

    field, _ = load_field(args.checkpoint)
    cams = read_cameras(args.cameras)
    os.makedirs(args.out_dir, exist_ok=True)
    for fid, cam in cams.items():
        pose = _offset_pose(cam.pose, args.offset_x, args.offset_y, args.yaw)
        novel = Camera(cam.intrinsics, pose)
        z, color = render_image(field, novel, M=args.samples, dtype=np.float32)
        write_pfm(os.path.join(args.out_dir, f"{fid}.pfm"), np.nan_to_num(z, nan=1000.0))
        write_ppm(os.path.join(args.out_dir, f"{fid}.ppm"), color)
    print(f"rendered {len(cams)} views to {args.out_dir}")


def cmd_gradcheck(args):
    from .fitting import gradcheck

    cfg = load_config(args.config)
    rows = gradcheck(cfg, f64=args.f64, rays=args.rays, samples=args.samples,
                     resolution=args.resolution)
    _csv_out([(n, repr(a), repr(b), repr(e)) for n, a, b, e in rows],
             ["param_id", "analytic", "numeric", "rel_err"])


def build_parser():
    p = argparse.ArgumentParser(prog="sdfocc", description="Fit and evaluate SDF occupancy fields.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset from a scene file")
    s.add_argument("scene")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", help="fit a field to a dataset",
                       epilog="config keys and defaults:\n  " + "\n  ".join(describe_defaults()),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("config")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval-occ", help="occupancy IoU against a ground-truth grid")
    s.add_argument("checkpoint")
    s.add_argument("gt")
    s.add_argument("--mask", action="store_true", help="restrict counts to the camera mask")
    s.add_argument("--run-id", default="run")
    s.add_argument("--save", help="also write the predicted grid here")
    s.set_defaults(func=cmd_eval_occ)

    s = sub.add_parser("eval-depth", help="depth metrics on held-out views")
    s.add_argument("checkpoint")
    s.add_argument("dataset", help="dataset directory or manifest")
    s.add_argument("--median-scale", action="store_true")
    s.add_argument("--split", default="test")
    s.add_argument("--full-res", action="store_true", help="evaluate at input resolution")
    s.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    s.add_argument("--run-id", default="run")
    s.set_defaults(func=cmd_eval_depth)

    s = sub.add_parser("render-novel", help="render depth and color from shifted cameras")
    s.add_argument("checkpoint")
    s.add_argument("cameras")
    s.add_argument("--offset-x", type=float, default=0.0, help="meters to the right")
    s.add_argument("--offset-y", type=float, default=0.0, help="meters forward")
    s.add_argument("--yaw", type=float, default=0.0, help="degrees, positive turns left")
    s.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    s.add_argument("--out-dir", default="novel")
    s.set_defaults(func=cmd_render_novel)

    s = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    s.add_argument("config")
    s.add_argument("--f64", action="store_true", help="64-bit evaluation")
    s.add_argument("--rays", type=int, default=4)
    s.add_argument("--samples", type=int, default=16)
    s.add_argument("--resolution", type=int, default=8)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, DomainError, ParseError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
