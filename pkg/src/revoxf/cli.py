"""``revoxf`` command line: train, render, eval, warp-inspect, oracle-gen."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .data.datasets import load_nerf_synthetic, write_nerf_synthetic
from .data.io import read_pfm, write_mask_png, write_pfm, write_png
from .data.oracle import (
    Box,
    OracleScene,
    Sphere,
    Texture,
    default_scene,
    render_oracle,
    ring_cameras,
    two_plane_scene,
)
from .errors import DepthFileError, DomainError, FormatError, LoadError, NumericError
from .geometry import Camera, WarpPoseSpec, sample_warp_poses
from .metrics import MetricReport
from .render import render_image, set_threads_from_env
from .trainer import load_config, load_render_config, save_model, train
from .voxel import load_checkpoint
from .warp import build_warp_product, forward_warp

EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg, data = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.steps_scale is not None:
        cfg = replace(cfg, stages=tuple(replace(s, steps=max(1, int(s.steps * args.steps_scale)))
                                        for s in cfg.stages))
    if "dataset" not in data:
        raise UsageError("config needs a [data] table with a 'dataset' path")
    root = data["dataset"]
    if not os.path.isabs(root):
        root = os.path.join(os.path.dirname(os.path.abspath(args.config)), root)
    ds = load_nerf_synthetic(root, background=cfg.render.background, scale=int(data.get("scale", 1)))
    if "train_views" in data:
        ds = ds.subset(data["train_views"])
    os.makedirs(args.out, exist_ok=True)
    res = train(ds, cfg, log_path=os.path.join(args.out, "train_log.jsonl"))
    ckpt = save_model(res, args.out, ds.near, ds.far)
    print(ckpt)
    return 0


def _load_poses(path) -> list[Camera]:
    with open(path) as f:
        d = json.load(f)
    if isinstance(d, dict) and "frames" in d:
        W, H = int(d.get("w", 400)), int(d.get("h", 400))
        f_ = 0.5 * W / np.tan(0.5 * float(d["camera_angle_x"]))
        K = np.array([[f_, 0, 0.5 * W], [0, f_, 0.5 * H], [0, 0, 1.0]])
        return [Camera(K, np.linalg.inv(np.asarray(fr["transform_matrix"], float)), W, H)
                for fr in d["frames"]]
    if isinstance(d, list):
        return [Camera.from_dict(c) for c in d]
    raise UsageError(f"{path}: expected a list of cameras or a transforms-style object")


def cmd_render(args) -> int:
    grid = load_checkpoint(args.checkpoint)
    rc, near, far = load_render_config(args.checkpoint)
    cams = _load_poses(args.pose_file)
    os.makedirs(args.out, exist_ok=True)
    for k, cam in enumerate(cams):
        rgb, depth = render_image(grid, cam, rc, near, far)
        write_png(os.path.join(args.out, f"view_{k:03d}.png"), rgb)
        write_pfm(os.path.join(args.out, f"depth_{k:03d}.pfm"), depth)
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    grid = load_checkpoint(args.checkpoint)
    rc, near, far = load_render_config(args.checkpoint)
    ds = load_nerf_synthetic(args.dataset, background=rc.background, splits=(args.split,))
    views = ds.split(args.split)
    if not views:
        raise UsageError(f"no {args.split} views in {args.dataset}")
    os.makedirs(args.out, exist_ok=True)
    report = MetricReport()
    t_render = 0.0
    for k, v in enumerate(views):
        t = time.perf_counter()
        rgb, depth = render_image(grid, v.camera, rc, near, far)
        t_render += time.perf_counter() - t
        rgb = np.clip(rgb, 0.0, 1.0)
        report.add(v.name, rgb, v.rgb)
        write_png(os.path.join(args.out, f"{args.split}_{k:03d}.png"), rgb)
        write_pfm(os.path.join(args.out, f"{args.split}_{k:03d}_depth.pfm"), depth)
    if not args.strict:
        report.timings = {"render_s": t_render, "total_s": time.perf_counter() - t0}
    with open(os.path.join(args.out, "eval.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps({"mean_psnr": report.to_dict()["mean_psnr"], "mean_ssim": report.mean_ssim}))
    return 0


def _parse_pose_spec(s: str) -> WarpPoseSpec:
    """``mode:lo:hi:count``, e.g. ``spherical-offset:5:10:1``."""
    parts = s.split(":")
    if len(parts) != 4:
        raise UsageError(f"pose spec {s!r} is not mode:lo:hi:count")
    try:
        return WarpPoseSpec(parts[0], float(parts[1]), float(parts[2]), int(parts[3]))
    except ValueError as exc:
        raise UsageError(f"bad pose spec {s!r}: {exc}") from exc


def cmd_warp_inspect(args) -> int:
    ds = load_nerf_synthetic(args.dataset)
    train_views = ds.split("train")
    if not 0 <= args.view < len(train_views):
        raise UsageError(f"view {args.view} out of range (0..{len(train_views) - 1})")
    spec = _parse_pose_spec(args.pose_spec)
    src = train_views[args.view]
    grid = rc = None
    if args.checkpoint:
        grid = load_checkpoint(args.checkpoint)
        rc, near, far = load_render_config(args.checkpoint)
        _, src_depth = render_image(grid, src.camera, rc, near, far)
    else:
        depth_path = os.path.join(args.dataset, "depth", f"{os.path.basename(src.name)}.pfm")
        if not os.path.isfile(depth_path):
            raise UsageError("no --checkpoint and no ground-truth depth next to the dataset")
        src_depth = read_pfm(depth_path).astype(np.float64)
        far = float(np.max(src_depth))
        src_depth = np.where(src_depth < far, src_depth, np.nan)
    if spec.mode == "spherical-offset":
        targets = sample_warp_poses(src.camera, spec, args.seed, center=ds.center)
        sources = [src] * len(targets)
    else:
        nxt = train_views[(args.view + 1) % len(train_views)]
        targets = sample_warp_poses([src.camera, nxt.camera], spec, args.seed)
        sources = [src] * len(targets)
    eps = args.eps if args.eps else 0.01 * float(np.linalg.norm(ds.bbox_max - ds.bbox_min))
    os.makedirs(args.out, exist_ok=True)
    for k, (s, dst) in enumerate(zip(sources, targets)):
        if grid is not None:
            _, dst_depth = render_image(grid, dst, rc, near, far)
        else:
            # without a model the transported depth stands in for the rendered one
            _, wdepth, _ = forward_warp(s.rgb, src_depth, s.camera, dst)
            dst_depth = np.where(np.isfinite(wdepth), wdepth, 1.0)
        prod = build_warp_product(args.view, s.rgb, src_depth, s.camera, dst, dst_depth, eps)
        base = os.path.join(args.out, f"target_{k:02d}")
        write_png(base + "_rgb.png", np.where(prod.m_warp[..., None], 0.0, np.nan_to_num(prod.warped_rgb)))
        write_mask_png(base + "_m_warp.png", prod.m_warp)
        write_mask_png(base + "_m_cor.png", prod.m_cor)
        write_mask_png(base + "_m_unreliable.png", prod.m_unreliable)
        write_pfm(base + "_depth.pfm", np.nan_to_num(prod.warped_depth, nan=0.0))
        if prod.ref_depth is not None:
            write_pfm(base + "_ref_depth.pfm", prod.ref_depth)
        with open(base + "_camera.json", "w") as f:
            json.dump(dst.to_dict(), f)
    return 0


def _scene_from_spec(spec: str) -> OracleScene:
    if spec == "default":
        return default_scene()
    if spec == "two-plane":
        return two_plane_scene()
    if not os.path.isfile(spec):
        raise UsageError(f"scene spec {spec!r} is neither a stock scene nor a file")
    with open(spec) as f:
        d = json.load(f)

    def tex(t):
        return Texture(**t) if t else Texture()

    try:
        return OracleScene(
            spheres=[Sphere(tuple(s["center"]), float(s["radius"]), tex(s.get("texture"))) for s in d.get("spheres", [])],
            boxes=[Box(tuple(b["lo"]), tuple(b["hi"]), tex(b.get("texture"))) for b in d.get("boxes", [])],
            background=tuple(d.get("background", (1.0, 1.0, 1.0))),
            bbox_min=tuple(d.get("bbox_min", (-1.0, -1.0, -1.0))),
            bbox_max=tuple(d.get("bbox_max", (1.0, 1.0, 1.0))),
        )
    except (KeyError, TypeError) as exc:
        raise UsageError(f"{spec}: malformed scene spec ({exc})") from exc


def cmd_oracle_gen(args) -> int:
    if args.views < 1 or args.test_views < 0 or args.size < 2:
        raise UsageError("need --views >= 1, --test-views >= 0 and --size >= 2")
    scene = _scene_from_spec(args.scene_spec)
    c = tuple(float(v) for v in scene.center)
    train_cams = ring_cameras(args.views, args.radius, args.elevation, args.size, args.size,
                              center=c, phase_deg=10.0)
    test_cams = ring_cameras(args.test_views, args.radius, args.elevation - 10.0, args.size, args.size,
                             center=c, phase_deg=40.0)
    write_nerf_synthetic(args.out, scene, train_cams, test_cams)
    os.makedirs(os.path.join(args.out, "depth"), exist_ok=True)
    for split, cams in (("train", train_cams), ("test", test_cams)):
        for k, cam in enumerate(cams):
            _, depth = render_oracle(scene, cam)
            write_pfm(os.path.join(args.out, "depth", f"r_{k}.pfm" if split == "train" else f"{split}_r_{k}.pfm"), depth)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="revoxf", description="Few-view voxel radiance fields.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimize a grid from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="run")
    t.add_argument("--steps-scale", type=float, help="multiply every stage's step count")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a checkpoint at given poses")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--pose-file", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", default="eval")
    e.add_argument("--no-strict", dest="strict", action="store_false",
                   help="record wall-clock timings (the JSON is then not reproducible)")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("warp-inspect", help="dump warped images and masks for one view")
    w.add_argument("--dataset", required=True)
    w.add_argument("--view", type=int, required=True)
    w.add_argument("--pose-spec", default="spherical-offset:5:10:1")
    w.add_argument("--checkpoint")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--eps", type=float)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_warp_inspect)

    o = sub.add_parser("oracle-gen", help="write a procedural scene as a dataset")
    o.add_argument("--scene-spec", default="default")
    o.add_argument("--views", type=int, default=4)
    o.add_argument("--test-views", type=int, default=6)
    o.add_argument("--size", type=int, default=80)
    o.add_argument("--radius", type=float, default=3.2)
    o.add_argument("--elevation", type=float, default=25.0)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    set_threads_from_env()
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"revoxf: numeric failure in {exc.term}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, LoadError, FormatError, DepthFileError, DomainError, FileNotFoundError,
            IsADirectoryError, NotADirectoryError, json.JSONDecodeError) as exc:
        print(f"revoxf: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
