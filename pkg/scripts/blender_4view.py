"""Four-view run on a NeRF-synthetic Blender scene.

Not part of the test suite. Needs the dataset on disk and, for the intended
setup, per-view monocular depth maps (PFM) for the external depth provider.

    python scripts/blender_4view.py --dataset /data/nerf_synthetic/lego --out runs/lego4
    python scripts/blender_4view.py --dataset ... --depth-dir /data/lego_depth --out ...

Training uses images downsampled by ``--scale``; evaluation renders the
test cameras at full resolution. Prints the held-out mean PSNR and whether
it lands in the target band.
"""
import argparse
import json
import os
import sys

from revoxf.cli import main as revoxf_main

TARGET_DB, BAND_DB = 20.72, 1.5
TRAIN_VIEWS = [26, 86, 2, 55]


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--depth-dir", default=None)
    ap.add_argument("--scale", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps-scale", type=float, default=None)
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    lines = ['preset = "paper"', f"seed = {args.seed}"]
    if args.depth_dir:
        lines += ['depth_mode = "external-file"', f"depth_dir = {json.dumps(os.path.abspath(args.depth_dir))}"]
    lines += ["", "[data]", f"dataset = {json.dumps(os.path.abspath(args.dataset))}",
              f"scale = {args.scale}", f"train_views = {TRAIN_VIEWS}"]
    cfg_path = os.path.join(args.out, "config.toml")
    with open(cfg_path, "w") as f:
        f.write("\n".join(lines) + "\n")

    model_dir = os.path.join(args.out, "model")
    extra = ["--steps-scale", str(args.steps_scale)] if args.steps_scale else []
    if revoxf_main(["train", "--config", cfg_path, "--out", model_dir, *extra]) != 0:
        return 1
    eval_dir = os.path.join(args.out, "eval")
    if revoxf_main(["eval", "--checkpoint", os.path.join(model_dir, "model.rvxf"),
                    "--dataset", os.path.abspath(args.dataset), "--out", eval_dir]) != 0:
        return 1
    with open(os.path.join(eval_dir, "eval.json")) as f:
        got = float(json.load(f)["mean_psnr"])
    ok = abs(got - TARGET_DB) <= BAND_DB
    print(f"held-out PSNR {got:.2f} dB, target {TARGET_DB} +/- {BAND_DB}: {'in band' if ok else 'out of band'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
