"""Posed image collections: NeRF-synthetic folders, LLFF pose arrays, oracle scenes."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError, LoadError
from ..geometry import Camera, intrinsics
from .io import read_png, write_png
from .oracle import OracleScene, hit_mask, render_oracle


@dataclass
class View:
    camera: Camera
    rgb: np.ndarray
    split: str = "train"
    name: str = ""
    depth: np.ndarray | None = None


@dataclass
class Dataset:
    views: list
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    near: float = 0.0
    far: float | None = None
    background: str = "white"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        if not np.all(self.bbox_min < self.bbox_max):
            raise LoadError("degenerate scene bbox")
        for split in ("train", "test"):
            shapes = {v.rgb.shape for v in self.split(split)}
            if len(shapes) > 1:
                raise LoadError(f"{split} images differ in size: {sorted(shapes)}")
        for v in self.views:
            if v.rgb.shape[:2] != (v.camera.height, v.camera.width):
                raise LoadError(f"view {v.name!r}: image does not match camera size")

    def split(self, name: str) -> list:
        return [v for v in self.views if v.split == name]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bbox_min + self.bbox_max)

    def subset(self, train_ids) -> "Dataset":
        """Keep the chosen training views (by position in the train split) and all test views."""
        train = self.split("train")
        chosen = [train[i] for i in train_ids]
        return Dataset(chosen + self.split("test"), self.bbox_min, self.bbox_max,
                       self.near, self.far, self.background, dict(self.meta))


def _composite(img: np.ndarray, background: str) -> np.ndarray:
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.shape[2] == 4:
        bg = 1.0 if background == "white" else 0.0
        a = img[..., 3:4]
        return img[..., :3] * a + bg * (1.0 - a)
    return img[..., :3]


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise LoadError(f"{path}: missing") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LoadError(f"{path}: malformed JSON ({exc})") from exc


def _frame_image(root: str, file_path: str) -> str:
    p = os.path.normpath(os.path.join(root, file_path))
    if os.path.splitext(p)[1] == "":
        p += ".png"
    return p


def load_nerf_synthetic(root, background: str = "white", splits=("train", "test"),
                        scale: int = 1) -> Dataset:
    """Read ``transforms_<split>.json`` files and their images.

    Camera-to-world matrices are inverted into world-to-camera extrinsics; the
    focal length follows from ``camera_angle_x`` and the image width.  Optional
    keys ``bbox`` (``[[x,y,z],[x,y,z]]``), ``near`` and ``far`` are honoured;
    otherwise the standard synthetic-scene box and bounds are used.  ``scale``
    downsamples images by box averaging.
    """
    root = os.fspath(root)
    views = []
    meta_all = {}
    for split in splits:
        path = os.path.join(root, f"transforms_{split}.json")
        if split != "train" and not os.path.exists(path):
            continue
        meta = _load_json(path)
        if "camera_angle_x" not in meta or "frames" not in meta:
            raise LoadError(f"{path}: needs camera_angle_x and frames")
        meta_all.setdefault("bbox", meta.get("bbox"))
        meta_all.setdefault("near", meta.get("near"))
        meta_all.setdefault("far", meta.get("far"))
        for k, fr in enumerate(meta["frames"]):
            if "transform_matrix" not in fr or "file_path" not in fr:
                raise LoadError(f"{path}: frame {k} lacks transform_matrix or file_path")
            c2w = np.asarray(fr["transform_matrix"], dtype=np.float64)
            if c2w.shape != (4, 4):
                raise LoadError(f"{path}: frame {k} transform_matrix is not 4x4")
            img_path = _frame_image(root, fr["file_path"])
            if not os.path.isfile(img_path):
                raise LoadError(f"{img_path}: missing image")
            img = read_png(img_path)
            if scale > 1:
                h, w = img.shape[0] // scale, img.shape[1] // scale
                img = img[: h * scale, : w * scale].reshape(h, scale, w, scale, -1).mean(axis=(1, 3))
            rgb = _composite(img, background)
            H, W = rgb.shape[:2]
            f = 0.5 * W / np.tan(0.5 * float(meta["camera_angle_x"]))
            try:
                cam = Camera(intrinsics(f, f, 0.5 * W, 0.5 * H), np.linalg.inv(c2w), W, H)
            except (DomainError, np.linalg.LinAlgError) as exc:
                raise LoadError(f"{path}: frame {k}: {exc}") from exc
            views.append(View(cam, rgb, split, fr["file_path"]))
    if not views:
        raise LoadError(f"{root}: no frames")
    bbox = meta_all.get("bbox") or [[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]]
    near = meta_all.get("near")
    far = meta_all.get("far")
    return Dataset(views, bbox[0], bbox[1], 2.0 if near is None else float(near),
                   6.0 if far is None else float(far), background, {"source": root})


def load_llff_poses(root, images: bool = True, holdout: int = 8) -> Dataset:
    """Read ``poses_bounds.npy`` (N x 17: 3x5 pose-with-hwf, near, far).

    Poses use the LLFF column order (down, right, back); they are converted to
    right/up/back camera axes.  Every ``holdout``-th view is a test view.
    """
    root = os.fspath(root)
    path = os.path.join(root, "poses_bounds.npy")
    try:
        arr = np.load(path, allow_pickle=False)
    except FileNotFoundError as exc:
        raise LoadError(f"{path}: missing") from exc
    except (ValueError, EOFError, OSError) as exc:
        raise LoadError(f"{path}: unreadable ({exc})") from exc
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 17 or arr.shape[0] == 0:
        raise LoadError(f"{path}: expected an N x 17 array, got shape {arr.shape}")
    files = []
    if images:
        img_dir = os.path.join(root, "images")
        if not os.path.isdir(img_dir):
            raise LoadError(f"{img_dir}: missing")
        files = sorted(f for f in os.listdir(img_dir) if f.lower().endswith(".png"))
        if len(files) != len(arr):
            raise LoadError(f"{img_dir}: {len(files)} images for {len(arr)} poses")
    views = []
    nears, fars = arr[:, 15], arr[:, 16]
    for i, row in enumerate(arr):
        m = row[:15].reshape(3, 5)
        h, w, f = m[:, 4]
        down, right, back, c = m[:, 0], m[:, 1], m[:, 2], m[:, 3]
        c2w = np.eye(4)
        c2w[:3, :3] = np.stack([right, -down, back], axis=1)
        c2w[:3, 3] = c
        W, H = int(round(w)), int(round(h))
        try:
            cam = Camera(intrinsics(f, f, 0.5 * W, 0.5 * H), np.linalg.inv(c2w), W, H)
        except (DomainError, np.linalg.LinAlgError) as exc:
            raise LoadError(f"{path}: row {i}: {exc}") from exc
        split = "test" if i % holdout == 0 else "train"
        if images:
            rgb = _composite(read_png(os.path.join(root, "images", files[i])), "white")
        else:
            rgb = np.zeros((H, W, 3))
        views.append(View(cam, rgb, split, files[i] if files else str(i)))
    centers = np.stack([v.camera.center for v in views])
    span = float(fars.max())
    lo = centers.min(axis=0) - span
    hi = centers.max(axis=0) + span
    return Dataset(views, lo, hi, float(nears.min()), float(fars.max()), "white",
                   {"source": root, "llff": True})


def oracle_dataset(scene: OracleScene, train_cams, test_cams) -> Dataset:
    """In-memory dataset rendered from an oracle scene (with exact depth)."""
    views = []
    for split, cams in (("train", train_cams), ("test", test_cams)):
        for k, cam in enumerate(cams):
            rgb, depth = render_oracle(scene, cam)
            views.append(View(cam, rgb, split, f"{split}_{k}", depth))
    return Dataset(views, scene.bbox_min, scene.bbox_max, 0.0, None,
                   "white" if tuple(scene.background) == (1.0, 1.0, 1.0) else "black")


def write_nerf_synthetic(root, scene: OracleScene, train_cams, test_cams) -> None:
    """Write an oracle scene as a NeRF-synthetic style folder (RGBA PNGs)."""
    root = os.fspath(root)
    lo, hi = np.asarray(scene.bbox_min, float), np.asarray(scene.bbox_max, float)
    for split, cams in (("train", train_cams), ("test", test_cams)):
        if not cams:
            continue
        os.makedirs(os.path.join(root, split), exist_ok=True)
        frames = []
        for k, cam in enumerate(cams):
            rgb, _ = render_oracle(scene, cam)
            alpha = hit_mask(scene, cam).astype(np.float64)[..., None]
            write_png(os.path.join(root, split, f"r_{k}.png"), np.concatenate([rgb, alpha], axis=2))
            frames.append({"file_path": f"./{split}/r_{k}", "transform_matrix": cam.c2w.tolist()})
        fx = float(cams[0].K[0, 0])
        meta = {
            "camera_angle_x": 2.0 * float(np.arctan(0.5 * cams[0].width / fx)),
            "bbox": [lo.tolist(), hi.tolist()],
            "near": 0.0,
            "far": float(max(np.linalg.norm(c.center - 0.5 * (lo + hi)) for c in cams)
                         + 0.5 * np.linalg.norm(hi - lo)),
            "frames": frames,
        }
        with open(os.path.join(root, f"transforms_{split}.json"), "w") as f:
            json.dump(meta, f, indent=2)
