"""Image, depth-map and checkpoint files."""

from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image

from ..errors import FormatError
from ..voxel import load_checkpoint, save_checkpoint  # noqa: F401  (re-exported)

_PFM_HEADER = re.compile(rb"^(Pf|PF)\n(\d+) (\d+)\n(-?[0-9.eE+-]+)\n")


def write_pfm(path, depth: np.ndarray) -> None:
    """Grayscale little-endian PFM; rows are stored bottom-up as the format requires."""
    a = np.asarray(depth, dtype="<f4")
    if a.ndim != 2:
        raise FormatError(f"{path}: PFM writer takes a 2-D array, got shape {a.shape}")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = _PFM_HEADER.match(data)
    if m is None:
        raise FormatError(f"{path}: not a PFM file")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    if kind != b"Pf":
        raise FormatError(f"{path}: only grayscale PFM is supported")
    if scale == 0:
        raise FormatError(f"{path}: zero scale")
    dtype = "<f4" if scale < 0 else ">f4"
    body = data[m.end():]
    if len(body) != 4 * w * h:
        raise FormatError(f"{path}: expected {4 * w * h} data bytes, found {len(body)}")
    a = np.frombuffer(body, dtype=dtype).reshape(h, w)[::-1]
    return a.astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Write floats in [0, 1] (quantized) or uint8 data; 2-D arrays become grayscale."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    if a.ndim == 3 and a.shape[2] not in (3, 4):
        raise FormatError(f"{path}: PNG needs 3 or 4 channels, got {a.shape[2]}")
    Image.fromarray(a).save(os.fspath(path), format="PNG")


def read_png(path, as_float: bool = True) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGBA" if "A" in im.getbands() else "RGB")
            a = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return a.astype(np.float64) / 255.0 if as_float else a


def write_mask_png(path, mask: np.ndarray) -> None:
    write_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))
