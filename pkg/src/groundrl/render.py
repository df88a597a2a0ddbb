"""Portable pixmap I/O and saliency overlays."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .reward import BoundingBox
from .saliency import SaliencyMap

HEAT_COLOR = np.array([1.0, 0.0, 0.0])
BOX_COLOR = np.array([0.0, 1.0, 0.0])


class PixmapError(ValueError):
    pass


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PixmapError(f"expected (H, W, 3) image, got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w, _ = data.shape
    return f"P6\n{w} {h}\n255\n".encode() + data.tobytes()


_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def decode_ppm(raw: bytes) -> np.ndarray:
    m = _HEADER.match(raw)
    if not m:
        raise PixmapError("not a binary P6 pixmap")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PixmapError(f"unsupported maxval {maxval}")
    body = raw[m.end() :]
    if len(body) != w * h * 3:
        raise PixmapError(f"pixmap body has {len(body)} bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path: str | Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def heatmap_image(
    smap: SaliencyMap,
    image: np.ndarray,
    boxes: Sequence[BoundingBox] = (),
    scale: int = 1,
) -> np.ndarray:
    """Half-dimmed image plus a red overlay proportional to saliency, boxes outlined in green."""
    h, w, _ = image.shape
    rows, cols = smap.grid
    heat = smap.to_pixels(h // rows)
    top = heat.max()
    heat = heat / top if top > 0 else heat
    out = 0.5 * image + 0.5 * heat[..., None] * HEAT_COLOR
    for b in boxes:
        b.validate(w, h)
        out[b.y0, b.x0 : b.x1] = BOX_COLOR
        out[b.y1 - 1, b.x0 : b.x1] = BOX_COLOR
        out[b.y0 : b.y1, b.x0] = BOX_COLOR
        out[b.y0 : b.y1, b.x1 - 1] = BOX_COLOR
    if scale > 1:
        out = np.repeat(np.repeat(out, scale, axis=0), scale, axis=1)
    return out


def render_heatmap(
    path: str | Path,
    smap: SaliencyMap,
    image: np.ndarray,
    boxes: Sequence[BoundingBox] = (),
    scale: int = 1,
) -> Path:
    path = Path(path)
    write_ppm(path, heatmap_image(smap, image, boxes, scale))
    return path
