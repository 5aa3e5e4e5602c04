"""Minimal 8-bit palette PNG writer for clustering maps (stdlib zlib only)."""
from __future__ import annotations

import struct
import zlib

import numpy as np

# 16 distinguishable colors; index 0 (unlabeled) is black
DEFAULT_PALETTE = (
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25),
    (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240),
    (240, 50, 230), (210, 245, 60), (250, 190, 190), (0, 128, 128),
    (170, 110, 40), (128, 0, 0), (128, 128, 0), (255, 255, 255),
)


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload)))


def write_palette_png(path, indices: np.ndarray, palette=DEFAULT_PALETTE) -> None:
    """Write an (H, W) array of palette indices as an indexed-color PNG."""
    indices = np.asarray(indices)
    if indices.ndim != 2:
        raise ValueError(f"expected 2-D index raster, got shape {indices.shape}")
    if indices.min() < 0 or indices.max() >= len(palette):
        raise ValueError(f"indices outside palette range 0..{len(palette) - 1}")
    h, w = indices.shape
    raster = indices.astype(np.uint8)

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 3, 0, 0, 0)  # 8-bit, color type 3
    plte = b"".join(bytes(c) for c in palette)
    scanlines = b"".join(b"\x00" + raster[y].tobytes() for y in range(h))
    idat = zlib.compress(scanlines, 9)

    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(_chunk(b"IHDR", ihdr))
        fh.write(_chunk(b"PLTE", plte))
        fh.write(_chunk(b"IDAT", idat))
        fh.write(_chunk(b"IEND", b""))


def class_map_to_png(path, labels: np.ndarray, palette=DEFAULT_PALETTE) -> None:
    """Export class labels (0 = unlabeled/black) cycling through the palette."""
    labels = np.asarray(labels)
    indices = np.where(labels == 0, 0, (labels - 1) % (len(palette) - 1) + 1)
    write_palette_png(path, indices, palette)
