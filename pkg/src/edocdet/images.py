"""8-bit grayscale image I/O (binary PGM and PNG) and detection overlays."""

from __future__ import annotations

import re
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np


class ImageError(ValueError):
    """Unreadable or malformed image file."""


def write_pgm(path, pixels: np.ndarray) -> None:
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ImageError(f"PGM writer needs a 2-D uint8 array, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise ImageError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = blob[m.end():m.end() + w * h]
    if len(data) != w * h:
        raise ImageError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_image(path, pixels: np.ndarray) -> None:
    """Dispatch on suffix: .pgm natively, anything else through Pillow."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        if pixels.ndim == 3:  # collapse RGB overlays for PGM output
            pixels = pixels.mean(axis=2).round().astype(np.uint8)
        write_pgm(path, pixels)
        return
    from PIL import Image

    Image.fromarray(pixels).save(path)


def read_image(path) -> np.ndarray:
    """Load as 2-D uint8 grayscale."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8).copy()


# ---------------------------------------------------------------------------
# detection overlays

# 3x5 digit glyphs for category labels, row-major bit strings.
_DIGITS = {
    "0": "111101101101111", "1": "010110010010111", "2": "111001111100111",
    "3": "111001111001111", "4": "101101111001001", "5": "111100111001111",
    "6": "111100111101111", "7": "111001001001001", "8": "111101111101111",
    "9": "111101111001111",
}


def category_gray(category_id: int) -> int:
    return 20 + (category_id * 9) % 200


def _draw_digit(canvas: np.ndarray, digit: str, top: int, left: int, value: int) -> None:
    bits = _DIGITS[digit]
    h, w = canvas.shape
    for r in range(5):
        for c in range(3):
            if bits[r * 3 + c] == "1" and 0 <= top + r < h and 0 <= left + c < w:
                canvas[top + r, left + c] = value


def overlay_mask(shape: Tuple[int, int], detections: Sequence, labels: bool = True) -> np.ndarray:
    """Boolean mask of every pixel the overlay would touch."""
    probe = np.zeros(shape, dtype=np.uint8)
    render_detections(probe, detections, labels=labels, _force_value=255)
    return probe > 0


def render_detections(pixels: np.ndarray, detections: Sequence, labels: bool = True,
                      _force_value: int | None = None) -> np.ndarray:
    """Draw 1-px category-shaded box outlines (optionally with id labels).

    Mutates and returns a copy unless called on a scratch canvas via
    overlay_mask. With no detections the output equals the input.
    """
    out = pixels if _force_value is not None else pixels.copy()
    h, w = out.shape
    for det in detections:
        box = det.bbox if hasattr(det, "bbox") else det["bbox"]
        cat = det.category_id if hasattr(det, "category_id") else det["category_id"]
        value = _force_value if _force_value is not None else category_gray(cat)
        x1 = int(round(box[0]))
        y1 = int(round(box[1]))
        x2 = int(round(box[0] + box[2])) - 1
        y2 = int(round(box[1] + box[3])) - 1
        x1c, x2c = max(x1, 0), min(x2, w - 1)
        y1c, y2c = max(y1, 0), min(y2, h - 1)
        if x1c > x2c or y1c > y2c:
            continue
        if 0 <= y1 < h:
            out[y1, x1c:x2c + 1] = value
        if 0 <= y2 < h:
            out[y2, x1c:x2c + 1] = value
        if 0 <= x1 < w:
            out[y1c:y2c + 1, x1] = value
        if 0 <= x2 < w:
            out[y1c:y2c + 1, x2] = value
        if labels:
            text = str(cat)
            for k, ch in enumerate(text):
                _draw_digit(out, ch, y1 + 2, x1 + 2 + 4 * k, value)
    return out
