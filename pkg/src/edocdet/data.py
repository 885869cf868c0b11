"""COCO-format dataset layer for the 21-category datasheet taxonomy, plus a
deterministic synthetic page generator for desk-scale experiments.

Annotations are [x1, y1, w, h] boxes in pixels with a top-left origin.
Synthetic pages draw each category with a distinctive texture on a white
background; generation is a pure function of (seed, width, height, profile).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import clip_box
from .images import read_image, write_pgm

CATEGORY_NAMES: Tuple[str, ...] = (
    "functional_block_diagram",
    "flowchart",
    "characteristic_curve_diagram",
    "timing_diagram",
    "circuit_diagram",
    "pin_diagram",
    "engineering_drawing",
    "sampling_diagram",
    "three_d_schematic_diagram",
    "pin_name_diagram",
    "marking_diagram",
    "appearance_diagram",
    "functional_register_diagram",
    "layout_diagram",
    "data_structure_diagram",
    "text",
    "table",
    "title",
    "list",
    "caption",
    "other",
)

CATEGORY_ID: Dict[str, int] = {name: i + 1 for i, name in enumerate(CATEGORY_NAMES)}

_FIGURE_LIKE = frozenset(
    CATEGORY_ID[n] for n in CATEGORY_NAMES
    if n not in ("text", "title", "list", "caption", "other")
)


class DatasetError(ValueError):
    """Invalid annotation file or record."""


@dataclass
class Annotation:
    category_id: int
    bbox: List[float]  # [x1, y1, w, h]


@dataclass
class PageRecord:
    image_id: int
    width: int
    height: int
    pixels: Optional[np.ndarray] = None  # uint8 H x W
    file_name: Optional[str] = None
    annotations: List[Annotation] = field(default_factory=list)

    def validate(self) -> None:
        for k, ann in enumerate(self.annotations):
            if not 1 <= ann.category_id <= len(CATEGORY_NAMES):
                raise DatasetError(
                    f"image {self.image_id} annotation {k}: unknown category id {ann.category_id}")
            x1, y1, w, h = ann.bbox
            if w <= 0 or h <= 0:
                raise DatasetError(
                    f"image {self.image_id} annotation {k}: non-positive box size {ann.bbox}")
            if x1 < 0 or y1 < 0 or x1 + w > self.width + 1e-6 or y1 + h > self.height + 1e-6:
                raise DatasetError(
                    f"image {self.image_id} annotation {k}: box {ann.bbox} outside "
                    f"{self.width}x{self.height}")

    def load_pixels(self, images_dir) -> np.ndarray:
        if self.pixels is None:
            if self.file_name is None:
                raise DatasetError(f"image {self.image_id} has neither pixels nor a file name")
            self.pixels = read_image(Path(images_dir) / self.file_name)
        return self.pixels


# ---------------------------------------------------------------------------
# COCO-style annotation files


def load_annotations(path) -> List[PageRecord]:
    """Parse and validate a COCO-style annotation file into page records."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: cannot parse annotation file: {exc}") from exc
    for section in ("images", "annotations", "categories"):
        if section not in doc:
            raise DatasetError(f"{path}: missing '{section}' section")
    for k, cat in enumerate(doc["categories"]):
        cid, name = cat.get("id"), cat.get("name")
        if not 1 <= cid <= len(CATEGORY_NAMES) or CATEGORY_NAMES[cid - 1] != name:
            raise DatasetError(f"category {k}: ({cid}, {name!r}) not in the 21-entry table")
    records: Dict[int, PageRecord] = {}
    for k, img in enumerate(doc["images"]):
        try:
            rec = PageRecord(image_id=int(img["id"]), width=int(img["width"]),
                             height=int(img["height"]), file_name=img.get("file_name"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"image entry {k}: malformed: {exc}") from exc
        records[rec.image_id] = rec
    for k, ann in enumerate(doc["annotations"]):
        image_id = ann.get("image_id")
        if image_id not in records:
            raise DatasetError(f"annotation {k}: dangling image_id {image_id}")
        cid = ann.get("category_id")
        if not isinstance(cid, int) or not 1 <= cid <= len(CATEGORY_NAMES):
            raise DatasetError(f"annotation {k}: unknown category id {cid}")
        bbox = ann.get("bbox")
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise DatasetError(f"annotation {k}: bbox must be [x, y, w, h], got {bbox}")
        records[image_id].annotations.append(Annotation(cid, [float(v) for v in bbox]))
    ordered = [records[img["id"]] for img in doc["images"]]
    for rec in ordered:
        rec.validate()
    return ordered


def coco_dict(records: Sequence[PageRecord]) -> dict:
    images = [{"id": r.image_id, "width": r.width, "height": r.height,
               "file_name": r.file_name or f"page_{r.image_id:05d}.pgm"}
              for r in records]
    annotations = []
    for r in records:
        for ann in r.annotations:
            annotations.append({
                "id": len(annotations) + 1,
                "image_id": r.image_id,
                "category_id": ann.category_id,
                "bbox": [float(v) for v in ann.bbox],
                "area": float(ann.bbox[2] * ann.bbox[3]),
                "iscrowd": 0,
            })
    categories = [{"id": i + 1, "name": name} for i, name in enumerate(CATEGORY_NAMES)]
    return {"images": images, "annotations": annotations, "categories": categories}


def save_annotations(records: Sequence[PageRecord], path) -> None:
    Path(path).write_text(json.dumps(coco_dict(records), indent=1), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic pages


@dataclass(frozen=True)
class LayoutProfile:
    name: str
    categories: Tuple[int, ...]
    min_regions: int = 2
    max_regions: int = 8


PROFILES: Dict[str, LayoutProfile] = {
    # Six visually separable categories for fast desk-scale training.
    "desk": LayoutProfile("desk", tuple(CATEGORY_ID[n] for n in (
        "text", "title", "table", "list", "caption", "characteristic_curve_diagram")),
        min_regions=2, max_regions=5),
    # Everything in the taxonomy.
    "balanced": LayoutProfile("balanced", tuple(range(1, len(CATEGORY_NAMES) + 1)),
                              min_regions=2, max_regions=8),
}


def _region_size(cat: int, rng: np.random.Generator, pw: int, ph: int) -> Tuple[int, int]:
    name = CATEGORY_NAMES[cat - 1]
    u = lambda lo, hi: int(rng.integers(lo, hi + 1))
    fx, fy = pw / 128.0, ph / 128.0  # sizes tuned on a 128 px page
    if name == "title":
        return u(int(30 * fx), int(70 * fx)), u(max(12, int(12 * fy)), max(13, int(18 * fy)))
    if name == "caption":
        return u(int(30 * fx), int(70 * fx)), u(max(8, int(8 * fy)), max(9, int(12 * fy)))
    if name in ("text", "list"):
        return u(int(40 * fx), int(85 * fx)), u(int(22 * fy), int(48 * fy))
    if name == "table":
        return u(int(40 * fx), int(80 * fx)), u(int(26 * fy), int(56 * fy))
    return u(int(30 * fx), int(64 * fx)), u(int(26 * fy), int(56 * fy))


def _overlaps(box, others, gap: int = 2) -> bool:
    x, y, w, h = box
    for ox, oy, ow, oh in others:
        if x < ox + ow + gap and ox < x + w + gap and y < oy + oh + gap and oy < y + h + gap:
            return True
    return False


def synth_page(seed, width: int, height: int, profile: str = "desk") -> PageRecord:
    """One synthetic page: 2-8 non-overlapping textured regions on white."""
    if width < 128 or height < 128:
        raise DatasetError(f"synthetic pages need width/height >= 128, got {width}x{height}")
    if profile not in PROFILES:
        raise DatasetError(f"unknown layout profile '{profile}'")
    prof = PROFILES[profile]
    rng = np.random.default_rng(seed)
    pixels = np.full((height, width), 255, dtype=np.uint8)
    margin = 4
    n_regions = int(rng.integers(prof.min_regions, prof.max_regions + 1))
    placed: List[Tuple[int, int, int, int]] = []
    annotations: List[Annotation] = []
    last_figure: Optional[Tuple[int, int, int, int]] = None
    for _ in range(n_regions):
        cat = int(rng.choice(prof.categories))
        w, h = _region_size(cat, rng, width, height)
        w = min(w, width - 2 * margin)
        h = min(h, height - 2 * margin)
        box = None
        if cat == CATEGORY_ID["caption"] and last_figure is not None:
            fx, fy, fw, fh = last_figure
            cand = (fx, fy + fh + 2, min(w, fw), h)
            if cand[1] + cand[3] <= height - margin and not _overlaps(cand, placed):
                box = cand
        if box is None:
            for _try in range(60):
                x = int(rng.integers(margin, max(margin + 1, width - margin - w)))
                y = int(rng.integers(margin, max(margin + 1, height - margin - h)))
                if not _overlaps((x, y, w, h), placed):
                    box = (x, y, w, h)
                    break
        if box is None:
            continue
        placed.append(box)
        _paint_region(pixels, box, cat, rng)
        annotations.append(Annotation(cat, [float(v) for v in box]))
        if cat in _FIGURE_LIKE:
            last_figure = box
    record = PageRecord(image_id=0, width=width, height=height, pixels=pixels,
                        annotations=annotations)
    record.validate()
    return record


def generate_pages(count: int, seed: int, width: int, height: int,
                   profile: str = "desk") -> List[PageRecord]:
    pages = []
    for i in range(count):
        page = synth_page([seed, i], width, height, profile)
        page.image_id = i + 1
        page.file_name = f"page_{i + 1:05d}.pgm"
        pages.append(page)
    return pages


def write_dataset(records: Sequence[PageRecord], out_dir) -> None:
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_pgm(images_dir / rec.file_name, rec.pixels)
    save_annotations(records, out_dir / "annotations.json")


# --- texture painters -------------------------------------------------------


def _stripes(region: np.ndarray, rng, value: int, row_h: int, gap: int, indent: int = 0,
             bullets: bool = False) -> None:
    h, w = region.shape
    y = 1
    while y + row_h <= h - 1:
        right = w - 1 - int(rng.integers(0, max(2, w // 6)))
        region[y:y + row_h, 1 + indent:max(2 + indent, right)] = value
        if bullets:
            region[y:y + row_h, 1:min(1 + row_h, w)] = 0
        y += row_h + gap


def _grid(region: np.ndarray, rng, value: int) -> None:
    # 2-px rules so lines survive a 2x nearest-neighbour downscale
    h, w = region.shape
    region[0:2, :] = value
    region[h - 2:h, :] = value
    region[:, 0:2] = value
    region[:, w - 2:w] = value
    step_y = max(6, h // int(rng.integers(3, 6)))
    step_x = max(8, w // int(rng.integers(2, 5)))
    for y in range(step_y, h - 2, step_y):
        region[y:y + 2, :] = value
    for x in range(step_x, w - 2, step_x):
        region[:, x:x + 2] = value


def _curve(region: np.ndarray, rng, value: int) -> None:
    h, w = region.shape
    region[:, 1:3] = value                  # y axis
    region[h - 3:h - 1, :] = value          # x axis
    xs = np.arange(2, w - 1)
    phase = rng.uniform(0, 2 * np.pi)
    cycles = rng.uniform(1.0, 2.5)
    ys = (h / 2 + (h / 3) * np.sin(phase + cycles * 2 * np.pi * (xs - 2) / max(1, w - 3))).astype(int)
    ys = np.clip(ys, 1, h - 3)
    for x, y in zip(xs, ys):
        region[y:y + 2, x] = value


def _square_wave(region: np.ndarray, rng, value: int) -> None:
    h, w = region.shape
    row_h = max(6, h // int(rng.integers(2, 4)))
    y = 1
    while y + row_h <= h:
        period = int(rng.integers(8, 17))
        duty = period // 2
        hi, lo = y + 1, y + row_h - 2
        for x in range(1, w - 1):
            level = hi if (x // duty) % 2 == 0 else lo
            region[level, x] = value
            if x % duty == 0:
                region[hi:lo + 1, x] = value
        y += row_h + 2
    region[:, 0] = value


def _blocks_and_links(region: np.ndarray, rng, value: int, rows: int, cols: int) -> None:
    h, w = region.shape
    bw, bh = max(4, w // (cols * 2)), max(3, h // (rows * 2))
    centers = []
    for r in range(rows):
        for c in range(cols):
            cx = int((c + 0.5) * w / cols)
            cy = int((r + 0.5) * h / rows)
            x1, y1 = max(0, cx - bw), max(0, cy - bh)
            x2, y2 = min(w - 1, cx + bw), min(h - 1, cy + bh)
            region[y1, x1:x2] = value
            region[y2, x1:x2 + 1] = value
            region[y1:y2, x1] = value
            region[y1:y2, x2] = value
            centers.append((cy, cx))
    for (y1, x1), (y2, x2) in zip(centers, centers[1:]):
        if y1 == y2:
            region[y1, min(x1, x2):max(x1, x2)] = value
        else:
            region[min(y1, y2):max(y1, y2), x2] = value


def _pins(region: np.ndarray, rng, value: int, named: bool) -> None:
    h, w = region.shape
    x1, x2 = w // 4, 3 * w // 4
    region[1, x1:x2] = value
    region[h - 2, x1:x2] = value
    region[1:h - 1, x1] = value
    region[1:h - 1, x2] = value
    for y in range(3, h - 3, 4):
        region[y, 0:x1] = value
        region[y, x2:w - 1] = value
        if named:
            region[y - 1, 0:min(4, x1)] = value
            region[y - 1, max(x2, w - 5):w - 1] = value


def _scatter_rects(region: np.ndarray, rng, value: int, count: int) -> None:
    h, w = region.shape
    for _ in range(count):
        rw = int(rng.integers(3, max(4, w // 4)))
        rh = int(rng.integers(3, max(4, h // 4)))
        x = int(rng.integers(0, max(1, w - rw)))
        y = int(rng.integers(0, max(1, h - rh)))
        region[y:y + rh, x:x + rw] = value


def _dotted_curve(region: np.ndarray, rng, value: int) -> None:
    h, w = region.shape
    region[:, 1] = value
    region[h - 2, :] = value
    xs = np.arange(2, w - 1, 3)
    phase = rng.uniform(0, 2 * np.pi)
    ys = np.clip((h / 2 + (h / 3) * np.sin(phase + 4 * np.pi * xs / max(1, w))).astype(int), 1, h - 3)
    region[ys, xs] = value


def _hatch(region: np.ndarray, rng, value: int, step: int) -> None:
    h, w = region.shape
    for d in range(0, h + w, step):
        ys = np.arange(max(0, d - w + 1), min(h, d + 1))
        xs = d - ys
        region[ys, xs] = value


def _paint_region(pixels: np.ndarray, box: Tuple[int, int, int, int], cat: int,
                  rng: np.random.Generator) -> None:
    x, y, w, h = box
    region = pixels[y:y + h, x:x + w]
    name = CATEGORY_NAMES[cat - 1]
    if name == "text":
        _stripes(region, rng, 90, 3, 3)
    elif name == "list":
        _stripes(region, rng, 150, 3, 4, indent=max(4, w // 8), bullets=True)
    elif name == "title":
        region[:, :] = 0
    elif name == "caption":
        region[:, :] = 190
    elif name == "table":
        _grid(region, rng, 40)
    elif name == "characteristic_curve_diagram":
        _curve(region, rng, 20)
    elif name == "timing_diagram":
        _square_wave(region, rng, 20)
    elif name == "functional_block_diagram":
        _blocks_and_links(region, rng, 60, 2, 2)
    elif name == "flowchart":
        _blocks_and_links(region, rng, 60, 3, 1)
    elif name == "circuit_diagram":
        _blocks_and_links(region, rng, 20, 1, 2)
        region[h // 2, :] = 20
    elif name == "pin_diagram":
        _pins(region, rng, 30, named=False)
    elif name == "pin_name_diagram":
        _pins(region, rng, 30, named=True)
    elif name == "engineering_drawing":
        region[0, :] = 50
        region[h - 1, :] = 50
        region[:, 0] = 50
        region[:, w - 1] = 50
        np.fill_diagonal(region[:min(h, w), :min(h, w)], 50)
    elif name == "sampling_diagram":
        _dotted_curve(region, rng, 20)
    elif name == "three_d_schematic_diagram":
        _blocks_and_links(region, rng, 70, 1, 1)
        off = min(h, w) // 4
        region[0:h - off, 0:w - off] = np.minimum(region[0:h - off, 0:w - off], 200)
    elif name == "marking_diagram":
        region[:, :] = 120
        _stripes(region, rng, 230, 2, 4, indent=w // 4)
    elif name == "appearance_diagram":
        region[1:h - 1, 1:w - 1] = 120
    elif name == "functional_register_diagram":
        region[h // 3:2 * h // 3, :] = 255
        _grid(region[h // 3:2 * h // 3 + 1, :], rng, 70)
    elif name == "layout_diagram":
        _scatter_rects(region, rng, 100, 6)
    elif name == "data_structure_diagram":
        _blocks_and_links(region, rng, 110, 2, 3)
    else:  # "other"
        _hatch(region, rng, 80, 4)


# ---------------------------------------------------------------------------
# splits and batches


def split(records: Sequence[PageRecord], fractions: Sequence[float],
          seed: int) -> Tuple[List[PageRecord], ...]:
    """Disjoint, exhaustive, seed-deterministic partition by fractions."""
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be positive and sum to 1, got {fractions}")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    counts = [int(np.floor(f * n)) for f in fractions]
    remainders = [f * n - c for f, c in zip(fractions, counts)]
    for _ in range(n - sum(counts)):
        k = int(np.argmax(remainders))
        counts[k] += 1
        remainders[k] = -1
    out, start = [], 0
    for c in counts:
        out.append([records[i] for i in order[start:start + c]])
        start += c
    return tuple(out)


@dataclass
class Letterbox:
    """Aspect-preserving resize with centered padding onto a fixed frame."""

    scale: float
    pad_x: int
    pad_y: int
    frame_w: int
    frame_h: int

    def apply_box(self, box: Sequence[float]) -> List[float]:
        x, y, w, h = box
        moved = [x * self.scale + self.pad_x, y * self.scale + self.pad_y,
                 w * self.scale, h * self.scale]
        return clip_box(moved, self.frame_w, self.frame_h)

    def invert_box(self, box: Sequence[float]) -> List[float]:
        x, y, w, h = box
        return [(x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale,
                w / self.scale, h / self.scale]


def letterbox_pixels(pixels: np.ndarray, target_hw: Tuple[int, int]) -> Tuple[np.ndarray, Letterbox]:
    """Nearest-neighbour letterbox to target, normalized to [0, 1], white padding."""
    th, tw = target_hw
    h, w = pixels.shape
    scale = min(tw / w, th / h)
    nw = max(1, int(round(w * scale)))
    nh = max(1, int(round(h * scale)))
    xs = np.minimum(((np.arange(nw) + 0.5) / scale).astype(int), w - 1)
    ys = np.minimum(((np.arange(nh) + 0.5) / scale).astype(int), h - 1)
    resized = pixels[np.ix_(ys, xs)]
    frame = np.full((th, tw), 255, dtype=np.uint8)
    pad_x = (tw - nw) // 2
    pad_y = (th - nh) // 2
    frame[pad_y:pad_y + nh, pad_x:pad_x + nw] = resized
    return frame.astype(np.float32) / 255.0, Letterbox(scale, pad_x, pad_y, tw, th)


@dataclass
class Batch:
    images: np.ndarray                     # N x 1 x H x W float32 in [0, 1]
    annotations: List[List[Annotation]]    # boxes in letterboxed frame pixels
    transforms: List[Letterbox]
    records: List[PageRecord]


def batch_iterator(records: Sequence[PageRecord], batch_size: int,
                   target_hw: Tuple[int, int], seed: int, shuffle: bool = True,
                   images_dir=None, total_stride: Optional[int] = None) -> Iterator[Batch]:
    """Seed-deterministic letterboxed batches over one epoch."""
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    th, tw = target_hw
    if total_stride and (th % total_stride or tw % total_stride):
        raise DatasetError(f"target size {target_hw} not a multiple of stride {total_stride}")
    order = (np.random.default_rng(seed).permutation(len(records)) if shuffle
             else np.arange(len(records)))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        images = np.empty((len(chunk), 1, th, tw), dtype=np.float32)
        anns: List[List[Annotation]] = []
        tfs: List[Letterbox] = []
        for k, rec in enumerate(chunk):
            pix = rec.load_pixels(images_dir) if rec.pixels is None else rec.pixels
            img, tf = letterbox_pixels(pix, target_hw)
            images[k, 0] = img
            anns.append([replace(a, bbox=tf.apply_box(a.bbox)) for a in rec.annotations])
            tfs.append(tf)
        yield Batch(images, anns, tfs, chunk)
