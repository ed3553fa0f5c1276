"""Deterministic synthetic document pages with layout ground truth.

Pages are white squares carrying near-disjoint rectangular objects of
three kinds: tables (bordered grids with row/column rules), figures
(gray blocks with a dark frame), and text (stacks of thin dark lines).
Object coordinates double as tight ground-truth boxes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundingBox, iou
from .matching import GroundTruthObject
from .preprocess import write_image

CLASS_NAMES = ("table", "figure", "text")
PLACEMENT_ATTEMPTS = 1000


@dataclass(frozen=True)
class SceneSpec:
    """Page layout parameters; boxes stay near-disjoint and inside margins."""

    page: int = 256
    min_objects: int = 1
    max_objects: int = 8
    min_size: int = 16
    max_size: int = 64
    seed: int = 0
    margin: int = 2
    max_overlap: float = 0.1

    def validate(self) -> None:
        if self.page < 32:
            raise ValueError("page must be at least 32 px")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.min_size < 8:
            raise ValueError("objects must be at least 8 px to stay non-degenerate")
        if self.max_size > self.page - 2 * self.margin:
            raise ValueError("max_size does not fit inside the margins")


@dataclass
class SynthImage:
    image_id: int
    file_name: str
    pixels: np.ndarray  # uint8 (page, page)
    objects: list[tuple[int, int, int, int, int]]  # (class_id, x, y, w, h) px

    def ground_truths(self) -> list[GroundTruthObject]:
        page_h, page_w = self.pixels.shape
        out = []
        for cls, x, y, w, h in self.objects:
            out.append(
                GroundTruthObject(
                    class_id=cls,
                    box=BoundingBox(
                        (x + w / 2.0) / page_w,
                        (y + h / 2.0) / page_h,
                        w / page_w,
                        h / page_h,
                    ),
                )
            )
        return out


@dataclass
class SynthDataset:
    spec: SceneSpec
    images: list[SynthImage] = field(default_factory=list)
    shortfalls: int = 0  # images that received fewer objects than drawn

    def class_ids(self) -> tuple[int, ...]:
        return tuple(range(len(CLASS_NAMES)))


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _place_boxes(spec: SceneSpec, rng: np.random.Generator):
    wanted = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[tuple[int, int, int, int]] = []
    page = spec.page
    for _ in range(wanted):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            w = int(rng.integers(spec.min_size, spec.max_size + 1))
            h = int(rng.integers(spec.min_size, spec.max_size + 1))
            x = int(rng.integers(spec.margin, page - spec.margin - w + 1))
            y = int(rng.integers(spec.margin, page - spec.margin - h + 1))
            candidate = BoundingBox(
                (x + w / 2) / page, (y + h / 2) / page, w / page, h / page
            )
            ok = all(
                iou(candidate, BoundingBox((px + pw / 2) / page, (py + ph / 2) / page, pw / page, ph / page))
                < spec.max_overlap
                for px, py, pw, ph in placed
            )
            if ok:
                placed.append((x, y, w, h))
                break
        else:
            return placed, wanted
    return placed, wanted


def _render_table(canvas, x, y, w, h, rng):
    ink = int(rng.integers(0, 50))
    canvas[y : y + h, x : x + w] = 255
    t = 2  # border thickness
    canvas[y : y + t, x : x + w] = ink
    canvas[y + h - t : y + h, x : x + w] = ink
    canvas[y : y + h, x : x + t] = ink
    canvas[y : y + h, x + w - t : x + w] = ink
    rows = int(rng.integers(2, 6))
    cols = int(rng.integers(2, 5))
    for r in range(1, rows):
        yy = y + r * h // rows
        canvas[yy : yy + 1, x : x + w] = ink
    for c in range(1, cols):
        xx = x + c * w // cols
        canvas[y : y + h, xx : xx + 1] = ink


def _render_figure(canvas, x, y, w, h, rng):
    fill = int(rng.integers(110, 180))
    frame = int(rng.integers(20, 60))
    canvas[y : y + h, x : x + w] = fill
    canvas[y : y + 2, x : x + w] = frame
    canvas[y + h - 2 : y + h, x : x + w] = frame
    canvas[y : y + h, x : x + 2] = frame
    canvas[y : y + h, x + w - 2 : x + w] = frame


def _render_text(canvas, x, y, w, h, rng):
    ink = int(rng.integers(10, 80))
    line = 2
    gap = int(rng.integers(3, 6))
    yy = y
    first = True
    while yy + line <= y + h:
        # ragged right edge except on the first line, which spans the box
        width = w if first else int(rng.integers(max(4, int(w * 0.6)), w + 1))
        canvas[yy : yy + line, x : x + width] = ink
        yy += line + gap
        first = False
    # make sure the box bottom carries ink so the ground truth stays tight
    canvas[y + h - line : y + h, x : x + w] = ink


_RENDERERS = (_render_table, _render_figure, _render_text)


def generate(spec: SceneSpec, count: int) -> SynthDataset:
    """Generate count pages; identical spec and count reproduce bit-exactly."""
    spec.validate()
    dataset = SynthDataset(spec=spec)
    for i in range(count):
        rng = _image_rng(spec.seed, i)
        boxes, wanted = _place_boxes(spec, rng)
        if len(boxes) < wanted:
            dataset.shortfalls += 1
        canvas = np.full((spec.page, spec.page), 255, dtype=np.uint8)
        objects = []
        for x, y, w, h in boxes:
            cls = int(rng.integers(0, len(CLASS_NAMES)))
            _RENDERERS[cls](canvas, x, y, w, h, rng)
            objects.append((cls, x, y, w, h))
        dataset.images.append(
            SynthImage(
                image_id=i + 1,
                file_name=f"img_{i + 1:06d}.png",
                pixels=canvas,
                objects=objects,
            )
        )
    return dataset


def export_coco(dataset: SynthDataset, out_dir: str) -> str:
    """Write images/ and annotations.json; returns the annotation path."""
    if not dataset.images:
        raise ValueError("refusing to export an empty dataset")
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    images = []
    annotations = []
    ann_id = 1
    for img in dataset.images:
        h, w = img.pixels.shape
        images.append(
            {"id": img.image_id, "file_name": f"images/{img.file_name}", "width": w, "height": h}
        )
        write_image(os.path.join(image_dir, img.file_name), img.pixels)
        for cls, x, y, bw, bh in img.objects:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": img.image_id,
                    "category_id": cls + 1,
                    "bbox": [x, y, bw, bh],
                    "area": bw * bh,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": i + 1, "name": name} for i, name in enumerate(CLASS_NAMES)
        ],
    }
    path = os.path.join(out_dir, "annotations.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
    os.replace(tmp, path)
    return path
