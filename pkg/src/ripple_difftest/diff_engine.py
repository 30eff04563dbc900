"""Pixel-level comparison of paired screenshots.

mask -> dilate -> connected components -> merged, indexed bounding boxes.
Boxes are computed on the dilated mask; pixel counts use the pre-dilation mask.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from skimage.measure import label, regionprops
from skimage.morphology import binary_dilation

logger = logging.getLogger(__name__)

ANNOTATION_COLOR = (255, 0, 255)


@dataclass(frozen=True)
class DiffRegion:
    index: int
    bbox: tuple[int, int, int, int]
    pixel_count: int

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "bbox": list(self.bbox), "pixel_count": self.pixel_count}

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> DiffRegion:
        x1, y1, x2, y2 = (int(v) for v in raw["bbox"])
        return cls(index=int(raw["index"]), bbox=(x1, y1, x2, y2), pixel_count=int(raw["pixel_count"]))


@dataclass
class ParsedInfo:
    step_index: int
    regions: list[DiffRegion]
    image_dims: tuple[int, int]
    dimension_mismatch: bool = False
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "image_dims": list(self.image_dims),
            "dimension_mismatch": self.dimension_mismatch,
            "warnings": list(self.warnings),
            "regions": [r.to_dict() for r in self.regions],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ParsedInfo:
        w, h = (int(v) for v in raw["image_dims"])
        return cls(
            step_index=int(raw["step_index"]),
            regions=[DiffRegion.from_dict(r) for r in raw.get("regions", [])],
            image_dims=(w, h),
            dimension_mismatch=bool(raw.get("dimension_mismatch", False)),
            warnings=[str(x) for x in raw.get("warnings", [])],
        )


def load_image(source: str | Path | bytes) -> np.ndarray:
    """Load an image as an HxWx3 uint8 RGB array."""
    if isinstance(source, bytes):
        img = Image.open(io.BytesIO(source))
    else:
        img = Image.open(source)
    return np.asarray(img.convert("RGB"), dtype=np.uint8)


def _as_channels(a: np.ndarray) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.int16)


def diff_mask(a: np.ndarray, b: np.ndarray, threshold: int) -> np.ndarray:
    """mask[p] = max over channels |a[p] - b[p]| > threshold.

    On a size mismatch the overlap is compared and the rest of the enclosing
    canvas is marked fully different.
    """
    aa, bb = _as_channels(a), _as_channels(b)
    if aa.shape[2] != bb.shape[2]:
        raise ValueError(f"channel count differs: {aa.shape[2]} vs {bb.shape[2]}")

    h = min(aa.shape[0], bb.shape[0])
    w = min(aa.shape[1], bb.shape[1])
    height = max(aa.shape[0], bb.shape[0])
    width = max(aa.shape[1], bb.shape[1])

    mask = np.ones((height, width), dtype=bool)
    delta = np.abs(aa[:h, :w] - bb[:h, :w]).max(axis=2)
    mask[:h, :w] = delta > threshold

    if (h, w) != (height, width):
        logger.warning(
            "screenshot size mismatch: %sx%s vs %sx%s; marking the non-overlapping band",
            aa.shape[1],
            aa.shape[0],
            bb.shape[1],
            bb.shape[0],
        )
    return mask


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius < 0:
        raise ValueError("radius must be >= 0")
    m = np.asarray(mask, dtype=bool)
    if radius == 0 or not m.any():
        return m.copy()
    footprint = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return binary_dilation(m, footprint=footprint)


def _overlaps(a: list[int], b: list[int]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _merge_overlapping(boxes: list[list[int]]) -> list[list[int]]:
    # Each box: [x1, y1, x2, y2, pixel_count]; repeat until no pair overlaps.
    merged = [list(b) for b in boxes]
    changed = True
    while changed:
        changed = False
        out: list[list[int]] = []
        for box in merged:
            for other in out:
                if _overlaps(box, other):
                    other[0] = min(other[0], box[0])
                    other[1] = min(other[1], box[1])
                    other[2] = max(other[2], box[2])
                    other[3] = max(other[3], box[3])
                    other[4] += box[4]
                    changed = True
                    break
            else:
                out.append(box)
        merged = out
    return merged


def extract_regions(mask: np.ndarray, counts: np.ndarray | None = None) -> list[DiffRegion]:
    """8-connected components of `mask`, one box each, merged while boxes overlap.

    `counts` is the mask whose set bits are counted per region (the pre-dilation
    mask in the full pipeline); defaults to `mask` itself.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return []
    count_mask = m if counts is None else np.asarray(counts, dtype=bool)

    labels = label(m, connectivity=2)
    boxes: list[list[int]] = []
    for prop in regionprops(labels):
        min_row, min_col, max_row, max_col = prop.bbox
        pixels = int(count_mask[labels == prop.label].sum())
        boxes.append([int(min_col), int(min_row), int(max_col), int(max_row), pixels])

    boxes = _merge_overlapping(boxes)
    boxes.sort(key=lambda b: (b[1], b[0]))
    return [
        DiffRegion(index=i, bbox=(b[0], b[1], b[2], b[3]), pixel_count=b[4]) for i, b in enumerate(boxes)
    ]


def compare(
    a: np.ndarray,
    b: np.ndarray,
    *,
    threshold: int,
    radius: int,
    step_index: int = 0,
) -> ParsedInfo:
    mask = diff_mask(a, b, threshold)
    mismatch = np.asarray(a).shape[:2] != np.asarray(b).shape[:2]
    regions = extract_regions(dilate(mask, radius), counts=mask)
    warnings = ["dimension_mismatch"] if mismatch else []
    return ParsedInfo(
        step_index=step_index,
        regions=regions,
        image_dims=(int(mask.shape[1]), int(mask.shape[0])),
        dimension_mismatch=mismatch,
        warnings=warnings,
    )


def _label_position(
    draw: ImageDraw.ImageDraw,
    text: str,
    font: ImageFont.ImageFont | ImageFont.FreeTypeFont,
    bbox: tuple[int, int, int, int],
    size: tuple[int, int],
) -> tuple[int, int]:
    left, top, right, bottom = draw.textbbox((0, 0), text, font=font)
    tw, th = right - left, bottom - top
    x1, y1, _, _ = bbox
    width, height = size

    x = x1 + 1
    y = y1 - th - 2
    if y < 0:
        y = y1 + 2
    x = max(0, min(x, width - tw))
    y = max(0, min(y, height - th))
    return x - left, y - top


def annotate(image: Image.Image, regions: list[DiffRegion]) -> Image.Image:
    """Copy of `image` with each region outlined and its index drawn beside it."""
    out = image.convert("RGB").copy()
    if not regions:
        return out

    draw = ImageDraw.Draw(out)
    font = ImageFont.load_default()
    for region in regions:
        x1, y1, x2, y2 = region.bbox
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=ANNOTATION_COLOR, width=1)
        text = str(region.index)
        pos = _label_position(draw, text, font, region.bbox, out.size)
        draw.text(pos, text, fill=ANNOTATION_COLOR, font=font)
    return out


def image_to_png(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


def write_comparison(
    pre: str | Path | bytes,
    post: str | Path | bytes,
    out_dir: str | Path,
    *,
    threshold: int,
    radius: int,
    step_index: int = 0,
    stem: str = "step",
) -> ParsedInfo:
    """Compare two screenshots and write `<stem>.json` plus both annotated images."""
    a = load_image(pre)
    b = load_image(post)
    parsed = compare(a, b, threshold=threshold, radius=radius, step_index=step_index)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(parsed.to_json(), encoding="utf-8")
    annotate(Image.fromarray(a), parsed.regions).save(out / f"{stem}_pre.annotated.png")
    annotate(Image.fromarray(b), parsed.regions).save(out / f"{stem}_post.annotated.png")
    return parsed
