"""Deterministic rendering of the two visually prompted images.

`render_s1_overlay` draws every layout box with its index tag so the model can
pick boxes by id; `render_s2_mask` blurs everything outside the selected key
boxes and re-outlines them in red. Both are pure functions of their inputs and
produce byte-identical PNG output across runs:

* strokes are drawn as inward bands of `border_thickness`, so any pixel
  strictly inside a box and at least `border_thickness` from its border is
  never touched;
* index tags use a 5x7 bitmap digit font embedded below (no platform font);
* PNGs are encoded with pinned settings.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageFilter

from .errors import BindingError, ParameterError, ValidationError
from .layout import LayoutSet

PNG_COMPRESS_LEVEL = 6

S1_OVERLAY = "s1_overlay"
S2_MASK = "s2_mask"

ImageLike = Union[Image.Image, bytes, str, Path]

# 5x7 bitmap glyphs for the digits drawn inside index tags.
_DIGITS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}
_GLYPH_W, _GLYPH_H = 5, 7


@dataclass(frozen=True)
class RenderStyle:
    """Visual-prompt styling; None fields resolve to resolution-scaled defaults."""

    border_color: tuple[int, int, int] = (255, 0, 0)
    border_thickness: Optional[int] = None
    label_font_px: Optional[int] = None
    blur_sigma: Optional[float] = None

    def resolved(self, width: int, height: int) -> "ResolvedStyle":
        m = min(width, height)
        thickness = self.border_thickness if self.border_thickness is not None else max(2, round(0.003 * m))
        font_px = self.label_font_px if self.label_font_px is not None else max(12, round(0.02 * m))
        sigma = self.blur_sigma if self.blur_sigma is not None else max(2.0, 0.008 * m)
        return ResolvedStyle(self.border_color, thickness, font_px, sigma)


@dataclass(frozen=True)
class ResolvedStyle:
    border_color: tuple[int, int, int]
    border_thickness: int
    label_font_px: int
    blur_sigma: float

    def __post_init__(self) -> None:
        if self.border_thickness < 1:
            raise ValidationError("border_thickness must be >= 1")
        if self.blur_sigma <= 0:
            raise ValidationError("blur_sigma must be positive")
        if self.label_font_px < 8:
            raise ValidationError("label_font_px must be >= 8")


@dataclass(frozen=True)
class PromptedImage:
    """A rendered visual prompt: either the indexed overlay or the blur mask."""

    role: str
    image_bytes: bytes
    source_image_id: str
    boxes_rendered: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.role not in (S1_OVERLAY, S2_MASK):
            raise ValidationError(f"unknown prompted-image role {self.role!r}")

    def to_pil(self) -> Image.Image:
        return Image.open(io.BytesIO(self.image_bytes)).convert("RGB")


def load_image(image: ImageLike) -> Image.Image:
    """Accept a PIL image, raw PNG/JPEG bytes, or a path; returns RGB."""
    if isinstance(image, Image.Image):
        return image.convert("RGB")
    if isinstance(image, bytes):
        return Image.open(io.BytesIO(image)).convert("RGB")
    return Image.open(Path(image)).convert("RGB")


def encode_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG", compress_level=PNG_COMPRESS_LEVEL)
    return buf.getvalue()


def _check_binding(img: Image.Image, layout: LayoutSet) -> None:
    if img.size != (layout.image_width, layout.image_height):
        raise BindingError(
            f"image is {img.size[0]}x{img.size[1]} but layout {layout.image_id!r} "
            f"is bound to {layout.image_width}x{layout.image_height}"
        )


def _stroke_bands(x: int, y: int, w: int, h: int, t: int) -> list[tuple[int, int, int, int]]:
    """Inward border bands (x0, y0, x1, y1) of thickness t, clipped to the box."""
    t = min(t, w, h)
    return [
        (x, y, x + w, y + t),
        (x, y + h - t, x + w, y + h),
        (x, y, x + t, y + h),
        (x + w - t, y, x + w, y + h),
    ]


def _draw_box_border(arr: np.ndarray, x: int, y: int, w: int, h: int, t: int, color: tuple[int, int, int]) -> None:
    for x0, y0, x1, y1 in _stroke_bands(x, y, w, h, t):
        arr[y0:y1, x0:x1] = color


def tag_geometry(box_x: int, box_y: int, text: str, font_px: int, width: int, height: int) -> tuple[int, int, int, int, int]:
    """Tag rectangle (x0, y0, x1, y1) plus glyph scale, anchored at a box corner.

    The tag extends right/down from the box's top-left corner and is shifted
    back inside the image when it would overflow.
    """
    scale = max(1, font_px // _GLYPH_H)
    pad = scale
    tag_w = 2 * pad + len(text) * _GLYPH_W * scale + (len(text) - 1) * scale
    tag_h = 2 * pad + _GLYPH_H * scale
    x0 = min(box_x, max(0, width - tag_w))
    y0 = min(box_y, max(0, height - tag_h))
    return (x0, y0, min(x0 + tag_w, width), min(y0 + tag_h, height), scale)


def _draw_tag(arr: np.ndarray, box_x: int, box_y: int, text: str, font_px: int,
              bg: tuple[int, int, int], fg: tuple[int, int, int]) -> tuple[int, int, int, int]:
    height, width = arr.shape[:2]
    x0, y0, x1, y1, scale = tag_geometry(box_x, box_y, text, font_px, width, height)
    arr[y0:y1, x0:x1] = bg
    pad = scale
    cx = x0 + pad
    cy = y0 + pad
    for ch in text:
        rows = _DIGITS[ch]
        for r, row in enumerate(rows):
            for c, bit in enumerate(row):
                if bit == "1":
                    px = cx + c * scale
                    py = cy + r * scale
                    arr[py : min(py + scale, height), px : min(px + scale, width)] = fg
        cx += (_GLYPH_W + 1) * scale
    return (x0, y0, x1, y1)


def render_s1_overlay(
    image: ImageLike,
    layout: LayoutSet,
    style: Optional[RenderStyle] = None,
) -> PromptedImage:
    """Draw every layout box outline plus its index tag on the original image."""
    img = load_image(image)
    _check_binding(img, layout)
    rs = (style or RenderStyle()).resolved(*img.size)
    arr = np.asarray(img, dtype=np.uint8).copy()
    white = (255, 255, 255)
    for box in layout.boxes:
        b = box.bbox
        _draw_box_border(arr, b.x, b.y, b.w, b.h, rs.border_thickness, rs.border_color)
        _draw_tag(arr, b.x, b.y, str(box.id), rs.label_font_px, rs.border_color, white)
    return PromptedImage(
        role=S1_OVERLAY,
        image_bytes=encode_png(Image.fromarray(arr)),
        source_image_id=layout.image_id,
        boxes_rendered=layout.ids,
    )


def render_s2_mask(
    image: ImageLike,
    layout: LayoutSet,
    key_ids: Iterable[int],
    style: Optional[RenderStyle] = None,
) -> PromptedImage:
    """Blur everything outside the key boxes, keep them sharp, outline them red.

    Composite order is blur, then paste the original pixels of every key box,
    then strokes, so borders are never blurred and overlapping key boxes
    compose idempotently. No index tags are drawn here.
    """
    ids = sorted(set(key_ids))
    if not ids:
        raise ParameterError("key_ids must be non-empty")
    bad = [i for i in ids if i not in layout.ids]
    if bad:
        raise ParameterError(f"key ids {bad} not in layout 1..{len(layout)}")

    img = load_image(image)
    _check_binding(img, layout)
    rs = (style or RenderStyle()).resolved(*img.size)

    original = np.asarray(img, dtype=np.uint8)
    blurred = np.asarray(img.filter(ImageFilter.GaussianBlur(radius=rs.blur_sigma)), dtype=np.uint8)
    out = blurred.copy()
    for i in ids:
        b = layout.get(i).bbox
        out[b.y : b.bottom, b.x : b.right] = original[b.y : b.bottom, b.x : b.right]
    for i in ids:
        b = layout.get(i).bbox
        _draw_box_border(out, b.x, b.y, b.w, b.h, rs.border_thickness, rs.border_color)

    return PromptedImage(
        role=S2_MASK,
        image_bytes=encode_png(Image.fromarray(out)),
        source_image_id=layout.image_id,
        boxes_rendered=tuple(ids),
    )
