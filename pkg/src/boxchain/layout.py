"""Document layout boxes: geometry, reading order, ingestion, OCR clustering.

A page is modeled as an ordered set of rectangular regions ("layout boxes"),
indexed 1..N in reading order. Boxes come either from an external layout
analyzer (via the interchange file format) or from the built-in analyzer that
K-means-clusters OCR token boxes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    LayoutFormatError,
    LayoutRecordError,
    ParameterError,
    ValidationError,
)

CATEGORIES = ("text", "title", "table", "figure", "list", "other")

# Two boxes share a row band when their vertical overlap exceeds this
# fraction of the shorter box's height.
BAND_OVERLAP_FRACTION = 0.5

# Default cluster count = clamp(round(n_tokens / 10), 1, 30).
DEFAULT_TOKENS_PER_CLUSTER = 10
MAX_DEFAULT_CLUSTERS = 30

# Seeded restarts used to make toy-scale K-means land on the global optimum.
KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle in integer pixels, (x, y) is the top-left corner."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"bbox must have positive extent, got {self}")
        if self.x < 0 or self.y < 0:
            raise ValidationError(f"bbox origin must be non-negative, got {self}")

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def intersect_area(self, other: "BBox") -> int:
        iw = min(self.right, other.right) - max(self.x, other.x)
        ih = min(self.bottom, other.bottom) - max(self.y, other.y)
        if iw <= 0 or ih <= 0:
            return 0
        return iw * ih

    def union(self, other: "BBox") -> "BBox":
        x = min(self.x, other.x)
        y = min(self.y, other.y)
        return BBox(x, y, max(self.right, other.right) - x, max(self.bottom, other.bottom) - y)

    def contains(self, other: "BBox") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and self.right >= other.right
            and self.bottom >= other.bottom
        )

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


def clip_bbox(x: int, y: int, w: int, h: int, width: int, height: int) -> Optional[BBox]:
    """Clip a raw rectangle to image bounds; None when nothing remains."""
    x0 = max(x, 0)
    y0 = max(y, 0)
    x1 = min(x + w, width)
    y1 = min(y + h, height)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return BBox(x0, y0, x1 - x0, y1 - y0)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0.0 for disjoint boxes."""
    inter = a.intersect_area(b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class LayoutBox:
    """One indexed layout region. `text` carries OCR content when available."""

    id: int
    bbox: BBox
    category: str = "other"
    text: Optional[str] = None

    def __post_init__(self) -> None:
        if self.id < 1:
            raise ValidationError(f"box id must be >= 1, got {self.id}")
        if self.category not in CATEGORIES:
            raise ValidationError(f"unknown category {self.category!r}")


def _vertical_overlap_fraction(a: BBox, b: BBox) -> float:
    ov = min(a.bottom, b.bottom) - max(a.y, b.y)
    if ov <= 0:
        return 0.0
    return ov / min(a.h, b.h)


def assign_reading_order(boxes: Sequence[LayoutBox]) -> tuple[LayoutBox, ...]:
    """Re-index boxes 1..N in reading order.

    Boxes are grouped into row bands (connected components of the pairwise
    "vertical overlap > 50% of the shorter height" relation). Bands run top to
    bottom; inside a band boxes run left to right, with remaining ties broken
    by (y, x, w, h).
    """
    n = len(boxes)
    if n == 0:
        return ()

    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if _vertical_overlap_fraction(boxes[i].bbox, boxes[j].bbox) > BAND_OVERLAP_FRACTION:
                parent[find(i)] = find(j)

    bands: dict[int, list[LayoutBox]] = {}
    for i, box in enumerate(boxes):
        bands.setdefault(find(i), []).append(box)

    def band_key(members: list[LayoutBox]) -> tuple[int, int]:
        return (min(b.bbox.y for b in members), min(b.bbox.x for b in members))

    def box_key(b: LayoutBox) -> tuple[int, int, int, int]:
        return (b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h)

    ordered: list[LayoutBox] = []
    for members in sorted(bands.values(), key=band_key):
        ordered.extend(sorted(members, key=box_key))

    return tuple(
        LayoutBox(id=i + 1, bbox=b.bbox, category=b.category, text=b.text)
        for i, b in enumerate(ordered)
    )


@dataclass(frozen=True)
class LayoutSet:
    """All layout boxes of one image, ids exactly 1..N in reading order."""

    image_id: str
    image_width: int
    image_height: int
    boxes: tuple[LayoutBox, ...]

    def __post_init__(self) -> None:
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValidationError("image dimensions must be positive")
        ids = [b.id for b in self.boxes]
        if ids != list(range(1, len(ids) + 1)):
            raise ValidationError(f"box ids must be exactly 1..N in order, got {ids}")
        for b in self.boxes:
            if b.bbox.right > self.image_width or b.bbox.bottom > self.image_height:
                raise ValidationError(f"box {b.id} exceeds image bounds")
        reordered = assign_reading_order(self.boxes)
        if tuple(b.bbox for b in reordered) != tuple(b.bbox for b in self.boxes):
            raise ValidationError("boxes are not in reading order")

    @classmethod
    def build(
        cls,
        image_id: str,
        image_width: int,
        image_height: int,
        boxes: Iterable[LayoutBox],
    ) -> "LayoutSet":
        """Construct from boxes in any order; reading order is assigned here."""
        return cls(image_id, image_width, image_height, assign_reading_order(list(boxes)))

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.boxes)

    def get(self, box_id: int) -> LayoutBox:
        if not 1 <= box_id <= len(self.boxes):
            raise ParameterError(f"box id {box_id} not in 1..{len(self.boxes)}")
        return self.boxes[box_id - 1]


@dataclass(frozen=True)
class OcrToken:
    """A single OCR word/fragment with its box and recognition confidence."""

    bbox: BBox
    text: str
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if not self.text:
            raise ValidationError("token text must be non-empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence must be in [0,1], got {self.confidence}")


# ---------------------------------------------------------------------------
# Interchange format: a JSON list of records, one file per image.
# Record fields: bbox [x, y, w, h] (integers), optional category, optional text.
# ---------------------------------------------------------------------------


def _as_int(value: object) -> Optional[int]:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return None


def load_layout(path: str | Path, image_id: str, width: int, height: int) -> LayoutSet:
    """Read an interchange file and bind it to an image.

    Boxes are re-indexed in reading order regardless of source order;
    out-of-bounds boxes are clipped to the image. A record that clips to
    nothing is an error, as is any malformed record.
    """
    if width <= 0 or height <= 0:
        raise ParameterError("image dimensions must be positive")
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise LayoutFormatError(f"{path}: cannot parse layout file: {exc}") from exc
    if not isinstance(payload, list):
        raise LayoutFormatError(f"{path}: expected a list of records")

    boxes = []
    for i, rec in enumerate(payload):
        where = f"{path}: record {i}"
        if not isinstance(rec, dict):
            raise LayoutFormatError(f"{where}: expected an object")
        raw = rec.get("bbox")
        if not isinstance(raw, list) or len(raw) != 4:
            raise LayoutFormatError(f"{where}: bbox must be [x, y, w, h]")
        coords = [_as_int(v) for v in raw]
        if any(c is None for c in coords):
            raise LayoutFormatError(f"{where}: bbox values must be integers, got {raw}")
        x, y, w, h = coords  # type: ignore[misc]
        if w <= 0 or h <= 0:
            raise LayoutRecordError(f"{where}: non-positive extent {raw}")
        bbox = clip_bbox(x, y, w, h, width, height)
        if bbox is None:
            raise LayoutRecordError(f"{where}: box {raw} lies outside the image")
        category = rec.get("category", "other")
        if not isinstance(category, str):
            raise LayoutFormatError(f"{where}: category must be a string")
        if category not in CATEGORIES:
            category = "other"  # tolerate analyzer-specific labels
        text = rec.get("text")
        if text is not None and not isinstance(text, str):
            raise LayoutFormatError(f"{where}: text must be a string")
        boxes.append(LayoutBox(id=i + 1, bbox=bbox, category=category, text=text))

    return LayoutSet.build(image_id, width, height, boxes)


def save_layout(layout: LayoutSet, path: str | Path) -> None:
    """Write the interchange file (records in reading order, ids implicit)."""
    records = []
    for b in layout.boxes:
        rec: dict[str, object] = {"bbox": b.bbox.as_list(), "category": b.category}
        if b.text is not None:
            rec["text"] = b.text
        records.append(rec)
    Path(path).write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Built-in analyzer: K-means over OCR token centers.
# ---------------------------------------------------------------------------


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass collapsed onto existing centers
            centers[c] = points[rng.integers(n)]
        else:
            centers[c] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, float]:
    labels = np.full(points.shape[0], -1, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        dists = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dists, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(centers.shape[0]):
            members = points[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    inertia = float(np.sum((points - centers[labels]) ** 2))
    return labels, inertia


def kmeans_cluster(points: np.ndarray, k: int, seed: int, n_init: int = KMEANS_RESTARTS) -> np.ndarray:
    """Deterministic seeded K-means; returns a label per point.

    Runs `n_init` k-means++ initialized restarts (restart seeds derived from
    `seed`) and keeps the lowest-inertia run, first winner on ties.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ParameterError("points must be a 2-D array")
    if not 1 <= k <= points.shape[0]:
        raise ParameterError(f"k must be in 1..{points.shape[0]}, got {k}")
    best_labels: Optional[np.ndarray] = None
    best_inertia = float("inf")
    for restart in range(n_init):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, restart)))
        centers = _kmeanspp_init(points, k, rng)
        labels, inertia = _lloyd(points, centers)
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    assert best_labels is not None
    return best_labels


def default_cluster_count(n_tokens: int) -> int:
    return max(1, min(MAX_DEFAULT_CLUSTERS, round(n_tokens / DEFAULT_TOKENS_PER_CLUSTER)))


def cluster_ocr_tokens(
    tokens: Sequence[OcrToken],
    image_id: str,
    width: int,
    height: int,
    k: Optional[int] = None,
    seed: int = 0,
) -> LayoutSet:
    """Cluster OCR tokens into layout boxes.

    Token centers are scaled to the unit square by the image dimensions and
    K-means clustered. Each cluster becomes one box: the union of its member
    token boxes, with member texts joined in reading order.
    """
    if not tokens:
        raise ParameterError("at least one token is required")
    if k is None:
        k = default_cluster_count(len(tokens))
    if k > len(tokens):
        raise ParameterError(f"k={k} exceeds the token count {len(tokens)}")

    centers = np.array(
        [
            [
                (t.bbox.x + t.bbox.w / 2.0) / width,
                (t.bbox.y + t.bbox.h / 2.0) / height,
            ]
            for t in tokens
        ],
        dtype=np.float64,
    )
    labels = kmeans_cluster(centers, k, seed)

    boxes = []
    for c in sorted(set(labels.tolist())):
        members = [tokens[i] for i in range(len(tokens)) if labels[i] == c]
        bbox = members[0].bbox
        for m in members[1:]:
            bbox = bbox.union(m.bbox)
        # reading order of the member tokens decides the text joining order
        tmp = [LayoutBox(id=i + 1, bbox=m.bbox, text=m.text) for i, m in enumerate(members)]
        text = " ".join(b.text for b in assign_reading_order(tmp) if b.text)
        boxes.append(LayoutBox(id=len(boxes) + 1, bbox=bbox, category="text", text=text))

    return LayoutSet.build(image_id, width, height, boxes)
