"""Scene ingestion: image rasters, labeled object masks, and bounding boxes.

A scene is the unit of attribution: one RGB image, an ordered list of
segmented objects (label + boolean mask + tight bbox), and the text prompt
the model will be asked. Masks arrive as RLE runs, polygons, or bitmap
references and are decoded into row-major boolean rasters.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DimensionMismatch,
    EmptyObjectList,
    MalformedEncoding,
    SchemaError,
)


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box; max edges are exclusive."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box: {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"box extends past the origin: {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def as_xywh(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.width, self.height)

    @classmethod
    def from_xywh(cls, x: int, y: int, w: int, h: int) -> "Box":
        return cls(x, y, x + w, y + h)

    def fits_inside(self, width: int, height: int) -> bool:
        return self.x_max <= width and self.y_max <= height


class BitMask:
    """Row-major boolean raster marking one object's pixels."""

    __slots__ = ("array",)

    def __init__(self, array: np.ndarray):
        arr = np.asarray(array)
        if arr.ndim != 2:
            raise ValueError("mask must be a 2-D raster")
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        self.array = arr

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def count(self) -> int:
        """Number of set pixels."""
        return int(self.array.sum())

    @property
    def is_empty(self) -> bool:
        return not self.array.any()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitMask):
            return NotImplemented
        return self.array.shape == other.array.shape and bool(
            np.array_equal(self.array, other.array)
        )

    def __hash__(self):  # pragma: no cover - masks are not dict keys
        raise TypeError("BitMask is not hashable")

    def __repr__(self) -> str:
        return f"BitMask({self.width}x{self.height}, {self.count} set)"


@dataclass(frozen=True)
class ObjectEntity:
    """One segmented object: stable id, label, mask, and tight bbox."""

    id: int
    label: str
    mask: BitMask
    bbox: Box

    @property
    def area(self) -> int:
        return self.mask.count


@dataclass(frozen=True)
class Scene:
    """An RGB image with its ordered objects and the query prompt.

    Immutable after construction; safe to share across threads.
    """

    image: np.ndarray
    objects: tuple[ObjectEntity, ...]
    prompt: str
    scene_id: str

    def __post_init__(self) -> None:
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValueError("scene image must be an (H, W, 3) uint8 raster")
        if not self.objects:
            raise EmptyObjectList("a scene needs at least one object")
        h, w = img.shape[:2]
        for obj in self.objects:
            if obj.mask.array.shape != (h, w):
                raise DimensionMismatch(
                    f"object {obj.id} mask is {obj.mask.width}x{obj.mask.height}, "
                    f"image is {w}x{h}"
                )
        img.setflags(write=False)

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def object_count(self) -> int:
        return len(self.objects)

    def labels(self) -> tuple[str, ...]:
        return tuple(o.label for o in self.objects)


def decode_mask(
    encoding: Mapping[str, Any],
    width: int,
    height: int,
    base_dir: Path | None = None,
) -> BitMask:
    """Decode a segmentation encoding into a mask of the given dimensions.

    Supported encodings:
      * ``{"type": "rle", "counts": [...]}`` -- run lengths of alternating
        values starting with unset, expanded over the row-major raster.
        An optional ``"size": [height, width]`` is cross-checked.
      * ``{"type": "polygon", "points": [[x, y], ...]}`` -- at least three
        vertices, rasterized by pixel-center containment with the even-odd
        rule.
      * ``{"type": "bitmap", "path": "..."}`` -- a single-channel image
        where nonzero pixels belong to the object; ``base_dir`` anchors
        relative paths.

    Raises MalformedEncoding (or DimensionMismatch) for inconsistent input,
    including an encoding that decodes to a mask with no set pixels.
    """
    if not isinstance(encoding, Mapping) or "type" not in encoding:
        raise MalformedEncoding("segmentation must be an object with a 'type'")
    kind = encoding["type"]
    if kind == "rle":
        mask = _decode_rle(encoding, width, height)
    elif kind == "polygon":
        mask = _decode_polygon(encoding, width, height)
    elif kind == "bitmap":
        mask = _decode_bitmap(encoding, width, height, base_dir)
    else:
        raise MalformedEncoding(f"unknown segmentation type {kind!r}")
    if mask.is_empty:
        raise MalformedEncoding("mask decodes to zero set pixels")
    return mask


def _decode_rle(encoding: Mapping[str, Any], width: int, height: int) -> BitMask:
    counts = encoding.get("counts")
    if not isinstance(counts, Sequence) or isinstance(counts, (str, bytes)):
        raise MalformedEncoding("rle encoding needs a 'counts' list")
    counts = list(counts)
    if any((not isinstance(c, int)) or c < 0 for c in counts):
        raise MalformedEncoding("rle counts must be non-negative integers")
    size = encoding.get("size")
    if size is not None and tuple(size) != (height, width):
        raise DimensionMismatch(
            f"rle declares size {list(size)}, expected [{height}, {width}]"
        )
    if sum(counts) != width * height:
        raise MalformedEncoding(
            f"rle counts sum to {sum(counts)}, expected {width * height}"
        )
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return BitMask(flat.reshape(height, width))


def _decode_polygon(encoding: Mapping[str, Any], width: int, height: int) -> BitMask:
    points = encoding.get("points")
    if not isinstance(points, Sequence) or len(points) < 3:
        raise MalformedEncoding("polygon needs at least 3 vertices")
    try:
        verts = np.asarray(points, dtype=float).reshape(len(points), 2)
    except (TypeError, ValueError) as exc:
        raise MalformedEncoding("polygon points must be [x, y] pairs") from exc
    return BitMask(_rasterize_even_odd(verts, width, height))


def _rasterize_even_odd(verts: np.ndarray, width: int, height: int) -> np.ndarray:
    """Scanline fill: a pixel is set iff its center lies inside (even-odd)."""
    bits = np.zeros((height, width), dtype=bool)
    x1, y1 = verts[:, 0], verts[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    keep = y1 != y2  # horizontal edges never cross a scanline
    x1, y1, x2, y2 = x1[keep], y1[keep], x2[keep], y2[keep]
    if x1.size == 0:
        return bits
    y_lo = np.minimum(y1, y2)
    y_hi = np.maximum(y1, y2)
    for row in range(height):
        yc = row + 0.5
        # half-open [y_lo, y_hi) counts each vertex crossing exactly once
        hit = (y_lo <= yc) & (yc < y_hi)
        if not hit.any():
            continue
        t = (yc - y1[hit]) / (y2[hit] - y1[hit])
        xs = np.sort(x1[hit] + t * (x2[hit] - x1[hit]))
        for lo, hi in zip(xs[0::2], xs[1::2]):
            first = max(0, math.ceil(lo - 0.5))
            last = min(width, math.ceil(hi - 0.5))
            if first < last:
                bits[row, first:last] = True
    return bits


def _decode_bitmap(
    encoding: Mapping[str, Any], width: int, height: int, base_dir: Path | None
) -> BitMask:
    ref = encoding.get("path")
    if not isinstance(ref, str) or not ref:
        raise MalformedEncoding("bitmap encoding needs a 'path'")
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    try:
        with Image.open(path) as img:
            raster = np.asarray(img.convert("L"))
    except (OSError, ValueError) as exc:
        raise MalformedEncoding(f"cannot read bitmap mask {path}: {exc}") from exc
    if raster.shape != (height, width):
        raise DimensionMismatch(
            f"bitmap mask is {raster.shape[1]}x{raster.shape[0]}, "
            f"expected {width}x{height}"
        )
    return BitMask(raster != 0)


def encode_rle(mask: BitMask) -> list[int]:
    """Inverse of the rle decoding: run lengths starting with an unset run."""
    flat = mask.array.ravel()
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:  # runs start with the unset value by convention
        runs.insert(0, 0)
    return [int(r) for r in runs]


def bbox_of(mask: BitMask) -> Box:
    """Tightest box containing every set pixel of a non-empty mask."""
    ys, xs = np.nonzero(mask.array)
    if ys.size == 0:
        raise ValueError("bbox_of requires a non-empty mask")
    return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def load_scene(
    image_bytes: bytes,
    annotation_doc: Mapping[str, Any] | str | bytes,
    base_dir: Path | None = None,
    scene_id: str | None = None,
) -> Scene:
    """Build a validated Scene from encoded image bytes and its annotation.

    The annotation follows the scene JSON schema (see README). Masks are
    decoded at the image's dimensions; bboxes are recomputed from the masks,
    and any annotated bbox is cross-checked against the recomputation within
    one pixel. Object ids follow document order.
    """
    doc = _parse_doc(annotation_doc)
    try:
        with Image.open(io.BytesIO(image_bytes)) as img:
            raster = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise SchemaError(f"image bytes do not decode: {exc}") from exc

    prompt = doc.get("prompt")
    if not isinstance(prompt, str) or not prompt.strip():
        raise SchemaError("scene document needs a non-empty 'prompt'")
    if not isinstance(doc.get("image"), str):
        raise SchemaError("scene document needs an 'image' reference")
    raw_objects = doc.get("objects")
    if not isinstance(raw_objects, list):
        raise SchemaError("scene document needs an 'objects' list")
    if not raw_objects:
        raise EmptyObjectList("scene document declares zero objects")

    height, width = raster.shape[:2]
    objects = []
    for idx, raw in enumerate(raw_objects):
        if not isinstance(raw, Mapping):
            raise SchemaError(f"object {idx} is not an object")
        label = raw.get("label")
        if not isinstance(label, str) or not label.strip():
            raise SchemaError(f"object {idx} needs a non-empty 'label'")
        seg = raw.get("segmentation")
        if not isinstance(seg, Mapping):
            raise SchemaError(f"object {idx} needs a 'segmentation' object")
        mask = decode_mask(seg, width, height, base_dir=base_dir)
        box = bbox_of(mask)
        annotated = raw.get("bbox")
        if annotated is not None:
            _check_annotated_bbox(idx, annotated, box)
        objects.append(ObjectEntity(id=idx, label=label, mask=mask, bbox=box))

    if scene_id is None:
        scene_id = hashlib.sha256(image_bytes).hexdigest()[:12]
    return Scene(image=raster, objects=tuple(objects), prompt=prompt, scene_id=scene_id)


def _parse_doc(annotation_doc: Mapping[str, Any] | str | bytes) -> Mapping[str, Any]:
    if isinstance(annotation_doc, Mapping):
        return annotation_doc
    try:
        doc = json.loads(annotation_doc)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"annotation is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("annotation JSON must be an object")
    return doc


def _check_annotated_bbox(idx: int, annotated: Any, recomputed: Box) -> None:
    # The mask is ground truth; the annotation only has to agree within 1px.
    if (
        not isinstance(annotated, Sequence)
        or len(annotated) != 4
        or any(not isinstance(v, (int, float)) for v in annotated)
    ):
        raise SchemaError(f"object {idx} bbox must be [x, y, w, h]")
    x, y, w, h = annotated
    stated = (x, y, x + w, y + h)
    actual = (recomputed.x_min, recomputed.y_min, recomputed.x_max, recomputed.y_max)
    if any(abs(s - a) > 1 for s, a in zip(stated, actual)):
        raise SchemaError(
            f"object {idx} bbox {list(annotated)} disagrees with its mask "
            f"(tight bounds {list(recomputed.as_xywh())}) by more than 1px"
        )
