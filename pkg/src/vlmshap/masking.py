"""Perturbed-image construction: hide object coalitions under a fill.

Three occlusion geometries are supported per hidden object:

* ``precise`` paints exactly the object's mask pixels.
* ``bbox`` paints the object's whole bounding box.
* ``bboa`` paints the bounding box but re-reveals pixels owned by objects
  that stay visible, so hiding one object does not clip its neighbors.

All functions are pure over immutable inputs and safe to call from
multiple threads; each call allocates its own output raster.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import InvalidCoalition
from .scene import BitMask, ObjectEntity, Scene

STRATEGY_KINDS = ("precise", "bbox", "bboa")


@dataclass(frozen=True)
class Coalition:
    """The subset of object ids left visible, as a fixed-width bitset."""

    n: int
    bits: int

    def __post_init__(self) -> None:
        if self.n < 0:
            raise InvalidCoalition("coalition width cannot be negative")
        if not 0 <= self.bits < (1 << self.n):
            raise InvalidCoalition(
                f"bitset {self.bits:#x} does not fit {self.n} objects"
            )

    @classmethod
    def full(cls, n: int) -> "Coalition":
        return cls(n, (1 << n) - 1)

    @classmethod
    def empty(cls, n: int) -> "Coalition":
        return cls(n, 0)

    @classmethod
    def of(cls, n: int, ids: Sequence[int]) -> "Coalition":
        bits = 0
        for i in ids:
            if not 0 <= i < n:
                raise InvalidCoalition(f"object id {i} out of range for n={n}")
            bits |= 1 << i
        return cls(n, bits)

    def contains(self, obj_id: int) -> bool:
        return bool(self.bits >> obj_id & 1)

    def ids(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n) if self.bits >> i & 1)

    def hidden_ids(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n) if not self.bits >> i & 1)

    def without(self, obj_id: int) -> "Coalition":
        return Coalition(self.n, self.bits & ~(1 << obj_id))

    @property
    def size(self) -> int:
        return self.bits.bit_count()

    @property
    def is_full(self) -> bool:
        return self.bits == (1 << self.n) - 1

    @property
    def hex_key(self) -> str:
        """Fixed-width hex form of the bitset, used in dump filenames."""
        return format(self.bits, f"0{max(1, (self.n + 3) // 4)}x")

    def __iter__(self) -> Iterator[int]:
        return iter(self.ids())

    def __len__(self) -> int:
        return self.size


@dataclass(frozen=True)
class FillSpec:
    """What color replaces occluded pixels.

    ``solid`` uses a fixed RGB value; ``mean`` uses the per-channel mean of
    the unperturbed image.
    """

    mode: str = "solid"
    color: tuple[int, int, int] = (128, 128, 128)

    def __post_init__(self) -> None:
        if self.mode not in ("solid", "mean"):
            raise ValueError(f"unknown fill mode {self.mode!r}")
        if len(self.color) != 3 or any(not 0 <= c <= 255 for c in self.color):
            raise ValueError(f"fill channels must be in [0, 255]: {self.color}")

    @classmethod
    def solid(cls, r: int, g: int, b: int) -> "FillSpec":
        return cls(mode="solid", color=(r, g, b))

    @classmethod
    def mean(cls) -> "FillSpec":
        return cls(mode="mean")

    def resolve(self, image: np.ndarray) -> np.ndarray:
        if self.mode == "mean":
            return np.round(image.reshape(-1, 3).mean(axis=0)).astype(np.uint8)
        return np.array(self.color, dtype=np.uint8)


@dataclass(frozen=True)
class MaskingStrategy:
    kind: str = "bboa"
    fill: FillSpec = field(default_factory=FillSpec)

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(
                f"masking kind must be one of {STRATEGY_KINDS}, got {self.kind!r}"
            )


def occlusion_region(
    target: ObjectEntity, others: Sequence[ObjectEntity], kind: str
) -> BitMask:
    """Pixels painted over when ``target`` is hidden among visible ``others``.

    For ``bboa`` the target's bounding box is painted except where a visible
    neighbor owns the pixel; shared target pixels stay revealed (the neighbor
    wins). ``others`` must contain only objects that remain visible.
    """
    if kind == "precise":
        return BitMask(target.mask.array.copy())
    box = target.bbox
    region = np.zeros_like(target.mask.array)
    region[box.y_min : box.y_max, box.x_min : box.x_max] = True
    if kind == "bbox":
        return BitMask(region)
    if kind == "bboa":
        if others:
            revealed = reduce(np.logical_or, (o.mask.array for o in others))
            region &= ~revealed
        return BitMask(region)
    raise ValueError(f"unknown masking kind {kind!r}")


def apply_masking(
    scene: Scene, coalition: Coalition, strategy: MaskingStrategy
) -> np.ndarray:
    """Return a copy of the scene image with non-coalition objects occluded.

    The full coalition returns a bit-identical copy of the original. Output
    pixels outside every hidden object's occlusion region are untouched.
    """
    if coalition.n != scene.object_count:
        raise InvalidCoalition(
            f"coalition is over {coalition.n} objects, scene has "
            f"{scene.object_count}"
        )
    out = scene.image.copy()
    if coalition.is_full:
        return out
    visible = [scene.objects[i] for i in coalition.ids()]
    region = np.zeros(scene.image.shape[:2], dtype=bool)
    for obj_id in coalition.hidden_ids():
        target = scene.objects[obj_id]
        region |= occlusion_region(target, visible, strategy.kind).array
    out[region] = strategy.fill.resolve(scene.image)
    return out


def encode_png(raster: np.ndarray) -> bytes:
    """Lossless PNG bytes for an (H, W, 3) uint8 raster; deterministic."""
    buf = io.BytesIO()
    Image.fromarray(raster, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def dump_name(scene: Scene, coalition: Coalition) -> str:
    return f"{scene.scene_id}_{coalition.hex_key}.png"
