from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from vlmshap.scene import BitMask, ObjectEntity, Scene, bbox_of, encode_rle

WHITE = (255, 255, 255)
GRAY = (128, 128, 128)


def rect_mask(shape: tuple[int, int], x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[y0:y1, x0:x1] = True
    return mask


def build_scene(
    shape: tuple[int, int],
    rects: list[tuple[str, tuple[int, int, int, int], tuple[int, int, int]]],
    prompt: str = "describe the image",
    background: tuple[int, int, int] = WHITE,
    scene_id: str = "fixture",
) -> Scene:
    """Scene of axis-aligned rectangles: (label, (x0, y0, x1, y1), color)."""
    image = np.empty((*shape, 3), dtype=np.uint8)
    image[:] = background
    objects = []
    for i, (label, (x0, y0, x1, y1), color) in enumerate(rects):
        mask = rect_mask(shape, x0, y0, x1, y1)
        image[mask] = color
        bm = BitMask(mask)
        objects.append(ObjectEntity(id=i, label=label, mask=bm, bbox=bbox_of(bm)))
    return Scene(
        image=image, objects=tuple(objects), prompt=prompt, scene_id=scene_id
    )


def scene_doc(scene: Scene, image_name: str) -> dict:
    """Scene JSON document matching a Scene built by build_scene."""
    return {
        "image": image_name,
        "prompt": scene.prompt,
        "objects": [
            {
                "label": obj.label,
                "segmentation": {
                    "type": "rle",
                    "counts": encode_rle(obj.mask),
                    "size": [obj.mask.height, obj.mask.width],
                },
            }
            for obj in scene.objects
        ],
    }


def write_scene_files(scene: Scene, directory: Path, stem: str = "scene") -> Path:
    """Write <stem>.png and <stem>.json; return the scene JSON path."""
    directory.mkdir(parents=True, exist_ok=True)
    image_name = f"{stem}.png"
    Image.fromarray(scene.image).save(directory / image_name)
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(scene_doc(scene, image_name)), encoding="utf-8")
    return path


def write_dataset(directory, scenes_and_targets, name="bench"):
    """Write one benchmark JSONL plus its images; return the JSONL path."""
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (scene, target_id) in enumerate(scenes_and_targets):
        png_name = f"img{i}.png"
        Image.fromarray(scene.image).save(directory / png_name)
        doc = {
            "scene": scene_doc(scene, png_name),
            "question": f"what stands out in picture {i}?",
            "target": {
                "id": target_id,
                "bbox": list(scene.objects[target_id].bbox.as_xywh()),
            },
        }
        lines.append(json.dumps(doc))
    path = directory / f"{name}.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class CountingVlm:
    """Wraps any captioner and counts queries."""

    def __init__(self, inner):
        self.inner = inner
        self.model_id = inner.model_id
        self.calls = 0

    def query(self, png_bytes: bytes, prompt: str) -> str:
        self.calls += 1
        return self.inner.query(png_bytes, prompt)


@pytest.fixture
def three_object_scene() -> Scene:
    return build_scene(
        (16, 16),
        [
            ("red ball", (1, 1, 8, 6), (220, 30, 30)),
            ("dog", (2, 8, 9, 15), (30, 220, 30)),
            ("tiny hat", (11, 2, 14, 4), (30, 30, 220)),
        ],
    )
