"""Visualize attributions by tinting each object's pixels on the image.

Scores are normalized to [0, 1] and mapped through a colormap; objects are
painted in ascending score order so the strongest contributor stays on top
where masks overlap.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw

from .errors import MismatchedResult
from .scene import Scene
from .shapley import AttributionResult


@dataclass(frozen=True)
class OverlaySpec:
    """How to paint: colormap name, blend strength, optional labels."""

    colormap: str = "viridis"
    alpha: float = 0.55
    annotate: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.colormap not in colormaps:
            raise ValueError(f"unknown colormap {self.colormap!r}")


def normalize_scores(phi: tuple[float, ...]) -> tuple[float, ...]:
    """Map scores to colormap positions in [0, 1].

    A lone object sits at the top of the ramp; indistinguishable scores all
    sit at the midpoint so no spurious ordering is painted.
    """
    if len(phi) == 1:
        return (1.0,)
    lo, hi = min(phi), max(phi)
    if hi == lo:
        return tuple(0.5 for _ in phi)
    return tuple((p - lo) / (hi - lo) for p in phi)


def render_overlay(
    scene: Scene, result: AttributionResult, spec: OverlaySpec | None = None
) -> Image.Image:
    """Return the scene image with per-object contribution tints."""
    spec = spec or OverlaySpec()
    if len(result.phi) != len(scene.objects):
        raise MismatchedResult(
            f"result has {len(result.phi)} scores but the scene has "
            f"{len(scene.objects)} objects"
        )
    cmap = colormaps[spec.colormap]
    positions = normalize_scores(result.phi)

    canvas = scene.image.astype(float)
    order = sorted(range(len(scene.objects)), key=lambda i: (positions[i], i))
    for i in order:
        mask = scene.objects[i].mask.array
        color = np.array(cmap(positions[i])[:3]) * 255.0
        canvas[mask] = (1.0 - spec.alpha) * canvas[mask] + spec.alpha * color
    image = Image.fromarray(np.clip(np.round(canvas), 0, 255).astype(np.uint8))

    if spec.annotate:
        draw = ImageDraw.Draw(image)
        for i in order:
            obj = scene.objects[i]
            text = f"{obj.label}: {result.phi[i]:+.3f}"
            x, y = obj.bbox.x_min, max(0, obj.bbox.y_min - 10)
            draw.text((x + 1, y + 1), text, fill=(0, 0, 0))
            draw.text((x, y), text, fill=(255, 255, 255))
    return image


def save_overlay(
    scene: Scene,
    result: AttributionResult,
    path: Path | str,
    spec: OverlaySpec | None = None,
) -> None:
    """Render and write the overlay as a PNG."""
    image = render_overlay(scene, result, spec)
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    Path(path).write_bytes(buffer.getvalue())
