"""End-to-end attribution for one scene.

Builds the coalition evaluation set, renders each perturbed image, fans the
queries out to the captioning model, scores response drift against the
reference answer, and solves for per-object contributions.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

from .gateway import Embedder, VlmClient, value_of
from .masking import Coalition, MaskingStrategy, apply_masking, dump_name, encode_png
from .sampling import SamplingPlan
from .scene import Scene
from .shapley import AttributionResult, ValueTable, rank_objects, solve


def config_fingerprint(
    scene: Scene,
    vlm_model: str,
    embed_model: str,
    strategy: MaskingStrategy,
    plan: SamplingPlan,
) -> str:
    """Stable 16-hex identifier for a run configuration.

    Two runs with the same scene, models, masking, and sampling settings get
    the same fingerprint, so reports can be matched to how they were made.
    """
    doc = {
        "scene": scene.scene_id,
        "objects": len(scene.objects),
        "vlm": vlm_model,
        "embedder": embed_model,
        "masking": {"kind": strategy.kind, "fill": [strategy.fill.mode, list(strategy.fill.color)]},
        "sampling": plan.describe(),
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class PerturbationRecord:
    """One evaluated coalition: what stayed visible, what the model said."""

    coalition: Coalition
    visible: tuple[int, ...]
    response: str
    value: float
    png_name: str
    png_sha256: str

    def to_json_dict(self) -> dict:
        return {
            "coalition": self.coalition.hex_key,
            "visible": list(self.visible),
            "response": self.response,
            "value": self.value,
            "png": self.png_name,
            "png_sha256": self.png_sha256,
        }


@dataclass(frozen=True)
class AttributionRun:
    """Everything produced while attributing one scene."""

    scene: Scene
    result: AttributionResult
    reference_response: str
    records: tuple[PerturbationRecord, ...]


def _collect_responses(
    vlm: VlmClient,
    prompt: str,
    jobs: list[tuple[Coalition, bytes]],
    max_workers: int,
) -> dict[Coalition, str]:
    # Any failed query fails the whole batch; a report with silent gaps
    # would bias the estimator.
    responses: dict[Coalition, str] = {}
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {
            pool.submit(vlm.query, png, prompt): coalition
            for coalition, png in jobs
        }
        try:
            for future in as_completed(futures):
                responses[futures[future]] = future.result()
        except BaseException:
            for future in futures:
                future.cancel()
            raise
    return responses


def attribute_scene(
    scene: Scene,
    vlm: VlmClient,
    embedder: Embedder,
    strategy: MaskingStrategy | None = None,
    plan: SamplingPlan | None = None,
    max_workers: int | None = None,
    dump_dir: Path | str | None = None,
) -> AttributionRun:
    """Attribute the model's response on ``scene`` to its objects.

    The reference response is taken at the full coalition, whose rendered
    image is bit-identical to the original, so the full coalition always
    scores exactly 1.
    """
    strategy = strategy or MaskingStrategy()
    plan = plan or SamplingPlan()
    if max_workers is None:
        max_workers = getattr(getattr(vlm, "config", None), "max_concurrent", 1)

    started = time.perf_counter()
    n = len(scene.objects)
    coalitions = plan.coalitions(n)
    jobs = [
        (coalition, encode_png(apply_masking(scene, coalition, strategy)))
        for coalition in coalitions
    ]

    if dump_dir is not None:
        out = Path(dump_dir)
        out.mkdir(parents=True, exist_ok=True)
        for coalition, png in jobs:
            (out / dump_name(scene, coalition)).write_bytes(png)

    responses = _collect_responses(vlm, scene.prompt, jobs, max_workers)
    reference = responses[Coalition.full(n)]

    # Scoring runs sequentially in plan order so vocabulary-building
    # embedders assign indices the same way on every run.
    table = ValueTable(n)
    records = []
    for coalition, png in jobs:
        response = responses[coalition]
        score = value_of(reference, response, embedder)
        table.set(coalition, score)
        records.append(
            PerturbationRecord(
                coalition=coalition,
                visible=coalition.ids(),
                response=response,
                value=score,
                png_name=dump_name(scene, coalition),
                png_sha256=hashlib.sha256(png).hexdigest(),
            )
        )

    phi, estimator = solve(table)
    elapsed = time.perf_counter() - started
    result = AttributionResult(
        phi=tuple(phi),
        ranking=tuple(rank_objects(phi)),
        estimator=estimator,
        samples_used=len(jobs),
        elapsed_s=elapsed,
        config_fingerprint=config_fingerprint(
            scene, vlm.model_id, embedder.model_id, strategy, plan
        ),
    )
    return AttributionRun(
        scene=scene,
        result=result,
        reference_response=reference,
        records=tuple(records),
    )
