"""Benchmark harness: load a labeled dataset, attribute every entry, and
score rankings against annotated targets.

Each dataset entry names one target object the question is about; a method
is judged by how often that target tops its ranking (Recall@K), how well
the top pick's box overlaps the annotation (IoU@1), how much the response
drifts when the top pick is hidden (similarity drop), and what the ranking
cost to produce. Two geometry-only baselines rank without any model calls;
their single gateway use is the masked query behind the drop metric.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .errors import SchemaError, VlmShapError
from .gateway import Embedder, VlmClient, value_of
from .masking import Coalition, MaskingStrategy, apply_masking, encode_png
from .pipeline import AttributionRun, attribute_scene
from .sampling import SamplingPlan
from .scene import Box, Scene, load_scene

METHOD_SHAPLEY = "shapley"
METHOD_LARGEST = "baseline-largest"
METHOD_CENTRAL = "baseline-central"
ALL_METHODS = (METHOD_SHAPLEY, METHOD_LARGEST, METHOD_CENTRAL)

RECALL_KS = (1, 2, 3)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalEntry:
    """One labeled example: a scene, a question, and the object it is about."""

    scene: Scene
    target_id: int
    target_box: Box
    source_line: int


def load_dataset(path: Path | str) -> list[EvalEntry]:
    """Parse a JSONL benchmark file.

    Every line holds a scene document, a question (which becomes the scene
    prompt), and a target annotation. Image and bitmap paths are resolved
    relative to the dataset file. Malformed lines fail with the line number.
    """
    path = Path(path)
    base_dir = path.parent
    entries: list[EvalEntry] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path.name} line {lineno}: invalid JSON: {exc}") from exc
        entries.append(_parse_entry(doc, base_dir, path.stem, lineno))
    if not entries:
        raise SchemaError(f"{path.name}: dataset has no entries")
    return entries


def _parse_entry(doc, base_dir: Path, stem: str, lineno: int) -> EvalEntry:
    where = f"{stem} line {lineno}"
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: entry must be an object")
    scene_doc = doc.get("scene")
    if not isinstance(scene_doc, dict):
        raise SchemaError(f"{where}: missing scene object")
    question = doc.get("question")
    if not isinstance(question, str) or not question.strip():
        raise SchemaError(f"{where}: missing question")
    target = doc.get("target")
    if not isinstance(target, dict):
        raise SchemaError(f"{where}: missing target object")

    scene_doc = dict(scene_doc)
    scene_doc["prompt"] = question
    image_rel = scene_doc.get("image")
    if not isinstance(image_rel, str):
        raise SchemaError(f"{where}: scene is missing an image path")
    image_path = base_dir / image_rel
    if not image_path.is_file():
        raise SchemaError(f"{where}: image not found: {image_path}")
    try:
        scene = load_scene(
            image_path.read_bytes(),
            scene_doc,
            base_dir=base_dir,
            scene_id=f"{stem}-{lineno:03d}",
        )
    except SchemaError as exc:
        raise SchemaError(f"{where}: {exc}") from exc

    target_id = target.get("id")
    if not isinstance(target_id, int) or isinstance(target_id, bool):
        raise SchemaError(f"{where}: target id must be an integer")
    if not 0 <= target_id < len(scene.objects):
        raise SchemaError(
            f"{where}: target id {target_id} out of range for "
            f"{len(scene.objects)} objects"
        )
    bbox = target.get("bbox")
    if not (isinstance(bbox, list) and len(bbox) == 4):
        raise SchemaError(f"{where}: target bbox must be [x, y, w, h]")
    try:
        target_box = Box.from_xywh(*bbox)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: bad target bbox: {exc}") from exc
    h, w = scene.image.shape[:2]
    if not target_box.fits_inside(w, h):
        raise SchemaError(f"{where}: target bbox exceeds the image")
    return EvalEntry(
        scene=scene, target_id=target_id, target_box=target_box, source_line=lineno
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area of two pixel boxes."""
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def recall_at_k(ranking: Sequence[int], target_id: int, k: int) -> int:
    """1 if the target appears among the ranking's first k entries, else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if target_id not in ranking:
        raise ValueError(f"target {target_id} is not a ranked object")
    return int(target_id in list(ranking)[:k])


def similarity_drop(
    reference_response: str, perturbed_response: str, embedder: Embedder
) -> float:
    """Response drift when an object is hidden: 100 x (1 - similarity)."""
    return 100.0 * (1.0 - value_of(reference_response, perturbed_response, embedder))


@dataclass(frozen=True)
class Aggregate:
    """Sample mean with its standard error (stddev / sqrt(n))."""

    mean: float
    se: float

    @classmethod
    def of(cls, samples: Sequence[float]) -> "Aggregate":
        if not samples:
            raise ValueError("cannot aggregate zero samples")
        n = len(samples)
        mean = math.fsum(samples) / n
        if n < 2:
            return cls(mean=mean, se=0.0)
        var = math.fsum((x - mean) ** 2 for x in samples) / (n - 1)
        return cls(mean=mean, se=math.sqrt(var) / math.sqrt(n))

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.se:.2f}"

    def to_json_dict(self) -> dict:
        return {"mean": self.mean, "se": self.se}


# ---------------------------------------------------------------------------
# Geometry-only baselines
# ---------------------------------------------------------------------------


def baseline_largest(scene: Scene) -> tuple[int, ...]:
    """Rank objects by bounding-box area, biggest first; ties to lowest id.

    Pure geometry, no model access; the first entry is the baseline's pick.
    """
    order = sorted(scene.objects, key=lambda o: (-o.bbox.area, o.id))
    return tuple(o.id for o in order)


def baseline_central(scene: Scene) -> tuple[int, ...]:
    """Rank objects by box-center distance to the image center, nearest
    first; ties to lowest id. Pure geometry, no model access."""
    h, w = scene.image.shape[:2]
    cx, cy = w / 2.0, h / 2.0

    def distance(obj) -> float:
        ox, oy = obj.bbox.center
        return math.hypot(ox - cx, oy - cy)

    order = sorted(scene.objects, key=lambda o: (distance(o), o.id))
    return tuple(o.id for o in order)


BASELINE_RANKERS: dict[str, Callable[[Scene], tuple[int, ...]]] = {
    METHOD_LARGEST: baseline_largest,
    METHOD_CENTRAL: baseline_central,
}

# Display names matching the summary table's Model / Masking columns.
_BASELINE_MODEL_NAME = {METHOD_LARGEST: "largest", METHOD_CENTRAL: "central"}


# ---------------------------------------------------------------------------
# Evaluation driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    """Aggregated scores for one (method, masking) combination.

    Percentages for IoU and recall; recall is non-decreasing in k.
    """

    model: str
    masking: str
    method: str
    n_entries: int
    comp_time: Aggregate
    sim_drop: Aggregate
    iou_at_1: Aggregate
    recall: dict[int, Aggregate]

    def __post_init__(self) -> None:
        means = [self.recall[k].mean for k in sorted(self.recall)]
        if any(b < a - 1e-9 for a, b in zip(means, means[1:])):
            raise ValueError("recall must be non-decreasing in k")
        for value in means + [self.iou_at_1.mean]:
            if not 0.0 <= value <= 100.0:
                raise ValueError("percentages must lie in [0, 100]")

    def to_json_dict(self) -> dict:
        return {
            "model": self.model,
            "masking": self.masking,
            "method": self.method,
            "entries": self.n_entries,
            "comp_time": self.comp_time.to_json_dict(),
            "sim_drop": self.sim_drop.to_json_dict(),
            "iou_at_1": self.iou_at_1.to_json_dict(),
            "recall": {str(k): v.to_json_dict() for k, v in sorted(self.recall.items())},
        }


@dataclass
class EvalOutcome:
    """Everything an evaluation run produced."""

    rows: list[MetricsRow]
    trace: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)


def _top1_value(run: AttributionRun) -> float:
    """Coalition value with only the top-ranked object hidden."""
    n = len(run.scene.objects)
    wanted = Coalition.full(n).without(run.result.ranking[0])
    for record in run.records:
        if record.coalition == wanted:
            return record.value
    raise VlmShapError("evaluation set lacks the leave-top-out coalition")


def run_evaluation(
    entries: Sequence[EvalEntry],
    vlm_factory: Callable[[Scene], VlmClient],
    embedder: Embedder,
    strategy: MaskingStrategy | None = None,
    plan: SamplingPlan | None = None,
    methods: Sequence[str] = ALL_METHODS,
    max_workers: int | None = None,
    skip_failures: bool = False,
    zero_elapsed: bool = False,
) -> EvalOutcome:
    """Score every requested method on every dataset entry.

    Attribution runs once per entry and is shared by the ranking metrics.
    Baseline rankings come from geometry alone and their ranking cost is
    identically zero; each baseline's only model use is the single masked
    query behind its drop metric (plus a shared reference query when no
    attribution ran). With ``skip_failures`` an entry whose attribution
    fails is dropped from all methods and recorded, instead of aborting.
    """
    strategy = strategy or MaskingStrategy()
    plan = plan or SamplingPlan()
    unknown = [m for m in methods if m != METHOD_SHAPLEY and m not in BASELINE_RANKERS]
    if unknown:
        raise ValueError(f"unknown methods: {unknown}")
    if not methods:
        raise ValueError("no methods requested")
    if not entries:
        raise ValueError("no entries to evaluate")

    outcome = EvalOutcome(rows=[])
    per_method: dict[str, dict[str, list]] = {
        m: {"hits": {k: [] for k in RECALL_KS}, "iou": [], "drop": [], "time": []}
        for m in methods
    }
    model_name = ""

    for entry in entries:
        scene = entry.scene
        vlm = vlm_factory(scene)
        model_name = vlm.model_id
        n = len(scene.objects)
        run: AttributionRun | None = None
        if METHOD_SHAPLEY in methods:
            try:
                run = attribute_scene(
                    scene, vlm, embedder, strategy, plan, max_workers=max_workers
                )
            except VlmShapError as exc:
                if not skip_failures:
                    raise
                outcome.skipped.append({"line": entry.source_line, "error": str(exc)})
                continue

        reference: str | None = run.reference_response if run else None

        for method in methods:
            if method == METHOD_SHAPLEY:
                assert run is not None
                ranking = run.result.ranking
                elapsed = 0.0 if zero_elapsed else run.result.elapsed_s
                drop = 100.0 * (1.0 - _top1_value(run))
                phi = list(run.result.phi)
            else:
                ranking = BASELINE_RANKERS[method](scene)
                elapsed = 0.0  # geometry only; ranking makes no model calls
                if reference is None:
                    reference = vlm.query(
                        encode_png(apply_masking(scene, Coalition.full(n), strategy)),
                        scene.prompt,
                    )
                masked = vlm.query(
                    encode_png(
                        apply_masking(
                            scene, Coalition.full(n).without(ranking[0]), strategy
                        )
                    ),
                    scene.prompt,
                )
                drop = similarity_drop(reference, masked, embedder)
                phi = None

            top_box = scene.objects[ranking[0]].bbox
            overlap = iou(top_box, entry.target_box)
            bucket = per_method[method]
            for k in RECALL_KS:
                bucket["hits"][k].append(float(recall_at_k(ranking, entry.target_id, k)))
            bucket["iou"].append(overlap)
            bucket["drop"].append(drop)
            bucket["time"].append(elapsed)
            outcome.trace.append(
                {
                    "line": entry.source_line,
                    "scene": scene.scene_id,
                    "method": method,
                    "masking": strategy.kind,
                    "ranking": list(ranking),
                    "phi": phi,
                    "target": entry.target_id,
                    "hit_at_1": ranking[0] == entry.target_id,
                    "iou_at_1": overlap,
                    "sim_drop": drop,
                    "elapsed_s": elapsed,
                }
            )

    for method in methods:
        bucket = per_method[method]
        if not bucket["iou"]:
            raise VlmShapError(f"every entry failed; nothing to score for {method}")
        if method == METHOD_SHAPLEY:
            model, masking = model_name, strategy.kind
        else:
            model, masking = _BASELINE_MODEL_NAME[method], "baseline"
        outcome.rows.append(
            MetricsRow(
                model=model,
                masking=masking,
                method=method,
                n_entries=len(bucket["iou"]),
                comp_time=Aggregate.of(bucket["time"]),
                sim_drop=Aggregate.of(bucket["drop"]),
                iou_at_1=Aggregate.of([100.0 * x for x in bucket["iou"]]),
                recall={
                    k: Aggregate.of([100.0 * h for h in bucket["hits"][k]])
                    for k in RECALL_KS
                },
            )
        )
    return outcome


def format_summary_table(rows: Sequence[MetricsRow]) -> str:
    """Fixed-width text table, one row per (method, masking) combination."""
    headers = (
        "Model",
        "Masking",
        "Comp. Time (s)",
        "Sim. Drop",
        "IoU@1 (%)",
        "Recall@1 (%)",
        "Recall@2 (%)",
        "Recall@3 (%)",
    )
    body = [
        (
            row.model,
            row.masking,
            str(row.comp_time),
            str(row.sim_drop),
            str(row.iou_at_1),
            str(row.recall[1]),
            str(row.recall[2]),
            str(row.recall[3]),
        )
        for row in rows
    ]
    widths = [
        max(len(headers[i]), *(len(line[i]) for line in body)) if body else len(headers[i])
        for i in range(len(headers))
    ]
    render = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [render(headers), render(tuple("-" * w for w in widths))]
    lines.extend(render(line) for line in body)
    return "\n".join(lines)
