"""Command-line front end.

Three subcommands: ``attribute`` scores one scene and writes a report plus
an overlay, ``evaluate`` scores ranking methods on a labeled dataset and
writes summary tables, ``render`` paints an existing report back onto its
image. Exit codes: 0 success, 2 configuration problem, 3 model endpoint
failure, 4 malformed input data.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from pathlib import Path

from .errors import (
    AuthError,
    MismatchedResult,
    ModelRefusal,
    RateLimited,
    SchemaError,
    TooManyObjects,
    TransportError,
    VlmShapError,
)
from .evaluation import (
    ALL_METHODS,
    BASELINE_RANKERS,
    METHOD_SHAPLEY,
    EvalOutcome,
    format_summary_table,
    load_dataset,
    run_evaluation,
)
from .gateway import (
    EmbedEndpointConfig,
    HttpEmbedder,
    HttpVlm,
    MockEmbedder,
    MockVlm,
    ResponseCache,
    VlmEndpointConfig,
)
from .masking import STRATEGY_KINDS, FillSpec, MaskingStrategy
from .overlay import OverlaySpec, save_overlay
from .pipeline import attribute_scene
from .sampling import DEFAULT_EXACT_THRESHOLD, SamplingPlan
from .scene import Scene, load_scene
from .shapley import AttributionResult

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GATEWAY = 3
EXIT_SCHEMA = 4

SAMPLING_MODES = ("exact", "first-order", "mc")

_CONFIG_KEYS = {
    "vlm",
    "embedder",
    "cache_dir",
    "masking",
    "fill",
    "sampling",
    "mc_budget",
    "seed",
    "exact_threshold",
    "max_workers",
}


class ConfigError(Exception):
    """A problem with flags, the config file, or the environment."""


# ---------------------------------------------------------------------------
# Configuration assembly
# ---------------------------------------------------------------------------


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"config file not found: {file}")
    try:
        doc = json.loads(file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _pick(flag_value, config: dict, key: str, default):
    # Precedence: explicit flag, then config file, then built-in default.
    if flag_value is not None:
        return flag_value
    return config.get(key, default)


def _parse_fill(args, config: dict) -> FillSpec:
    fill_doc = config.get("fill", {})
    if not isinstance(fill_doc, dict):
        raise ConfigError("config 'fill' must be an object")
    mode = _pick(args.fill_mode, fill_doc, "mode", "solid")
    color = fill_doc.get("color", (128, 128, 128))
    if args.fill_color is not None:
        parts = args.fill_color.split(",")
        if len(parts) != 3:
            raise ConfigError("--fill-color needs three comma-separated values")
        try:
            color = tuple(int(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"bad --fill-color: {exc}") from exc
    try:
        return FillSpec(mode=mode, color=tuple(color))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad fill settings: {exc}") from exc


def _build_strategy(kind, args, config: dict) -> MaskingStrategy:
    try:
        return MaskingStrategy(kind=kind, fill=_parse_fill(args, config))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _build_plan(args, config: dict) -> SamplingPlan:
    mode = _pick(args.sampling, config, "sampling", "first-order")
    if mode not in SAMPLING_MODES:
        raise ConfigError(f"sampling must be one of {SAMPLING_MODES}, got {mode!r}")
    budget = _pick(args.mc_budget, config, "mc_budget", None)
    seed = _pick(args.seed, config, "seed", 0)
    threshold = config.get("exact_threshold", DEFAULT_EXACT_THRESHOLD)
    try:
        return SamplingPlan(
            mode=mode, budget=budget, seed=seed, exact_threshold=threshold
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _endpoint_config(doc, cls, label: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"config must define a {label!r} endpoint object for live runs")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {label} endpoint config: {exc}") from exc


def _require_auth(config) -> None:
    # A token variable that is named but absent is a setup problem, caught
    # before any request goes out.
    if config.auth_env and not os.environ.get(config.auth_env):
        raise ConfigError(f"auth env var {config.auth_env} is not set")


def _build_gateways(args, config: dict):
    """Return (vlm_factory, embedder). Mock mode needs no endpoint config."""
    if args.mock:
        return (lambda sc: MockVlm(sc)), MockEmbedder()
    vlm_config = _endpoint_config(config.get("vlm"), VlmEndpointConfig, "vlm")
    embed_config = _endpoint_config(
        config.get("embedder"), EmbedEndpointConfig, "embedder"
    )
    _require_auth(vlm_config)
    _require_auth(embed_config)
    cache = None
    if not args.no_cache:
        cache = ResponseCache(_pick(args.cache_dir, config, "cache_dir", "cache"))
    vlm = HttpVlm(vlm_config, cache=cache)
    embedder = HttpEmbedder(embed_config, cache=cache)
    return (lambda sc: vlm), embedder


def _load_scene_file(path_arg: str) -> Scene:
    """Read a scene document; its image path is resolved next to it."""
    scene_path = Path(path_arg)
    if not scene_path.is_file():
        raise ConfigError(f"scene file not found: {scene_path}")
    try:
        doc = json.loads(scene_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{scene_path.name}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{scene_path.name}: scene must be a JSON object")
    image_rel = doc.get("image")
    if not isinstance(image_rel, str):
        raise SchemaError(f"{scene_path.name}: missing image path")
    image_path = scene_path.parent / image_rel
    if not image_path.is_file():
        raise ConfigError(f"image not found: {image_path}")
    return load_scene(image_path.read_bytes(), doc, base_dir=scene_path.parent)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _baseline_report(scene: Scene, method: str) -> AttributionResult:
    """Geometry-only report: scores are the quantity the baseline ranks by."""
    h, w = scene.image.shape[:2]
    if method == "baseline-largest":
        scores = [float(o.bbox.area) for o in scene.objects]
    else:
        cx, cy = w / 2.0, h / 2.0
        scores = [
            -math.hypot(o.bbox.center[0] - cx, o.bbox.center[1] - cy)
            for o in scene.objects
        ]
    ranking = BASELINE_RANKERS[method](scene)
    blob = json.dumps(
        {"scene": scene.scene_id, "method": method, "objects": len(scene.objects)},
        sort_keys=True,
    )
    return AttributionResult(
        phi=tuple(scores),
        ranking=ranking,
        estimator=method,
        samples_used=0,
        elapsed_s=0.0,
        config_fingerprint=hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16],
    )


def _write_report(result: AttributionResult, out: str) -> None:
    text = json.dumps(result.to_json_dict(), indent=2, sort_keys=True) + "\n"
    Path(out).write_text(text, encoding="utf-8")


def _cmd_attribute(args) -> int:
    config = _load_config_file(args.config)
    scene = _load_scene_file(args.scene)
    strategy = _build_strategy(
        _pick(args.masking, config, "masking", "bboa"), args, config
    )
    plan = _build_plan(args, config)

    if args.method in BASELINE_RANKERS:
        result = _baseline_report(scene, args.method)
    else:
        vlm_factory, embedder = _build_gateways(args, config)
        max_workers = _pick(args.max_workers, config, "max_workers", None)
        run = attribute_scene(
            scene,
            vlm_factory(scene),
            embedder,
            strategy,
            plan,
            max_workers=max_workers,
            dump_dir=args.dump_perturbations,
        )
        result = run.result
        if args.mock:
            # Offline runs must be reproducible byte for byte; wall time is
            # the one field that never is.
            result = dataclasses.replace(result, elapsed_s=0.0)
        else:
            print(f"attributed in {result.elapsed_s:.2f}s", file=sys.stderr)

    _write_report(result, args.out)
    save_overlay(scene, result, args.overlay)
    print(f"wrote {args.out} and {args.overlay}", file=sys.stderr)
    return EXIT_OK


def _split_csv(values: list[str] | None, fallback: tuple[str, ...]) -> tuple[str, ...]:
    if not values:
        return fallback
    out: list[str] = []
    for value in values:
        out.extend(v.strip() for v in value.split(",") if v.strip())
    return tuple(dict.fromkeys(out))  # de-dup, keep order


def _cmd_evaluate(args) -> int:
    config = _load_config_file(args.config)
    plan = _build_plan(args, config)
    methods = _split_csv(args.method, ALL_METHODS)
    unknown = [m for m in methods if m not in ALL_METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; choose from {list(ALL_METHODS)}")
    default_masking = (_pick(None, config, "masking", "bboa"),)
    maskings = _split_csv(args.masking, default_masking)
    unknown = [m for m in maskings if m not in STRATEGY_KINDS]
    if unknown:
        raise ConfigError(
            f"unknown masking strategies {unknown}; choose from {list(STRATEGY_KINDS)}"
        )

    dataset_path = Path(args.dataset)
    if not dataset_path.is_file():
        raise ConfigError(f"dataset not found: {dataset_path}")
    entries = load_dataset(dataset_path)

    vlm_factory, embedder = _build_gateways(args, config)
    max_workers = _pick(args.max_workers, config, "max_workers", None)

    # Ranking baselines do not depend on the masking strategy; score them
    # once, alongside the first strategy.
    combined = EvalOutcome(rows=[])
    for index, kind in enumerate(maskings):
        strategy = _build_strategy(kind, args, config)
        round_methods = tuple(
            m for m in methods if index == 0 or m == METHOD_SHAPLEY
        )
        if not round_methods:
            continue
        outcome = run_evaluation(
            entries,
            vlm_factory,
            embedder,
            strategy,
            plan,
            methods=round_methods,
            max_workers=max_workers,
            skip_failures=args.skip_failures,
            zero_elapsed=args.mock,
        )
        combined.rows.extend(outcome.rows)
        combined.trace.extend(outcome.trace)
        combined.skipped.extend(outcome.skipped)

    # Stable presentation: attribution rows first, then the baselines.
    combined.rows.sort(key=lambda r: (r.method != METHOD_SHAPLEY, r.method))

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "dataset": dataset_path.name,
        "entries": len(entries),
        "skipped": combined.skipped,
        "sampling": plan.describe(),
        "rows": [row.to_json_dict() for row in combined.rows],
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    with (out_dir / "trace.jsonl").open("w", encoding="utf-8") as sink:
        for record in combined.trace:
            sink.write(json.dumps(record, sort_keys=True) + "\n")
    table = format_summary_table(combined.rows)
    (out_dir / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def _cmd_render(args) -> int:
    scene = _load_scene_file(args.scene)
    report_path = Path(args.report)
    if not report_path.is_file():
        raise ConfigError(f"report not found: {report_path}")
    try:
        doc = json.loads(report_path.read_text(encoding="utf-8"))
        result = AttributionResult.from_json_dict(doc)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad report file: {exc}") from exc
    try:
        spec = OverlaySpec(
            colormap=args.colormap, alpha=args.alpha, annotate=not args.no_annotate
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save_overlay(scene, result, args.out, spec)
    print(f"wrote {args.out}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def _add_shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--fill-mode", choices=("solid", "mean"))
    parser.add_argument("--fill-color", help="fill color as R,G,B")
    parser.add_argument("--sampling", choices=SAMPLING_MODES)
    parser.add_argument("--mc-budget", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--mock", action="store_true", help="use offline oracles")
    parser.add_argument("--cache-dir")
    parser.add_argument("--no-cache", action="store_true")
    parser.add_argument("--max-workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlmshap",
        description="Attribute a vision-language model's response to the "
        "segmented objects in its input image.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    attribute = commands.add_parser(
        "attribute", help="score one scene; write a report and an overlay"
    )
    attribute.add_argument("--scene", required=True, help="scene JSON file")
    attribute.add_argument("--out", default="report.json", help="report path")
    attribute.add_argument("--overlay", default="overlay.png", help="overlay path")
    attribute.add_argument("--method", choices=ALL_METHODS, default=METHOD_SHAPLEY)
    attribute.add_argument("--masking", choices=STRATEGY_KINDS)
    attribute.add_argument(
        "--dump-perturbations", metavar="DIR", help="save every masked image"
    )
    _add_shared(attribute)
    attribute.set_defaults(handler=_cmd_attribute)

    evaluate = commands.add_parser(
        "evaluate", help="score ranking methods on a labeled dataset"
    )
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--out-dir", default="results")
    evaluate.add_argument(
        "--method",
        action="append",
        help="method to score; repeatable or comma-separated (default: all)",
    )
    evaluate.add_argument(
        "--masking",
        action="append",
        help="masking strategy; repeatable or comma-separated (default: bboa)",
    )
    evaluate.add_argument("--skip-failures", action="store_true")
    _add_shared(evaluate)
    evaluate.set_defaults(handler=_cmd_evaluate)

    render = commands.add_parser(
        "render", help="paint a report's scores onto the image"
    )
    render.add_argument("--scene", required=True, help="scene JSON file")
    render.add_argument("--report", required=True)
    render.add_argument("--out", required=True)
    render.add_argument("--colormap", default="viridis")
    render.add_argument("--alpha", type=float, default=0.55)
    render.add_argument("--no-annotate", action="store_true")
    render.set_defaults(handler=_cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, TooManyObjects) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, MismatchedResult) as exc:
        # a report that does not fit its scene is bad input, not a crash
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (TransportError, AuthError, RateLimited, ModelRefusal) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATEWAY
    except VlmShapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
