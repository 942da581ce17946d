"""Per-object attribution for vision-language model responses.

Hide coalitions of segmented objects, measure how far the model's answer
drifts in embedding space, and assign each object a Shapley contribution
to the original response.
"""

from .errors import (
    AuthError,
    DimensionMismatch,
    EmptyObjectList,
    IncompleteTable,
    InvalidCoalition,
    MalformedEncoding,
    MismatchedResult,
    ModelRefusal,
    RateLimited,
    SchemaError,
    TooManyObjects,
    TransportError,
    UncoveredObject,
    VlmShapError,
    ZeroVector,
)
from .evaluation import (
    Aggregate,
    EvalEntry,
    EvalOutcome,
    MetricsRow,
    baseline_central,
    baseline_largest,
    format_summary_table,
    iou,
    load_dataset,
    recall_at_k,
    run_evaluation,
    similarity_drop,
)
from .gateway import (
    EmbedEndpointConfig,
    Embedding,
    HttpEmbedder,
    HttpVlm,
    MockEmbedder,
    MockVlm,
    ResponseCache,
    VlmEndpointConfig,
    cosine_similarity,
    mock_vlm,
    value_of,
)
from .masking import Coalition, FillSpec, MaskingStrategy, apply_masking
from .overlay import OverlaySpec, render_overlay, save_overlay
from .pipeline import AttributionRun, attribute_scene, config_fingerprint
from .sampling import SamplingPlan
from .scene import BitMask, Box, ObjectEntity, Scene, decode_mask, load_scene
from .shapley import (
    AttributionResult,
    ValueTable,
    estimate_shapley,
    exact_shapley,
    rank_objects,
    solve,
)

__version__ = "0.1.0"

__all__ = [
    "Aggregate",
    "AttributionResult",
    "AttributionRun",
    "AuthError",
    "BitMask",
    "Box",
    "Coalition",
    "DimensionMismatch",
    "EmbedEndpointConfig",
    "Embedding",
    "EmptyObjectList",
    "EvalEntry",
    "EvalOutcome",
    "FillSpec",
    "HttpEmbedder",
    "HttpVlm",
    "IncompleteTable",
    "InvalidCoalition",
    "MalformedEncoding",
    "MaskingStrategy",
    "MetricsRow",
    "MismatchedResult",
    "MockEmbedder",
    "MockVlm",
    "ModelRefusal",
    "ObjectEntity",
    "OverlaySpec",
    "RateLimited",
    "ResponseCache",
    "SamplingPlan",
    "Scene",
    "SchemaError",
    "TooManyObjects",
    "TransportError",
    "UncoveredObject",
    "ValueTable",
    "VlmEndpointConfig",
    "VlmShapError",
    "ZeroVector",
    "apply_masking",
    "attribute_scene",
    "baseline_central",
    "baseline_largest",
    "config_fingerprint",
    "cosine_similarity",
    "decode_mask",
    "estimate_shapley",
    "exact_shapley",
    "format_summary_table",
    "iou",
    "load_dataset",
    "load_scene",
    "mock_vlm",
    "rank_objects",
    "recall_at_k",
    "render_overlay",
    "run_evaluation",
    "save_overlay",
    "similarity_drop",
    "solve",
    "value_of",
]
