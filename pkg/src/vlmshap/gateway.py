"""Model access: vision-language queries, text embeddings, and the value
function that scores how far a perturbed response drifted.

Live endpoints are reached over a generic chat-completion wire shape with
per-vendor adapters; offline, deterministic mock oracles stand in for both
the captioner and the embedder so the whole pipeline can be verified
without network access.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import string
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from .errors import (
    AuthError,
    DimensionMismatch,
    ModelRefusal,
    RateLimited,
    TransportError,
    ZeroVector,
)
from .masking import decode_png
from .scene import ObjectEntity, Scene


# ---------------------------------------------------------------------------
# Embeddings and the value function
# ---------------------------------------------------------------------------


class Embedding:
    """A finite, nonzero real vector; cosine is undefined on zero vectors."""

    __slots__ = ("values",)

    def __init__(self, values: Sequence[float] | np.ndarray):
        vec = np.asarray(values, dtype=float)
        if vec.ndim != 1 or vec.size == 0:
            raise ValueError("embedding must be a non-empty vector")
        if not np.all(np.isfinite(vec)):
            raise ValueError("embedding has non-finite components")
        if not np.any(vec):
            raise ZeroVector("embedding is all zeros")
        vec.setflags(write=False)
        self.values = vec

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __repr__(self) -> str:
        return f"Embedding(dim={self.dim})"


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    """dot(a, b) / (|a| |b|), clamped into [-1, 1]."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"embedding dims differ: {a.dim} vs {b.dim}")
    value = float(
        np.dot(a.values, b.values)
        / (np.linalg.norm(a.values) * np.linalg.norm(b.values))
    )
    return min(1.0, max(-1.0, value))


def _padded(a: Embedding, b: Embedding) -> tuple[Embedding, Embedding]:
    # Bag-of-words vocabularies grow over a run; absent tokens count as 0.
    if a.dim == b.dim:
        return a, b
    width = max(a.dim, b.dim)
    pad = lambda e: Embedding(np.pad(e.values, (0, width - e.dim)))
    return pad(a), pad(b)


def value_of(reference_response: str, perturbed_response: str, embedder: "Embedder") -> float:
    """Similarity of the perturbed response to the reference, in [-1, 1].

    Identical responses score exactly 1.
    """
    if not reference_response or not perturbed_response:
        raise ValueError("responses must be non-empty")
    if reference_response == perturbed_response:
        return 1.0
    a = embedder.embed(reference_response)
    b = embedder.embed(perturbed_response)
    return cosine_similarity(*_padded(a, b))


# ---------------------------------------------------------------------------
# Gateway protocols
# ---------------------------------------------------------------------------


class VlmClient(Protocol):
    model_id: str

    def query(self, png_bytes: bytes, prompt: str) -> str: ...


class Embedder(Protocol):
    model_id: str

    def embed(self, text: str) -> Embedding: ...


# ---------------------------------------------------------------------------
# Endpoint configuration and wire adapters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VlmEndpointConfig:
    """How to reach a chat-completion-style vision endpoint."""

    base_url: str
    model: str
    auth_env: str | None = None
    adapter: str = "openai"
    timeout_s: float = 120.0
    max_retries: int = 3
    max_concurrent: int = 4

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")
        if self.max_concurrent < 1:
            raise ValueError("concurrency must be >= 1")
        if self.max_retries < 0:
            raise ValueError("retries must be >= 0")


@dataclass(frozen=True)
class EmbedEndpointConfig:
    """How to reach a text-embedding endpoint."""

    base_url: str
    model: str
    auth_env: str | None = None
    adapter: str = "openai"
    timeout_s: float = 60.0
    max_retries: int = 3

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("retries must be >= 0")


class OpenAiAdapter:
    """OpenAI-compatible wire shape (also spoken by vLLM, Ollama, etc.)."""

    name = "openai"

    def headers(self, token: str | None) -> dict:
        headers = {"Content-Type": "application/json"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def chat_request(self, config: VlmEndpointConfig, png_b64: str, prompt: str):
        url = config.base_url.rstrip("/") + "/chat/completions"
        body = {
            "model": config.model,
            "temperature": 0,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {
                            "type": "image_url",
                            "image_url": {"url": f"data:image/png;base64,{png_b64}"},
                        },
                        {"type": "text", "text": prompt},
                    ],
                }
            ],
        }
        return url, body

    def parse_chat(self, payload: dict) -> str:
        try:
            return payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected chat payload: {exc}") from exc

    def embed_request(self, config: EmbedEndpointConfig, text: str):
        url = config.base_url.rstrip("/") + "/embeddings"
        return url, {"model": config.model, "input": text}

    def parse_embed(self, payload: dict) -> list[float]:
        try:
            return list(payload["data"][0]["embedding"])
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected embedding payload: {exc}") from exc


class GeminiAdapter:
    """Google generateContent / embedContent wire shape."""

    name = "gemini"

    def headers(self, token: str | None) -> dict:
        headers = {"Content-Type": "application/json"}
        if token:
            headers["x-goog-api-key"] = token
        return headers

    def chat_request(self, config: VlmEndpointConfig, png_b64: str, prompt: str):
        url = f"{config.base_url.rstrip('/')}/models/{config.model}:generateContent"
        body = {
            "contents": [
                {
                    "parts": [
                        {"inline_data": {"mime_type": "image/png", "data": png_b64}},
                        {"text": prompt},
                    ]
                }
            ],
            "generationConfig": {"temperature": 0},
        }
        return url, body

    def parse_chat(self, payload: dict) -> str:
        try:
            parts = payload["candidates"][0]["content"]["parts"]
            return "".join(p.get("text", "") for p in parts)
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected chat payload: {exc}") from exc

    def embed_request(self, config: EmbedEndpointConfig, text: str):
        url = f"{config.base_url.rstrip('/')}/models/{config.model}:embedContent"
        return url, {"content": {"parts": [{"text": text}]}}

    def parse_embed(self, payload: dict) -> list[float]:
        try:
            return list(payload["embedding"]["values"])
        except (KeyError, TypeError) as exc:
            raise TransportError(f"unexpected embedding payload: {exc}") from exc


ADAPTERS = {a.name: a for a in (OpenAiAdapter(), GeminiAdapter())}


def resolve_token(auth_env: str | None) -> str | None:
    """Read the auth token named by the config, if any."""
    if auth_env is None:
        return None
    token = os.environ.get(auth_env)
    if not token:
        raise AuthError(f"auth env var {auth_env} is not set")
    return token


# ---------------------------------------------------------------------------
# Response cache
# ---------------------------------------------------------------------------


class ResponseCache:
    """Content-addressed JSON cache under ``root/{model_id}/{sha256}.json``.

    Writes are atomic (temp file + rename) and serialized per key so
    concurrent fan-out never interleaves on one entry.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()

    def _lock_for(self, key: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(key, threading.Lock())

    def _path(self, model_id: str, key: str) -> Path:
        safe_model = model_id.replace("/", "_").replace(":", "_")
        return self.root / safe_model / f"{key}.json"

    def get(self, model_id: str, key: str) -> dict | None:
        path = self._path(model_id, key)
        with self._lock_for(key):
            if not path.exists():
                return None
            return json.loads(path.read_text(encoding="utf-8"))

    def put(self, model_id: str, key: str, payload: dict) -> None:
        path = self._path(model_id, key)
        with self._lock_for(key):
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
            tmp.replace(path)


def _digest(*parts: bytes | str) -> str:
    h = hashlib.sha256()
    for part in parts:
        data = part.encode("utf-8") if isinstance(part, str) else part
        h.update(hashlib.sha256(data).digest())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Live HTTP gateways
# ---------------------------------------------------------------------------


class _RetryingPoster:
    """Shared POST-with-backoff logic for both live gateways."""

    def __init__(self, timeout_s, max_retries, backoff_s, transport):
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def post(self, url: str, body: dict, headers: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt and self.backoff_s:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            try:
                resp = self._client.post(url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_error = TransportError(f"request to {url} failed: {exc}")
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials ({resp.status_code})")
            if resp.status_code == 429:
                last_error = RateLimited(f"throttled by {url}")
                continue
            if resp.status_code >= 500:
                last_error = TransportError(
                    f"server error {resp.status_code} from {url}"
                )
                continue
            if resp.status_code != 200:
                raise TransportError(
                    f"unexpected status {resp.status_code} from {url}: "
                    f"{resp.text[:200]}"
                )
            try:
                return resp.json()
            except ValueError as exc:
                raise TransportError(f"non-JSON payload from {url}") from exc
        assert last_error is not None
        raise last_error

    def close(self) -> None:
        self._client.close()


class HttpVlm:
    """f(image, prompt) over HTTP: PNG in, response text out, cached."""

    def __init__(
        self,
        config: VlmEndpointConfig,
        cache: ResponseCache | None = None,
        transport: httpx.BaseTransport | None = None,
        backoff_s: float = 0.5,
    ):
        self.config = config
        self.model_id = config.model
        self.cache = cache
        self._adapter = ADAPTERS[config.adapter]
        self._poster = _RetryingPoster(
            config.timeout_s, config.max_retries, backoff_s, transport
        )

    def query(self, png_bytes: bytes, prompt: str) -> str:
        if not png_bytes:
            raise ValueError("image bytes must be non-empty")
        if not prompt:
            raise ValueError("prompt must be non-empty")
        key = _digest(png_bytes, prompt, self.model_id)
        if self.cache is not None:
            hit = self.cache.get(self.model_id, key)
            if hit is not None:
                return hit["response"]
        token = resolve_token(self.config.auth_env)
        url, body = self._adapter.chat_request(
            self.config, base64.b64encode(png_bytes).decode("ascii"), prompt
        )
        payload = self._poster.post(url, body, self._adapter.headers(token))
        text = self._adapter.parse_chat(payload)
        if not text.strip():
            raise ModelRefusal(f"{self.model_id} returned an empty response")
        if self.cache is not None:
            self.cache.put(self.model_id, key, {"response": text, "prompt": prompt})
        return text

    def close(self) -> None:
        self._poster.close()


class HttpEmbedder:
    """Text embeddings over HTTP, cached by text digest."""

    def __init__(
        self,
        config: EmbedEndpointConfig,
        cache: ResponseCache | None = None,
        transport: httpx.BaseTransport | None = None,
        backoff_s: float = 0.5,
    ):
        self.config = config
        self.model_id = config.model
        self.cache = cache
        self._adapter = ADAPTERS[config.adapter]
        self._poster = _RetryingPoster(
            config.timeout_s, config.max_retries, backoff_s, transport
        )
        self._memo: dict[str, Embedding] = {}
        self._memo_lock = threading.Lock()

    def embed(self, text: str) -> Embedding:
        if not text:
            raise ValueError("text must be non-empty")
        key = _digest(text, self.model_id)
        with self._memo_lock:
            if key in self._memo:
                return self._memo[key]
        if self.cache is not None:
            hit = self.cache.get(self.model_id, key)
            if hit is not None:
                return self._remember(key, Embedding(hit["embedding"]))
        token = resolve_token(self.config.auth_env)
        url, body = self._adapter.embed_request(self.config, text)
        payload = self._poster.post(url, body, self._adapter.headers(token))
        embedding = Embedding(self._adapter.parse_embed(payload))
        if self.cache is not None:
            self.cache.put(
                self.model_id, key, {"embedding": embedding.values.tolist()}
            )
        return self._remember(key, embedding)

    def _remember(self, key: str, embedding: Embedding) -> Embedding:
        with self._memo_lock:
            return self._memo.setdefault(key, embedding)

    def close(self) -> None:
        self._poster.close()


# ---------------------------------------------------------------------------
# Mock oracles
# ---------------------------------------------------------------------------

MOCK_VISIBILITY_THRESHOLD = 0.5


def mock_vlm(visible_objects: Sequence[ObjectEntity]) -> str:
    """Deterministic caption: visible labels by descending mask area then id."""
    ordered = sorted(visible_objects, key=lambda o: (-o.area, o.id))
    if not ordered:
        return "an empty scene"
    return "a scene containing " + ", ".join(o.label for o in ordered)


class MockVlm:
    """Offline captioner: reports which scene objects survived the masking.

    An object counts as visible iff strictly less than half of its mask
    pixels differ from the original image. Enables brute-force verification
    of the whole attribution pipeline without model access.
    """

    model_id = "mock-vlm"

    def __init__(self, scene: Scene, threshold: float = MOCK_VISIBILITY_THRESHOLD):
        self.scene = scene
        self.threshold = threshold

    def query(self, png_bytes: bytes, prompt: str) -> str:
        if not png_bytes:
            raise ValueError("image bytes must be non-empty")
        if not prompt:
            raise ValueError("prompt must be non-empty")
        raster = decode_png(png_bytes)
        if raster.shape != self.scene.image.shape:
            raise ValueError("queried image does not match the scene dimensions")
        changed = np.any(raster != self.scene.image, axis=2)
        visible = [
            obj
            for obj in self.scene.objects
            if changed[obj.mask.array].sum() / obj.area < self.threshold
        ]
        return mock_vlm(visible)


_PUNCTUATION = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace tokens with surrounding punctuation stripped."""
    tokens = []
    for raw in text.lower().split():
        token = raw.strip(_PUNCTUATION)
        if token:
            tokens.append(token)
    return tokens


class MockEmbedder:
    """Bag-of-words embedder over the vocabulary seen so far this run.

    Token indices are assigned by first occurrence, so vectors embedded at
    different times may differ in length; comparisons pad with zeros, which
    leaves every cosine independent of embedding order.
    """

    model_id = "mock-embed"

    def __init__(self):
        self._vocab: dict[str, int] = {}
        self._lock = threading.Lock()

    def embed(self, text: str) -> Embedding:
        if not text:
            raise ValueError("text must be non-empty")
        tokens = tokenize(text)
        with self._lock:
            for token in tokens:
                self._vocab.setdefault(token, len(self._vocab))
            counts = np.zeros(len(self._vocab))
            for token in tokens:
                counts[self._vocab[token]] += 1
        return Embedding(counts)
