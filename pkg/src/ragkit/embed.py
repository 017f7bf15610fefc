"""Embedding backends: a remote HTTP endpoint and a deterministic offline hasher.

Both return unit-norm float vectors of a fixed dimension, so retrieval and
token-similarity code never needs to know which backend produced a vector.
The hashing backend exists so that every test and fixture pipeline runs
offline and bit-reproducibly; the remote backend speaks the common
``/embeddings`` JSON shape.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import requests

from .metrics import tokenize

__all__ = [
    "EmbedError",
    "EmbedderConfig",
    "EmbeddingVector",
    "HashingEmbedder",
    "RemoteEmbedder",
    "make_embedder",
    "embed_text",
    "embed_tokens",
    "FixtureTransport",
    "RecordingTransport",
]

logger = logging.getLogger(__name__)


class EmbedError(RuntimeError):
    """Raised when an embedding backend fails or returns malformed data."""


@dataclass(frozen=True)
class EmbedderConfig:
    """Configuration for one embedding backend.

    Attributes:
        kind: ``"remote"`` (HTTP endpoint) or ``"hashing"`` (offline,
            deterministic).
        model_name: Model identifier sent to remote endpoints; also used as a
            display name.
        dim: Output dimension; every returned vector has exactly this length.
        endpoint_url: Required for ``remote``.
        timeout_ms: Per-request timeout for remote calls.
        batch_size: Maximum texts per remote request.
        retries: Extra attempts after a failed remote call.
        api_key_env: Environment variable holding the bearer token, if any.
    """

    kind: str
    model_name: str
    dim: int
    endpoint_url: str | None = None
    timeout_ms: int = 10_000
    batch_size: int = 32
    retries: int = 2
    api_key_env: str = "RAGKIT_API_KEY"

    def __post_init__(self) -> None:
        if self.kind not in ("remote", "hashing"):
            raise EmbedError(f"unknown embedder kind {self.kind!r}")
        if self.dim < 1:
            raise EmbedError(f"dim must be positive, got {self.dim}")
        if self.kind == "remote" and not self.endpoint_url:
            raise EmbedError("remote embedder needs endpoint_url")
        if self.batch_size < 1:
            raise EmbedError(f"batch_size must be positive, got {self.batch_size}")


@dataclass(frozen=True)
class EmbeddingVector:
    """A unit-norm embedding with its originating text."""

    text: str
    values: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def _normalize(values: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(values))
    if norm == 0.0:
        # A zero vector cannot be normalized; park it on the first axis so the
        # result still has unit norm and comparisons stay well defined.
        out = np.zeros_like(values)
        out[0] = 1.0
        return out
    return values / norm


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


class HashingEmbedder:
    """Deterministic character-trigram embedder.

    Each lowercased character trigram of the text hashes (FNV-1a, 64-bit, so
    the mapping is identical on every platform) to a bucket and a sign; the
    signed counts are L2-normalized.  Similar surface forms share trigrams and
    therefore direction, which is enough structure for retrieval tests and
    offline pipelines.
    """

    kind = "hashing"

    def __init__(self, dim: int = 384, model_name: str = "hashing") -> None:
        if dim < 1:
            raise EmbedError(f"dim must be positive, got {dim}")
        self.dim = dim
        self.model_name = model_name

    def _grams(self, text: str) -> list[str]:
        text = text.lower()
        if len(text) < 3:
            return [text] if text else []
        return [text[i : i + 3] for i in range(len(text) - 2)]

    def embed(self, text: str) -> np.ndarray:
        """Embed one text as a unit-norm float64 vector."""
        values = np.zeros(self.dim, dtype=np.float64)
        for gram in self._grams(text):
            h = _fnv1a64(gram.encode("utf-8"))
            bucket = h % self.dim
            sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
            values[bucket] += sign
        return _normalize(values)

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]


def _http_post_json(
    url: str, payload: dict, headers: dict, timeout_s: float
) -> tuple[int, dict]:
    response = requests.post(url, json=payload, headers=headers, timeout=timeout_s)
    status = response.status_code
    try:
        body = response.json()
    except ValueError as exc:
        raise EmbedError(
            f"non-JSON response (status {status}) from {url}: {response.text[:200]!r}"
        ) from exc
    return status, body


class FixtureTransport:
    """Replays recorded request/response pairs from a JSONL file.

    Each line holds ``{"request": <payload>, "status": <int>,
    "response": <body>}``.  Requests are matched by payload equality, so a
    fixture works regardless of call order; unmatched requests raise.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._entries: list[dict] = []
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    self._entries.append(json.loads(line))

    def __call__(self, url: str, payload: dict, headers: dict, timeout_s: float) -> tuple[int, dict]:
        for entry in self._entries:
            if entry["request"] == payload:
                return int(entry.get("status", 200)), entry["response"]
        raise EmbedError(f"no recorded response for payload {json.dumps(payload)[:200]}")


class RecordingTransport:
    """Wraps a live transport and appends every exchange to a JSONL fixture."""

    def __init__(self, inner: Callable, path: str | Path) -> None:
        self.inner = inner
        self.path = Path(path)

    def __call__(self, url: str, payload: dict, headers: dict, timeout_s: float) -> tuple[int, dict]:
        status, body = self.inner(url, payload, headers, timeout_s)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(
                json.dumps(
                    {"request": payload, "status": status, "response": body},
                    ensure_ascii=False,
                )
                + "\n"
            )
        return status, body


class RemoteEmbedder:
    """Client for an HTTP embeddings endpoint.

    Sends ``{"model": ..., "input": [texts]}`` and expects
    ``{"data": [{"embedding": [...]}, ...]}`` with one entry per input, in
    input order.  Vectors are L2-normalized on return.  Batching is an
    implementation detail: embedding texts one at a time or in one batch
    yields the same vectors.
    """

    kind = "remote"

    def __init__(self, config: EmbedderConfig, transport: Callable | None = None) -> None:
        if config.kind != "remote":
            raise EmbedError(f"RemoteEmbedder needs a remote config, got {config.kind!r}")
        self.config = config
        self.dim = config.dim
        self.model_name = config.model_name
        self._transport = transport or _http_post_json

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        payload = {"model": self.config.model_name, "input": list(texts)}
        timeout_s = self.config.timeout_ms / 1000.0
        last_error: Exception | None = None
        for attempt in range(self.config.retries + 1):
            try:
                status, body = self._transport(
                    self.config.endpoint_url, payload, self._headers(), timeout_s
                )
                if status != 200:
                    raise EmbedError(
                        f"embedding endpoint returned status {status}: "
                        f"{json.dumps(body)[:200]}"
                    )
                return self._parse(body, texts)
            except (requests.Timeout, requests.ConnectionError, EmbedError) as exc:
                last_error = exc
                if attempt < self.config.retries:
                    logger.warning(
                        "embedding attempt %d/%d failed: %s",
                        attempt + 1,
                        self.config.retries + 1,
                        exc,
                    )
                    time.sleep(min(0.2 * (attempt + 1), 1.0))
        raise EmbedError(
            f"embedding failed after {self.config.retries + 1} attempts "
            f"(first text: {texts[0][:60]!r}): {last_error}"
        )

    def _parse(self, body: dict, texts: Sequence[str]) -> list[np.ndarray]:
        try:
            data = body["data"]
            raw = [entry["embedding"] for entry in data]
        except (KeyError, TypeError) as exc:
            raise EmbedError(
                f"malformed embedding response: {json.dumps(body)[:200]}"
            ) from exc
        if len(raw) != len(texts):
            raise EmbedError(
                f"embedding count mismatch: sent {len(texts)} texts, got {len(raw)}"
            )
        out: list[np.ndarray] = []
        for text, values in zip(texts, raw):
            vector = np.asarray(values, dtype=np.float64)
            if vector.shape != (self.config.dim,):
                raise EmbedError(
                    f"dimension mismatch for {text[:40]!r}: expected "
                    f"{self.config.dim}, got {vector.shape}"
                )
            out.append(_normalize(vector))
        return out

    def embed(self, text: str) -> np.ndarray:
        return self._post_batch([text])[0]

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for start in range(0, len(texts), self.config.batch_size):
            out.extend(self._post_batch(texts[start : start + self.config.batch_size]))
        return out


def make_embedder(config: EmbedderConfig, transport: Callable | None = None):
    """Build the embedder described by ``config``."""
    if config.kind == "hashing":
        return HashingEmbedder(dim=config.dim, model_name=config.model_name)
    return RemoteEmbedder(config, transport=transport)


def embed_text(config: EmbedderConfig, text: str, transport: Callable | None = None) -> EmbeddingVector:
    """Embed one text with the configured backend.

    Args:
        config: Backend description.
        text: Non-empty text.

    Returns:
        A unit-norm :class:`EmbeddingVector` of dimension ``config.dim``.

    Raises:
        EmbedError: On empty input or backend failure.
    """
    if not text.strip():
        raise EmbedError("cannot embed empty text")
    embedder = make_embedder(config, transport=transport)
    return EmbeddingVector(text=text, values=embedder.embed(text))


def embed_tokens(
    config: EmbedderConfig, text: str, transport: Callable | None = None
) -> list[tuple[str, EmbeddingVector]]:
    """Tokenize ``text`` with the metrics tokenizer and embed each token.

    Returns:
        One ``(token, vector)`` pair per token, in token order.

    Raises:
        EmbedError: If the text has no tokens.
    """
    tokens = tokenize(text).tokens
    if not tokens:
        raise EmbedError(f"no tokens to embed in {text[:60]!r}")
    embedder = make_embedder(config, transport=transport)
    vectors = embedder.embed_many(list(tokens))
    return [
        (token, EmbeddingVector(text=token, values=vector))
        for token, vector in zip(tokens, vectors)
    ]
