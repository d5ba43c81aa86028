"""Embedding providers: a hashing bag-of-tokens model, an HTTP client and a disk cache."""

from __future__ import annotations

import hashlib
import logging
import os
import re
import tempfile
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class ProviderError(RuntimeError):
    """A provider call failed.  ``retryable`` separates transient from fatal failures."""

    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


def as_vector(values: Any, dimension: int | None = None) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ValueError("embedding must be a non-empty 1-d vector")
    if dimension is not None and vec.size != dimension:
        raise ValueError(f"embedding has dimension {vec.size}, expected {dimension}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("embedding contains non-finite values")
    return vec


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    value = float(np.dot(a, b)) / (na * nb)
    return max(-1.0, min(1.0, value))


class EmbeddingProvider(ABC):
    model_id: str
    dimension: int

    @abstractmethod
    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        ...

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]


def tokenize(text: str) -> list[str]:
    """Lower-cased alphanumeric tokens with a crude plural fold (``books`` -> ``book``)."""
    tokens = []
    for tok in _TOKEN_RE.findall(text.lower()):
        if len(tok) > 3 and tok.endswith("s") and not tok.endswith("ss"):
            tok = tok[:-1]
        tokens.append(tok)
    return tokens


class HashingEmbedder(EmbeddingProvider):
    """Deterministic offline embedder: hashed token counts, L2-normalized.

    Identifiers like ``student_name`` split into ``student`` and ``name``.
    """

    def __init__(self, dimension: int = 512, salt: str = ""):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.salt = salt
        self.model_id = f"hashing-bow-{dimension}" + (f"-{salt}" if salt else "")

    def _slot(self, token: str) -> tuple[int, float]:
        digest = hashlib.blake2b((self.salt + token).encode(), digest_size=8).digest()
        value = int.from_bytes(digest, "little")
        return value % self.dimension, (1.0 if (value >> 63) & 1 else -1.0)

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            vec = np.zeros(self.dimension)
            tokens = tokenize(text) or ["<empty>"]
            for tok in tokens:
                idx, sign = self._slot(tok)
                vec[idx] += sign
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                # colliding tokens cancelled out
                idx, sign = self._slot("<empty>")
                vec[idx] = sign
                norm = 1.0
            out.append(vec / norm)
        return out


class HttpEmbedder(EmbeddingProvider):
    """Client for a batch text-embedding endpoint.

    Sends ``{"model": ..., "input": [texts]}`` and accepts a bare list of
    vectors, ``{"embeddings": [...]}`` or ``{"data": [{"embedding": ...}]}``.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        dimension: int | None = None,
        token_env: str | None = "DBROUTE_EMBED_TOKEN",
        batch_size: int = 16,
        parallelism: int = 4,
        timeout: float = 60.0,
        max_chars: int | None = 32000,
        retries: int = 3,
        backoff: float = 0.5,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.retries = max(1, retries)
        self.backoff = backoff
        self.model = model
        self.model_id = model
        self.dimension = dimension or 0
        self.token_env = token_env
        self.batch_size = max(1, batch_size)
        self.parallelism = max(1, parallelism)
        self.max_chars = max_chars
        self._client = client or httpx.Client(timeout=timeout)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env) if self.token_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _truncate(self, text: str) -> str:
        if self.max_chars is not None and len(text) > self.max_chars:
            log.warning("truncating %d-character document to %d characters", len(text), self.max_chars)
            return text[: self.max_chars]
        return text

    def _post(self, texts: list[str]) -> list[np.ndarray]:
        for attempt in range(self.retries):
            try:
                return self._post_once(texts)
            except ProviderError as exc:
                if not exc.retryable or attempt == self.retries - 1:
                    raise
                log.warning("embedding attempt %d failed (%s); retrying", attempt + 1, exc)
                time.sleep(self.backoff * 2**attempt)
        raise AssertionError("unreachable")

    def _post_once(self, texts: list[str]) -> list[np.ndarray]:
        try:
            resp = self._client.post(
                self.endpoint, json={"model": self.model, "input": texts}, headers=self._headers()
            )
        except httpx.TimeoutException as exc:
            raise ProviderError(f"embedding request timed out: {exc}", retryable=True) from exc
        except httpx.TransportError as exc:
            raise ProviderError(f"embedding transport error: {exc}", retryable=True) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ProviderError(f"embedding service returned {resp.status_code}", retryable=True)
        if resp.status_code >= 400:
            raise ProviderError(f"embedding service returned {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProviderError("embedding service returned invalid JSON") from exc
        if isinstance(body, dict):
            if "embeddings" in body:
                body = body["embeddings"]
            elif "data" in body:
                body = [row["embedding"] for row in sorted(body["data"], key=lambda r: r.get("index", 0))]
        if not isinstance(body, list) or len(body) != len(texts):
            raise ProviderError("embedding response does not match the request batch")
        vectors = [as_vector(v) for v in body]
        dims = {v.size for v in vectors}
        if self.dimension == 0 and len(dims) == 1:
            self.dimension = dims.pop()
            dims = {self.dimension}
        if dims != {self.dimension}:
            raise ProviderError(f"inconsistent embedding dimensions {sorted(dims)}")
        return vectors

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = [self._truncate(t) for t in texts]
        batches = [texts[i : i + self.batch_size] for i in range(0, len(texts), self.batch_size)]
        if self.parallelism == 1 or len(batches) <= 1:
            results = [self._post(b) for b in batches]
        else:
            with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                results = list(pool.map(self._post, batches))
        return [v for batch in results for v in batch]


class CachedEmbedder(EmbeddingProvider):
    """Content-addressed cache in front of another provider.

    Entries are keyed by ``sha256(model_id + NUL + text)`` and stored as
    ``.npy`` files (written to a temp file, then renamed) under ``cache_dir``.
    Without a directory the cache is memory-only.
    """

    def __init__(self, inner: EmbeddingProvider, cache_dir: Path | str | None = None):
        self.inner = inner
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._memory: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @property
    def model_id(self) -> str:  # type: ignore[override]
        return self.inner.model_id

    @property
    def dimension(self) -> int:  # type: ignore[override]
        return self.inner.dimension

    def key(self, text: str) -> str:
        return hashlib.sha256(f"{self.model_id}\0{text}".encode()).hexdigest()

    def _path(self, key: str) -> Path:
        assert self.cache_dir is not None
        return self.cache_dir / key[:2] / f"{key}.npy"

    def _lookup(self, key: str) -> np.ndarray | None:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        if self.cache_dir is not None:
            path = self._path(key)
            if path.exists():
                vec = np.load(path)
                with self._lock:
                    self._memory[key] = vec
                return vec
        return None

    def _store(self, key: str, vec: np.ndarray) -> None:
        with self._lock:
            self._memory[key] = vec
        if self.cache_dir is None:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            np.save(fh, vec)
        os.replace(tmp, path)

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        keys = [self.key(t) for t in texts]
        found: dict[str, np.ndarray] = {}
        missing: dict[str, str] = {}
        for key, text in zip(keys, texts):
            vec = self._lookup(key)
            if vec is None:
                missing.setdefault(key, text)
            else:
                found[key] = vec
        self.hits += len(texts) - sum(1 for k in keys if k in missing)
        self.misses += len(missing)
        if missing:
            vectors = self.inner.embed_batch(list(missing.values()))
            for key, vec in zip(missing, vectors):
                self._store(key, vec)
                found[key] = vec
        return [found[k] for k in keys]
