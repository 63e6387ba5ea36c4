"""Text embedding for header matching: local deterministic fallback or remote HTTP.

Vectors are always 768-dimensional, finite, and L2-normalized by the engine
regardless of the backend.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import requests

from .errors import DimensionMismatch, EmbedderUnavailable, ZeroVector

DIM = 768

_MAX_BATCH = 256  # remote wire protocol caps one request at this many texts

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


class Embedder(Protocol):
    def embed(self, texts: list[str]) -> list[np.ndarray]: ...


def _trigram_index_sign(trigram: str) -> tuple[int, float]:
    digest = hashlib.blake2b(trigram.encode("utf-8"), digest_size=8).digest()
    h = int.from_bytes(digest, "big")
    # Low bits pick the bucket, a disjoint bit picks the sign.
    return h % DIM, 1.0 if (h >> 32) & 1 else -1.0


@dataclass(frozen=True)
class FallbackEmbedder:
    """Hashed character-trigram bag; deterministic and dependency-free.

    Case-folded text splits into tokens at punctuation; each token is padded
    with boundary markers so one- and two-character tokens still contribute.
    """

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        return [self._one(t) for t in texts]

    def _one(self, text: str) -> np.ndarray:
        vec = np.zeros(DIM, dtype=np.float64)
        for token in _TOKEN_SPLIT.split(text.casefold()):
            if not token:
                continue
            padded = f"^{token}$"
            for i in range(len(padded) - 2):
                idx, sign = _trigram_index_sign(padded[i : i + 3])
                vec[idx] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ZeroVector(f"text {text!r} produced an all-zero embedding")
        return vec / norm


@dataclass(frozen=True)
class RemoteEmbedder:
    """Client for the POST /embed wire protocol (JSON in, JSON out)."""

    url: str
    timeout: float = 10.0

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for i in range(0, len(texts), _MAX_BATCH):
            out.extend(self._request(texts[i : i + _MAX_BATCH]))
        return out

    def _request(self, batch: list[str]) -> list[np.ndarray]:
        try:
            resp = requests.post(
                f"{self.url.rstrip('/')}/embed",
                json={"texts": batch},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise EmbedderUnavailable(f"embed request failed: {exc}") from exc
        if resp.status_code != 200:
            raise EmbedderUnavailable(f"embed endpoint returned {resp.status_code}")
        try:
            vectors = resp.json()["vectors"]
        except (ValueError, KeyError) as exc:
            raise EmbedderUnavailable(f"malformed embed response: {exc}") from exc
        if len(vectors) != len(batch):
            raise EmbedderUnavailable(
                f"expected {len(batch)} vectors, got {len(vectors)}"
            )
        out = []
        for v in vectors:
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != (DIM,):
                raise DimensionMismatch(f"remote returned dimension {arr.shape}")
            out.append(arr)
        return out

    def health(self) -> dict:
        try:
            resp = requests.get(f"{self.url.rstrip('/')}/health", timeout=self.timeout)
        except requests.RequestException as exc:
            raise EmbedderUnavailable(f"health check failed: {exc}") from exc
        if resp.status_code != 200:
            raise EmbedderUnavailable(f"health endpoint returned {resp.status_code}")
        body = resp.json()
        if body.get("dim") != DIM:
            raise DimensionMismatch(f"sidecar reports dimension {body.get('dim')}")
        return body


def embed(texts: list[str], embedder: Embedder) -> list[np.ndarray]:
    """One unit vector per text; validates dimension, finiteness, and norm."""
    if not texts:
        raise ValueError("embed requires a non-empty text list")
    for t in texts:
        if not isinstance(t, str) or not t.strip():
            raise ValueError(f"embed requires non-empty trimmed strings, got {t!r}")
    vectors = embedder.embed(texts)
    out = []
    for text, vec in zip(texts, vectors):
        arr = np.asarray(vec, dtype=np.float64)
        if arr.shape != (DIM,):
            raise DimensionMismatch(f"vector for {text!r} has shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ZeroVector(f"vector for {text!r} has non-finite entries")
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise ZeroVector(f"vector for {text!r} is all-zero")
        out.append(arr / norm)
    return out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a, b) / (|a||b|), clamped to [-1, 1] against rounding drift."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cosine over shapes {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine undefined for a zero vector")
    return float(np.clip(float(np.dot(a, b)) / (na * nb), -1.0, 1.0))
