"""Embeddings, cosine similarity, text-embedding providers, and prompt preprocessing.

The engine stores every embedding pre-normalized so that query-time cosine
similarity reduces to a dot product. Two provider kinds are built in: a
deterministic hash embedder (model-free, fully reproducible, used for tests
and offline work) and a remote HTTP embedder that fronts any real encoder
service. Any object satisfying :class:`EmbeddingProvider` plugs in the same
way, so fine-tuned encoders can be swapped in without touching the engine.
"""

from __future__ import annotations

import hashlib
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Protocol, Sequence, Union, runtime_checkable

import httpx
import numpy as np

from .errors import (
    ContractViolationError,
    InvalidEmbeddingError,
    InvalidInputError,
    InvalidPromptError,
    ProviderError,
)

# Stored embeddings must satisfy |l2_norm - 1| <= NORM_TOLERANCE.
NORM_TOLERANCE = 1e-6

PROVIDER_KINDS = ("deterministic-hash", "remote-http")
REPHRASE_KINDS = ("identity", "remote-http")


@dataclass(frozen=True, eq=False)
class Embedding:
    """A unit-normalized real vector of fixed dimension."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 1:
            raise InvalidEmbeddingError("embedding must be a 1-D vector with dim >= 1")
        if not np.all(np.isfinite(v)):
            raise InvalidEmbeddingError("embedding has non-finite components")
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise InvalidEmbeddingError(
                f"embedding is not unit-normalized (|norm - 1| = {abs(norm - 1.0):.3e})"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.size)


def normalize(vector) -> Embedding:
    """Scale a raw vector to unit length.

    Raises :class:`InvalidEmbeddingError` for zero or non-finite input.
    """
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise InvalidEmbeddingError("expected a 1-D vector with at least one component")
    if not np.all(np.isfinite(v)):
        raise InvalidEmbeddingError("vector has non-finite components")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise InvalidEmbeddingError("cannot normalize the zero vector")
    return Embedding(v / norm)


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    """Cosine of the angle between two embeddings, clamped to [-1, 1]."""
    if a.dim != b.dim:
        raise ContractViolationError(f"dimension mismatch: {a.dim} vs {b.dim}")
    denom = float(np.linalg.norm(a.values)) * float(np.linalg.norm(b.values))
    return float(np.clip(float(np.dot(a.values, b.values)) / denom, -1.0, 1.0))


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


@runtime_checkable
class EmbeddingProvider(Protocol):
    """Anything that batch-encodes texts into unit embeddings of one dimension."""

    @property
    def dim(self) -> int: ...

    def embed_texts(self, texts: Sequence[str]) -> list[Embedding]: ...


@dataclass(frozen=True)
class EmbeddingProviderSpec:
    """Declarative description of a built-in provider kind."""

    kind: str = "deterministic-hash"
    dim: int = 768
    seed: int = 0
    endpoint: str | None = None
    timeout_ms: float = 10_000.0

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise InvalidInputError(f"unknown provider kind {self.kind!r}")
        if self.dim < 1:
            raise InvalidInputError("provider dim must be >= 1")
        if self.kind == "remote-http" and not self.endpoint:
            raise InvalidInputError("remote-http provider requires an endpoint")
        if self.timeout_ms <= 0:
            raise InvalidInputError("timeout_ms must be positive")


ProviderLike = Union[EmbeddingProviderSpec, EmbeddingProvider]


@lru_cache(maxsize=32768)
def _token_signs(seed: int, dim: int, token: str) -> np.ndarray:
    # One sign bit per component, drawn from keyed BLAKE2b in counter mode so
    # the mapping is stable across processes and platforms.
    nbytes = (dim + 7) // 8
    material = token.encode("utf-8")
    key = (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    out = bytearray()
    counter = 0
    while len(out) < nbytes:
        digest = hashlib.blake2b(
            material, digest_size=64, key=key, salt=counter.to_bytes(8, "little")
        ).digest()
        out.extend(digest)
        counter += 1
    bits = np.unpackbits(np.frombuffer(bytes(out[:nbytes]), dtype=np.uint8))[:dim]
    signs = bits.astype(np.int8) * 2 - 1
    signs.setflags(write=False)
    return signs


class HashEmbedder:
    """Deterministic signed-random-projection embedder.

    Lowercases, splits on whitespace, maps each token to a seeded +-1 vector,
    sums and normalizes. A pure function of (seed, text): shared tokens pull
    texts together, disjoint vocabularies land near orthogonal.
    """

    def __init__(self, dim: int = 768, seed: int = 0):
        if dim < 1:
            raise InvalidInputError("dim must be >= 1")
        self._dim = dim
        self._seed = int(seed)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def seed(self) -> int:
        return self._seed

    def embed_texts(self, texts: Sequence[str]) -> list[Embedding]:
        out = []
        for text in texts:
            tokens = text.lower().split()
            if not tokens:
                raise InvalidInputError("cannot embed a text with zero tokens")
            acc = np.zeros(self._dim, dtype=np.float64)
            for token in tokens:
                acc += _token_signs(self._seed, self._dim, token)
            out.append(normalize(acc))
        return out


class RemoteEmbedder:
    """HTTP embedding client: POST {endpoint} {"texts": [...]}.

    Expects {"embeddings": [[...], ...]} with one row of length ``dim`` per
    input text, in order. Rows are re-normalized on receipt. Thread-safe for
    concurrent in-flight requests.
    """

    def __init__(
        self,
        endpoint: str,
        dim: int,
        timeout_ms: float = 10_000.0,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self._dim = dim
        self._client = client or httpx.Client(timeout=timeout_ms / 1000.0)
        self._owns_client = client is None

    @property
    def dim(self) -> int:
        return self._dim

    def embed_texts(self, texts: Sequence[str]) -> list[Embedding]:
        payload = {"texts": list(texts)}
        try:
            response = self._client.post(self.endpoint, json=payload)
        except httpx.HTTPError as exc:
            raise ProviderError(f"embedding request to {self.endpoint} failed: {exc}") from exc
        if response.status_code != 200:
            raise ProviderError(
                f"embedding endpoint {self.endpoint} returned status {response.status_code}"
            )
        try:
            rows = response.json()["embeddings"]
        except (ValueError, KeyError) as exc:
            raise ProviderError("embedding response is not valid JSON with 'embeddings'") from exc
        if not isinstance(rows, list) or len(rows) != len(texts):
            raise ProviderError(
                f"embedding response has {len(rows) if isinstance(rows, list) else '?'} rows, "
                f"expected {len(texts)}"
            )
        out = []
        for i, row in enumerate(rows):
            if len(row) != self._dim:
                raise ProviderError(
                    f"embedding row {i} has dim {len(row)}, expected {self._dim}"
                )
            try:
                out.append(normalize(np.asarray(row, dtype=np.float64)))
            except InvalidEmbeddingError as exc:
                raise ProviderError(f"embedding row {i} is invalid: {exc}") from exc
        return out

    def close(self) -> None:
        if self._owns_client:
            self._client.close()


def build_provider(spec: EmbeddingProviderSpec, client: httpx.Client | None = None) -> EmbeddingProvider:
    """Instantiate the provider a spec describes."""
    if spec.kind == "deterministic-hash":
        return HashEmbedder(dim=spec.dim, seed=spec.seed)
    return RemoteEmbedder(spec.endpoint, spec.dim, timeout_ms=spec.timeout_ms, client=client)


def as_provider(provider: ProviderLike) -> EmbeddingProvider:
    if isinstance(provider, EmbeddingProviderSpec):
        return build_provider(provider)
    return provider


def embed_texts(provider: ProviderLike, texts: Sequence[str]) -> list[Embedding]:
    """Encode a batch of texts, order-preserving, one unit embedding per text."""
    texts = list(texts)
    if not texts:
        raise InvalidInputError("embed_texts requires at least one text")
    for i, text in enumerate(texts):
        if not text.split():
            raise InvalidInputError(f"text {i} is empty after whitespace normalization")
    return as_provider(provider).embed_texts(texts)


# ---------------------------------------------------------------------------
# Prompt preprocessing (rephrase hook)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RephraseSpec:
    """Preprocessing kind: plain whitespace standardization or a remote rewriter."""

    kind: str = "identity"
    endpoint: str | None = None
    timeout_ms: float = 10_000.0

    def __post_init__(self):
        if self.kind not in REPHRASE_KINDS:
            raise InvalidInputError(f"unknown rephrase kind {self.kind!r}")
        if self.kind == "remote-http" and not self.endpoint:
            raise InvalidInputError("remote-http rephrase requires an endpoint")
        if self.timeout_ms <= 0:
            raise InvalidInputError("timeout_ms must be positive")


class PreprocessResult(NamedTuple):
    text: str
    rephrased: bool


def standardize_whitespace(raw: str) -> str:
    """Trim, drop non-whitespace control characters, collapse whitespace runs."""
    kept = "".join(
        ch for ch in raw if ch in "\t\n\r\f\v" or unicodedata.category(ch) != "Cc"
    )
    return " ".join(kept.split())


class RemoteRephraser:
    """HTTP rewriter client: POST {endpoint} {"text": ...} -> {"text": ...}."""

    def __init__(self, endpoint: str, timeout_ms: float = 10_000.0, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self._client = client or httpx.Client(timeout=timeout_ms / 1000.0)
        self._owns_client = client is None

    def rephrase(self, text: str) -> str:
        try:
            response = self._client.post(self.endpoint, json={"text": text})
        except httpx.HTTPError as exc:
            raise ProviderError(f"rephrase request to {self.endpoint} failed: {exc}") from exc
        if response.status_code != 200:
            raise ProviderError(
                f"rephrase endpoint {self.endpoint} returned status {response.status_code}"
            )
        try:
            return response.json()["text"]
        except (ValueError, KeyError) as exc:
            raise ProviderError("rephrase response is not valid JSON with 'text'") from exc

    def close(self) -> None:
        if self._owns_client:
            self._client.close()


RephraseLike = Union[RephraseSpec, RemoteRephraser, None]


def preprocess_prompt(raw: str, rephrase: RephraseLike = None) -> PreprocessResult:
    """Standardize a raw prompt before embedding.

    Identity mode normalizes whitespace only. Remote mode asks the configured
    endpoint for a single-sentence rewrite; on any remote failure the identity
    result is returned with ``rephrased=False`` so callers can observe the
    degradation instead of losing the request.
    """
    base = standardize_whitespace(raw)
    if not base:
        raise InvalidPromptError("prompt is empty after standardization")

    rephraser: RemoteRephraser | None = None
    transient = False
    if rephrase is None:
        return PreprocessResult(base, False)
    if isinstance(rephrase, RephraseSpec):
        if rephrase.kind == "identity":
            return PreprocessResult(base, False)
        rephraser = RemoteRephraser(rephrase.endpoint, timeout_ms=rephrase.timeout_ms)
        transient = True
    else:
        rephraser = rephrase

    try:
        rewritten = standardize_whitespace(rephraser.rephrase(raw))
    except ProviderError:
        return PreprocessResult(base, False)
    finally:
        if transient:
            rephraser.close()
    if not rewritten:
        return PreprocessResult(base, False)
    return PreprocessResult(rewritten, True)
