"""Decoding transforms and the prompt-generation loop.

The generation pipeline per emitted token: fetch logits for the current
history, apply the repetition penalty on logits, soften with temperature
into a distribution, truncate to the top-k tokens, truncate again to the
nucleus, then draw by inverse CDF. Penalty and temperature act on logits
and therefore run before the probability-space truncations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

from .errors import (
    ContractViolationError,
    GenerationError,
    InvalidInputError,
    ProviderError,
)

DISTRIBUTION_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    """A probability vector over a vocabulary: non-negative, sums to one."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise InvalidInputError("distribution must be a non-empty 1-D vector")
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("distribution has non-finite entries")
        if np.any(p < 0.0):
            raise InvalidInputError("distribution has negative entries")
        total = float(p.sum())
        if abs(total - 1.0) > DISTRIBUTION_SUM_TOL:
            raise InvalidInputError(f"distribution sums to {total!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def vocab_size(self) -> int:
        return int(self.probs.size)


@dataclass(frozen=True)
class SamplingConfig:
    """Decoding knobs; defaults are the generation settings used throughout."""

    top_k: int = 50
    nucleus_p: float = 0.95
    repetition_penalty: float = 1.2
    temperature: float = 0.6
    max_tokens: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise InvalidInputError("top_k must be >= 1")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise InvalidInputError("nucleus_p must lie in (0, 1]")
        if self.repetition_penalty < 1.0:
            raise InvalidInputError("repetition_penalty must be >= 1")
        if self.temperature <= 0.0:
            raise InvalidInputError("temperature must be > 0")
        if self.max_tokens < 1:
            raise InvalidInputError("max_tokens must be >= 1")


def apply_temperature(logits, temperature: float) -> TokenDistribution:
    """softmax(logits / T), max-shifted for stability."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise InvalidInputError("logits must be a non-empty 1-D vector")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    if temperature <= 0.0:
        raise InvalidInputError("temperature must be > 0")
    z = z / temperature
    z -= z.max()
    e = np.exp(z)
    return TokenDistribution(e / e.sum())


def apply_repetition_penalty(logits, history, penalty: float) -> np.ndarray:
    """Discourage already-emitted tokens.

    Positive logits are divided by the penalty, negative ones multiplied,
    so the adjustment always lowers the token's preference.
    """
    z = np.array(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise InvalidInputError("logits must be a non-empty 1-D vector")
    if penalty < 1.0:
        raise InvalidInputError("repetition penalty must be >= 1")
    for index in set(history):
        if not 0 <= index < z.size:
            raise ContractViolationError(f"history index {index} outside vocabulary of {z.size}")
        if z[index] > 0.0:
            z[index] /= penalty
        else:
            z[index] *= penalty
    return z


def _descending_order(p: np.ndarray) -> np.ndarray:
    # stable sort on -p: lower token index wins among equal probabilities
    return np.argsort(-p, kind="stable")


def top_k_filter(dist: TokenDistribution, k: int) -> TokenDistribution:
    """Zero everything outside the k most probable tokens, renormalize."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    p = dist.probs
    if k >= p.size:
        return dist
    keep = _descending_order(p)[:k]
    out = np.zeros_like(p)
    out[keep] = p[keep]
    mass = out.sum()
    if mass <= 0.0:
        raise InvalidInputError("top-k survivors have zero total mass")
    return TokenDistribution(out / mass)


def nucleus_filter(dist: TokenDistribution, nucleus_p: float) -> TokenDistribution:
    """Keep the smallest descending-probability prefix with mass >= nucleus_p."""
    if not 0.0 < nucleus_p <= 1.0:
        raise InvalidInputError("nucleus_p must lie in (0, 1]")
    p = dist.probs
    order = _descending_order(p)
    cumulative = np.cumsum(p[order])
    cut = int(np.searchsorted(cumulative, nucleus_p, side="left"))
    cut = min(cut, p.size - 1)
    keep = order[: cut + 1]
    out = np.zeros_like(p)
    out[keep] = p[keep]
    return TokenDistribution(out / out.sum())


def sample_token(dist: TokenDistribution, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; deterministic given the generator state."""
    r = rng.random()
    cumulative = np.cumsum(dist.probs)
    index = int(np.searchsorted(cumulative, r, side="right"))
    index = min(index, dist.vocab_size - 1)
    while index > 0 and dist.probs[index] == 0.0:
        index -= 1
    return index


# ---------------------------------------------------------------------------
# Logit sources
# ---------------------------------------------------------------------------


@runtime_checkable
class LogitSource(Protocol):
    """Next-token logit oracle over a fixed vocabulary."""

    @property
    def vocabulary(self) -> Sequence[str]: ...

    @property
    def end_token(self) -> str | None: ...

    def logits(self, history: Sequence[int]) -> np.ndarray: ...


class MarkovFixtureSource:
    """Deterministic logit table keyed by the most recent token.

    ``table`` maps a state (previous token, or ``start_state`` at the
    beginning) to a full row of logits over the vocabulary.
    """

    def __init__(
        self,
        vocabulary: Sequence[str],
        table: Mapping[str, Sequence[float]],
        end_token: str | None = None,
        start_state: str = "<s>",
    ):
        self._vocabulary = list(vocabulary)
        if not self._vocabulary:
            raise InvalidInputError("vocabulary must be non-empty")
        if end_token is not None and end_token not in self._vocabulary:
            raise InvalidInputError(f"end token {end_token!r} not in vocabulary")
        self._table = {state: np.asarray(row, dtype=np.float64) for state, row in table.items()}
        for state, row in self._table.items():
            if row.shape != (len(self._vocabulary),):
                raise InvalidInputError(
                    f"fixture row for state {state!r} has length {row.size}, "
                    f"expected {len(self._vocabulary)}"
                )
        self._end_token = end_token
        self._start_state = start_state
        if start_state not in self._table:
            raise InvalidInputError(f"fixture table missing start state {start_state!r}")

    @property
    def vocabulary(self) -> Sequence[str]:
        return self._vocabulary

    @property
    def end_token(self) -> str | None:
        return self._end_token

    def logits(self, history: Sequence[int]) -> np.ndarray:
        state = self._vocabulary[history[-1]] if history else self._start_state
        row = self._table.get(state)
        if row is None:
            raise InvalidInputError(f"fixture table has no row for state {state!r}")
        return row


class RemoteLogitSource:
    """HTTP logit client: POST {endpoint} {"history": [...]} -> {"logits": [...]}."""

    def __init__(
        self,
        endpoint: str,
        vocabulary: Sequence[str],
        end_token: str | None = None,
        timeout_ms: float = 30_000.0,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self._vocabulary = list(vocabulary)
        self._end_token = end_token
        self._client = client or httpx.Client(timeout=timeout_ms / 1000.0)
        self._owns_client = client is None

    @property
    def vocabulary(self) -> Sequence[str]:
        return self._vocabulary

    @property
    def end_token(self) -> str | None:
        return self._end_token

    def logits(self, history: Sequence[int]) -> np.ndarray:
        tokens = [self._vocabulary[i] for i in history]
        try:
            response = self._client.post(self.endpoint, json={"history": tokens})
        except httpx.HTTPError as exc:
            raise ProviderError(f"logit request to {self.endpoint} failed: {exc}") from exc
        if response.status_code != 200:
            raise ProviderError(
                f"logit endpoint {self.endpoint} returned status {response.status_code}"
            )
        try:
            row = np.asarray(response.json()["logits"], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderError("logit response is not valid JSON with 'logits'") from exc
        if row.shape != (len(self._vocabulary),):
            raise ProviderError(
                f"logit response has length {row.size}, expected {len(self._vocabulary)}"
            )
        return row

    def close(self) -> None:
        if self._owns_client:
            self._client.close()


def load_fixture_source(path) -> MarkovFixtureSource | RemoteLogitSource:
    """Read a logit-source description from a JSON file."""
    spec = json.loads(Path(path).read_text(encoding="utf-8"))
    kind = spec.get("kind", "markov-fixture")
    if kind == "markov-fixture":
        return MarkovFixtureSource(
            vocabulary=spec["vocabulary"],
            table=spec["table"],
            end_token=spec.get("end_token"),
            start_state=spec.get("start_state", "<s>"),
        )
    if kind == "remote-http":
        return RemoteLogitSource(
            endpoint=spec["endpoint"],
            vocabulary=spec["vocabulary"],
            end_token=spec.get("end_token"),
            timeout_ms=spec.get("timeout_ms", 30_000.0),
        )
    raise InvalidInputError(f"unknown logit source kind {kind!r}")


def generate_prompt(source: LogitSource, cfg: SamplingConfig) -> str:
    """Generate one prompt string, stopping at the end token or max_tokens."""
    rng = np.random.default_rng(cfg.seed)
    vocabulary = list(source.vocabulary)
    end_index = vocabulary.index(source.end_token) if source.end_token is not None else None
    history: list[int] = []
    tokens: list[str] = []
    while len(tokens) < cfg.max_tokens:
        try:
            raw = np.asarray(source.logits(history), dtype=np.float64)
        except ProviderError as exc:
            partial = " ".join(tokens)
            raise GenerationError(
                f"logit source failed after {len(tokens)} tokens ({partial!r}): {exc}",
                partial_text=partial,
            ) from exc
        penalized = apply_repetition_penalty(raw, set(history), cfg.repetition_penalty)
        dist = apply_temperature(penalized, cfg.temperature)
        dist = top_k_filter(dist, cfg.top_k)
        dist = nucleus_filter(dist, cfg.nucleus_p)
        index = sample_token(dist, rng)
        if end_index is not None and index == end_index:
            break
        history.append(index)
        tokens.append(vocabulary[index])
    return " ".join(tokens)
