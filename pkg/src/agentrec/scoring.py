"""Similarity aggregation, agent ranking, and the evaluation harness.

An agent's score for a query is an aggregate of the cosine similarities
between the query embedding and every row of that agent's corpus. Four
aggregations are supported: max, arithmetic mean, geometric mean, and the
logarithmic generalized power mean

    S = (1/p) * ln((1/n) * sum_i s_i^p)

which is the reported default at p = 200. S is computed entirely in the
log domain (log-mean-exp of p*ln(s_i)), so it stays finite where the naive
evaluation of s_i^p underflows to zero. Similarities are clamped to
[epsilon, 1] before geometric and power-mean aggregation: ln is undefined
at zero and large even exponents would otherwise reward strongly negative
similarities.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import AgentCorpus, PromptRecord
from .embedding import (
    Embedding,
    ProviderLike,
    RephraseLike,
    as_provider,
    embed_texts,
    preprocess_prompt,
)
from .errors import ContractViolationError, InvalidInputError

SCORE_KINDS = ("max", "arithmetic", "geometric", "p-means")

DEFAULT_P = 200.0
DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class ScoreConfig:
    """Aggregation kind plus the power-mean exponent and similarity clamp."""

    kind: str = "p-means"
    p: float = DEFAULT_P
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise InvalidInputError(f"unknown score kind {self.kind!r}")
        if self.kind == "p-means" and self.p <= 0.0:
            raise InvalidInputError("power-mean exponent must be > 0")
        if not 0.0 < self.epsilon < 1.0:
            raise InvalidInputError("epsilon must lie in (0, 1)")

    def label(self) -> str:
        if self.kind == "p-means":
            return f"p-means({self.p:g})"
        return self.kind


def similarities(query: Embedding, corpus: AgentCorpus) -> np.ndarray:
    """Cosine similarity of the query against every corpus row.

    Corpus rows are stored unit-normalized, so this is one matrix-vector
    product, clipped to [-1, 1] to absorb rounding.
    """
    if query.dim != corpus.dim:
        raise ContractViolationError(
            f"query dim {query.dim} does not match corpus {corpus.agent!r} dim {corpus.dim}"
        )
    return np.clip(corpus.embeddings @ query.values, -1.0, 1.0)


def _as_sims(sims) -> np.ndarray:
    s = np.asarray(sims, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise InvalidInputError("similarities must be a non-empty 1-D vector")
    return s


def aggregate(sims, kind: str, epsilon: float = DEFAULT_EPSILON) -> float:
    """Max, arithmetic, or geometric aggregation of a similarity vector."""
    s = _as_sims(sims)
    if kind == "max":
        return float(s.max())
    if kind == "arithmetic":
        return float(s.mean())
    if kind == "geometric":
        clamped = np.clip(s, epsilon, 1.0)
        return float(np.exp(np.mean(np.log(clamped))))
    raise InvalidInputError(f"unknown aggregation kind {kind!r}")


def _log_mean_exp(x: np.ndarray) -> float:
    # max-shifted so the largest term contributes exp(0)
    m = float(x.max())
    return m + float(np.log(np.mean(np.exp(x - m))))


def score_pmeans(sims, p: float = DEFAULT_P, epsilon: float = DEFAULT_EPSILON) -> float:
    """Logarithmic generalized power mean of clamped similarities.

    Finite for every valid input: with the whole computation in the log
    domain, p = 200 on similarities at the epsilon floor is routine.
    """
    s = _as_sims(sims)
    if p <= 0.0:
        raise InvalidInputError("power-mean exponent must be > 0")
    clamped = np.clip(s, epsilon, 1.0)
    return _log_mean_exp(p * np.log(clamped)) / p


def score_for_config(sims, cfg: ScoreConfig) -> float:
    if cfg.kind == "p-means":
        return score_pmeans(sims, cfg.p, cfg.epsilon)
    return aggregate(sims, cfg.kind, cfg.epsilon)


@dataclass(frozen=True)
class Recommendation:
    """Ranked (agent, score) pairs for one query."""

    ranked: tuple[tuple[str, float], ...]
    k: int
    rephrased: bool

    def to_dict(self) -> dict:
        return {
            "ranked": [{"agent": agent, "score": score} for agent, score in self.ranked],
            "k": self.k,
            "rephrased": self.rephrased,
        }


def rank_agents(query: Embedding, corpora: dict[str, AgentCorpus], cfg: ScoreConfig) -> list[tuple[str, float]]:
    """Score every corpus and sort by (score desc, agent id asc)."""
    if not corpora:
        raise InvalidInputError("no corpora registered")
    scored = [
        (agent, score_for_config(similarities(query, corpus), cfg))
        for agent, corpus in corpora.items()
    ]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored


def recommend(
    prompt: str,
    corpora: dict[str, AgentCorpus],
    cfg: ScoreConfig,
    rephrase: RephraseLike = None,
    provider: ProviderLike = None,
    k: int = 1,
) -> Recommendation:
    """Route one prompt: preprocess, embed, score every corpus, rank, cut to k."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if provider is None:
        raise InvalidInputError("an embedding provider is required")
    if not corpora:
        raise InvalidInputError("no corpora registered")
    prepared = preprocess_prompt(prompt, rephrase)
    query = embed_texts(provider, [prepared.text])[0]
    ranked = rank_agents(query, corpora, cfg)[:k]
    return Recommendation(tuple(ranked), k=k, rephrased=prepared.rephrased)


# ---------------------------------------------------------------------------
# Evaluation harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    """Top-k accuracies plus the top-1 confusion counts."""

    accuracy_by_k: dict[int, float]
    confusion: dict[str, dict[str, int]]
    n_evaluated: int

    def to_dict(self) -> dict:
        return {
            "accuracy_by_k": {str(k): v for k, v in sorted(self.accuracy_by_k.items())},
            "confusion": {t: dict(sorted(p.items())) for t, p in sorted(self.confusion.items())},
            "n_evaluated": self.n_evaluated,
        }


def _embed_labeled(
    corpora: dict[str, AgentCorpus],
    labeled: Sequence[PromptRecord],
    provider: ProviderLike,
) -> list[Embedding]:
    if not labeled:
        raise InvalidInputError("evaluation requires at least one labeled prompt")
    unknown = sorted({r.agent for r in labeled} - set(corpora))
    if unknown:
        raise InvalidInputError(f"labels without a registered corpus: {', '.join(unknown)}")
    texts = [preprocess_prompt(record.text).text for record in labeled]
    return embed_texts(provider, texts)


def _evaluate_embedded(
    corpora: dict[str, AgentCorpus],
    queries: Sequence[Embedding],
    labels: Sequence[str],
    cfg: ScoreConfig,
    ks: Sequence[int],
) -> EvalReport:
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise InvalidInputError("ks must contain positive integers")
    hits = {k: 0 for k in ks}
    confusion: dict[str, dict[str, int]] = {}
    for query, label in zip(queries, labels):
        ranked = [agent for agent, _ in rank_agents(query, corpora, cfg)]
        for k in ks:
            if label in ranked[:k]:
                hits[k] += 1
        row = confusion.setdefault(label, {})
        row[ranked[0]] = row.get(ranked[0], 0) + 1
    n = len(labels)
    return EvalReport({k: hits[k] / n for k in ks}, confusion, n)


def top_k_accuracy(
    corpora: dict[str, AgentCorpus],
    labeled: Sequence[PromptRecord],
    cfg: ScoreConfig,
    provider: ProviderLike,
    ks: Sequence[int] = (1,),
) -> EvalReport:
    """Fraction of prompts whose label appears in the first k ranked agents."""
    queries = _embed_labeled(corpora, labeled, provider)
    return _evaluate_embedded(corpora, queries, [r.agent for r in labeled], cfg, ks)


def score_function_sweep(
    corpora: dict[str, AgentCorpus],
    labeled: Sequence[PromptRecord],
    provider: ProviderLike,
    configs: Sequence[ScoreConfig],
    ks: Sequence[int] = (1,),
) -> list[tuple[ScoreConfig, EvalReport]]:
    """Evaluate several score configs on the same prompts (embedded once)."""
    if not configs:
        raise InvalidInputError("sweep requires at least one score config")
    queries = _embed_labeled(corpora, labeled, provider)
    labels = [r.agent for r in labeled]
    return [(cfg, _evaluate_embedded(corpora, queries, labels, cfg, ks)) for cfg in configs]


@dataclass(frozen=True)
class LatencyReport:
    p50_ms: float
    p95_ms: float
    mean_ms: float
    n: int
    samples_ms: tuple[float, ...] = field(repr=False, default=())

    def to_dict(self) -> dict:
        return {"p50_ms": self.p50_ms, "p95_ms": self.p95_ms, "mean_ms": self.mean_ms, "n": self.n}


def latency_benchmark(
    corpora: dict[str, AgentCorpus],
    prompts: Sequence[str],
    cfg: ScoreConfig,
    provider: ProviderLike,
    repetitions: int,
    warmup: int = 10,
) -> LatencyReport:
    """Wall-clock statistics per recommend call, rephrasing disabled.

    Runs ``warmup`` unmeasured calls first so caches and allocator pools are
    hot, then times ``repetitions`` calls cycling through the prompts.
    """
    if repetitions < 1:
        raise InvalidInputError("repetitions must be >= 1")
    if not prompts:
        raise InvalidInputError("benchmark requires at least one prompt")
    resolved = as_provider(provider)

    for i in range(warmup):
        recommend(prompts[i % len(prompts)], corpora, cfg, None, resolved, k=1)

    samples = np.empty(repetitions, dtype=np.float64)
    for i in range(repetitions):
        prompt = prompts[i % len(prompts)]
        start = time.perf_counter()
        recommend(prompt, corpora, cfg, None, resolved, k=1)
        samples[i] = (time.perf_counter() - start) * 1000.0
    return LatencyReport(
        p50_ms=float(np.percentile(samples, 50)),
        p95_ms=float(np.percentile(samples, 95)),
        mean_ms=float(samples.mean()),
        n=repetitions,
        samples_ms=tuple(samples.tolist()),
    )
