"""MinHash near-duplicate detection for prompt datasets.

Word-shingle sets are summarized by h seeded min-hashes; the fraction of
agreeing signature slots is the standard unbiased estimator of Jaccard
similarity. Deduplication is a first-occurrence-wins scan: a prompt is
dropped when its estimated Jaccard against any already-retained prompt
reaches the threshold.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import PromptRecord
from .errors import ContractViolationError, InvalidInputError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 3
DEFAULT_HASHES = 128
DEFAULT_THRESHOLD = 0.8

_U64 = np.uint64


@dataclass(frozen=True, eq=False)
class ShingleSet:
    """All windows of ``width`` consecutive tokens from one text."""

    shingles: frozenset[str]
    width: int


@dataclass(frozen=True, eq=False)
class MinHashSignature:
    """Per-slot minima of h seeded hash functions over a shingle set."""

    mins: np.ndarray
    seed: int

    def __post_init__(self):
        mins = np.ascontiguousarray(self.mins, dtype=np.uint64)
        if mins.ndim != 1 or mins.size < 1:
            raise InvalidInputError("signature must hold at least one slot")
        mins.setflags(write=False)
        object.__setattr__(self, "mins", mins)

    @property
    def h(self) -> int:
        return int(self.mins.size)


def shingle(text: str, w: int = DEFAULT_WINDOW) -> ShingleSet:
    """Lowercase, split on whitespace, emit all w-token windows.

    Texts shorter than w tokens yield a single shingle of all their tokens.
    """
    if w < 1:
        raise InvalidInputError("shingle width must be >= 1")
    tokens = text.lower().split()
    if not tokens:
        raise InvalidInputError("cannot shingle an empty text")
    if len(tokens) < w:
        return ShingleSet(frozenset({" ".join(tokens)}), w)
    windows = (" ".join(tokens[i : i + w]) for i in range(len(tokens) - w + 1))
    return ShingleSet(frozenset(windows), w)


def _hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


@lru_cache(maxsize=64)
def _slot_salts(h: int, seed: int) -> np.ndarray:
    salts = np.array([_hash64(f"minhash:{seed}:{i}") for i in range(h)], dtype=np.uint64)
    salts.setflags(write=False)
    return salts


def _mix64(values: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; u64 arithmetic wraps mod 2**64 by design
    with np.errstate(over="ignore"):
        values = (values ^ (values >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
        values = (values ^ (values >> _U64(27))) * _U64(0x94D049BB133111EB)
        return values ^ (values >> _U64(31))


def minhash_signature(s: ShingleSet, h: int = DEFAULT_HASHES, seed: int = 0) -> MinHashSignature:
    """Signature of a shingle set: min over shingles of each seeded hash."""
    if h < 1:
        raise InvalidInputError("hash count must be >= 1")
    if not s.shingles:
        raise InvalidInputError("cannot sign an empty shingle set")
    base = np.array([_hash64(sh) for sh in s.shingles], dtype=np.uint64)
    table = _mix64(base[None, :] ^ _slot_salts(h, seed)[:, None])
    return MinHashSignature(table.min(axis=1), seed)


def estimate_jaccard(a: MinHashSignature, b: MinHashSignature) -> float:
    """Fraction of agreeing slots; unbiased estimator of Jaccard similarity."""
    if a.h != b.h:
        raise ContractViolationError(f"signature length mismatch: {a.h} vs {b.h}")
    if a.seed != b.seed:
        raise ContractViolationError(f"signature seed mismatch: {a.seed} vs {b.seed}")
    return float(np.mean(a.mins == b.mins))


class DropRecord(NamedTuple):
    dropped: str
    kept: str
    estimate: float


def deduplicate(
    prompts: Sequence[PromptRecord],
    w: int = DEFAULT_WINDOW,
    h: int = DEFAULT_HASHES,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[list[PromptRecord], list[DropRecord]]:
    """Drop near-duplicates, keeping the first occurrence of each group.

    Returns the retained prompts in input order and one report entry per
    dropped prompt naming the retained prompt it collided with. Prompts
    whose text cannot be shingled are retained as-is and logged.
    """
    if not 0.0 < threshold <= 1.0:
        raise InvalidInputError("threshold must lie in (0, 1]")

    retained: list[PromptRecord] = []
    report: list[DropRecord] = []
    # Growing buffer of retained signatures; doubled on demand to keep the
    # scan O(n^2 * h) element ops without per-step reallocation.
    capacity = 64
    sig_rows = np.empty((capacity, h), dtype=np.uint64)
    row_ids: list[str] = []

    for record in prompts:
        try:
            sig = minhash_signature(shingle(record.text, w), h, seed)
        except InvalidInputError:
            logger.warning("prompt %s could not be shingled; retained as-is", record.id)
            retained.append(record)
            continue
        count = len(row_ids)
        if count:
            agreement = (sig_rows[:count] == sig.mins).mean(axis=1)
            hits = np.nonzero(agreement >= threshold)[0]
            if hits.size:
                first = int(hits[0])
                report.append(DropRecord(record.id, row_ids[first], float(agreement[first])))
                continue
        if count == capacity:
            capacity *= 2
            grown = np.empty((capacity, h), dtype=np.uint64)
            grown[:count] = sig_rows[:count]
            sig_rows = grown
        sig_rows[count] = sig.mins
        row_ids.append(record.id)
        retained.append(record)

    return retained, report
