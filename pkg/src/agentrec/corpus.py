"""Prompt datasets, per-agent splits, embedding corpora, and the on-disk cache.

The cache is a single little-endian binary file so a service can come up by
mapping embeddings straight into memory instead of re-encoding thousands of
prompts. Layout: magic ``ARECCACH``, u32 version, u32 dim, u32 agent count,
then per agent (u16-length agent id, u64 row count, u16-length prompt ids,
row-major float32 payload), closed by a CRC32 over all preceding bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import NORM_TOLERANCE, ProviderLike, as_provider
from .errors import (
    AgentRecError,
    CacheChecksumError,
    CacheMagicError,
    CacheNormError,
    CacheTruncatedError,
    CacheVersionError,
    CorpusBuildError,
    InvalidConfigurationError,
    InvalidInputError,
    StorageError,
)

CACHE_MAGIC = b"ARECCACH"
CACHE_VERSION = 1


@dataclass(frozen=True)
class PromptRecord:
    """A single-sentence prompt with its agent label and stable id."""

    id: str
    agent: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise InvalidInputError("prompt id must be non-empty")
        if not self.agent:
            raise InvalidInputError("agent id must be non-empty")
        if not self.text.split():
            raise InvalidInputError(f"prompt {self.id}: text must be non-empty")


@dataclass(frozen=True, eq=False)
class AgentCorpus:
    """One agent's cached embedding matrix, one unit row per prompt."""

    agent: str
    embeddings: np.ndarray
    prompt_ids: tuple[str, ...]

    def __post_init__(self):
        matrix = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] < 1 or matrix.shape[1] < 1:
            raise InvalidInputError(f"corpus {self.agent!r}: embeddings must be a non-empty matrix")
        if matrix.shape[0] != len(self.prompt_ids):
            raise InvalidInputError(
                f"corpus {self.agent!r}: {matrix.shape[0]} rows but {len(self.prompt_ids)} prompt ids"
            )
        if not np.all(np.isfinite(matrix)):
            raise InvalidInputError(f"corpus {self.agent!r}: non-finite embedding values")
        norms = np.linalg.norm(matrix, axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > NORM_TOLERANCE:
            raise InvalidInputError(
                f"corpus {self.agent!r}: row norm off unit by {worst:.3e}"
            )
        matrix.setflags(write=False)
        object.__setattr__(self, "embeddings", matrix)
        object.__setattr__(self, "prompt_ids", tuple(self.prompt_ids))

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])


@dataclass(frozen=True, eq=False)
class DatasetSplits:
    """Train/test partition plus the finetune/reward sub-partition of train."""

    train: tuple[PromptRecord, ...]
    test: tuple[PromptRecord, ...]
    finetune: tuple[PromptRecord, ...]
    reward: tuple[PromptRecord, ...]
    seed: int


def _exact_count(total: int, fraction: float, agent: str, what: str) -> int:
    raw = total * fraction
    count = round(raw)
    if abs(raw - count) > 1e-9:
        raise InvalidConfigurationError(
            f"agent {agent!r}: {what} size {total} x {fraction} = {raw} is not integral"
        )
    if count < 1 or count > total - 1:
        raise InvalidConfigurationError(
            f"agent {agent!r}: {what} fraction {fraction} leaves an empty side of the split"
        )
    return count


def split_dataset(
    prompts: Sequence[PromptRecord],
    ratios: tuple[float, float] = (0.8, 0.75),
    seed: int = 0,
) -> DatasetSplits:
    """Shuffle per agent and split into train/test, then finetune/reward.

    Every agent must contribute the same number of prompts and both split
    sizes must come out integral, so per-agent counts are equal across
    agents in every split. Deterministic in (input, seed).
    """
    train_frac, finetune_frac = ratios
    for name, frac in (("train", train_frac), ("finetune", finetune_frac)):
        if not 0.0 < frac < 1.0:
            raise InvalidConfigurationError(f"{name} fraction must lie in (0, 1), got {frac}")
    if not prompts:
        raise InvalidInputError("cannot split an empty dataset")

    groups: dict[str, list[PromptRecord]] = {}
    for record in prompts:
        groups.setdefault(record.agent, []).append(record)

    sizes = {agent: len(records) for agent, records in groups.items()}
    if len(set(sizes.values())) > 1:
        detail = ", ".join(f"{agent}={n}" for agent, n in sorted(sizes.items()))
        raise InvalidConfigurationError(
            f"per-agent counts must be equal across agents, got {detail}"
        )

    rng = np.random.default_rng(seed)
    train: list[PromptRecord] = []
    test: list[PromptRecord] = []
    finetune: list[PromptRecord] = []
    reward: list[PromptRecord] = []
    for agent in sorted(groups):
        records = groups[agent]
        n = len(records)
        n_train = _exact_count(n, train_frac, agent, "train")
        n_finetune = _exact_count(n_train, finetune_frac, agent, "finetune")
        order = rng.permutation(n)
        shuffled = [records[i] for i in order]
        agent_train = shuffled[:n_train]
        train.extend(agent_train)
        test.extend(shuffled[n_train:])
        finetune.extend(agent_train[:n_finetune])
        reward.extend(agent_train[n_finetune:])
    return DatasetSplits(tuple(train), tuple(test), tuple(finetune), tuple(reward), seed)


def build_agent_corpora(
    prompts: Sequence[PromptRecord],
    provider: ProviderLike,
    per_agent_limit: int | None = None,
) -> dict[str, AgentCorpus]:
    """Embed up to ``per_agent_limit`` prompts per agent, one batch per agent."""
    if per_agent_limit is not None and per_agent_limit < 1:
        raise InvalidInputError("per_agent_limit must be >= 1")
    if not prompts:
        raise InvalidInputError("cannot build corpora from an empty dataset")
    resolved = as_provider(provider)

    groups: dict[str, list[PromptRecord]] = {}
    for record in prompts:
        groups.setdefault(record.agent, []).append(record)

    corpora: dict[str, AgentCorpus] = {}
    for agent, records in groups.items():
        batch = records[:per_agent_limit] if per_agent_limit else records
        try:
            embedded = resolved.embed_texts([r.text for r in batch])
        except AgentRecError as exc:
            raise CorpusBuildError(
                f"embedding batch for agent {agent!r} ({len(batch)} prompts) failed: {exc}"
            ) from exc
        matrix = np.stack([e.values for e in embedded])
        corpora[agent] = AgentCorpus(agent, matrix, tuple(r.id for r in batch))
    return corpora


# ---------------------------------------------------------------------------
# Binary cache
# ---------------------------------------------------------------------------


def save_corpus_cache(corpora: dict[str, AgentCorpus], path) -> int:
    """Serialize corpora to the binary cache format; returns bytes written.

    Agents are written in sorted order and the float payload as little-endian
    float32, so identical corpora produce identical files on any platform.
    """
    if not corpora:
        raise InvalidInputError("cannot save an empty corpus map")
    dims = {corpus.dim for corpus in corpora.values()}
    if len(dims) > 1:
        raise InvalidInputError(f"corpora have mixed dimensions: {sorted(dims)}")
    dim = dims.pop()

    buf = bytearray()
    buf += CACHE_MAGIC
    buf += struct.pack("<III", CACHE_VERSION, dim, len(corpora))
    for agent in sorted(corpora):
        corpus = corpora[agent]
        agent_bytes = agent.encode("utf-8")
        if len(agent_bytes) > 0xFFFF:
            raise InvalidInputError(f"agent id {agent!r} exceeds 65535 bytes")
        buf += struct.pack("<H", len(agent_bytes)) + agent_bytes
        buf += struct.pack("<Q", corpus.size)
        for prompt_id in corpus.prompt_ids:
            id_bytes = prompt_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise InvalidInputError(f"prompt id {prompt_id!r} exceeds 65535 bytes")
            buf += struct.pack("<H", len(id_bytes)) + id_bytes
        buf += corpus.embeddings.astype("<f4").tobytes(order="C")
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)

    try:
        Path(path).write_bytes(bytes(buf))
    except OSError as exc:
        raise StorageError(f"cannot write corpus cache to {path}: {exc}") from exc
    return len(buf)


class _Cursor:
    """Bounds-checked reader over the cache bytes."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CacheTruncatedError(
                f"truncated cache while reading {what}: expected {self.offset + n} bytes, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_corpus_cache(path) -> dict[str, AgentCorpus]:
    """Read and validate a corpus cache file.

    Distinct error types identify the failure: bad magic, unsupported
    version, truncation, checksum mismatch, or a row that lost unit norm.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read corpus cache from {path}: {exc}") from exc

    cursor = _Cursor(data)
    magic = cursor.take(len(CACHE_MAGIC), "magic")
    if magic != CACHE_MAGIC:
        raise CacheMagicError(f"bad cache magic {magic!r}, expected {CACHE_MAGIC!r}")
    version = cursor.u32("version")
    if version != CACHE_VERSION:
        raise CacheVersionError(f"unsupported cache version {version}")
    dim = cursor.u32("dim")
    agent_count = cursor.u32("agent count")
    if dim < 1 or agent_count < 1:
        raise CacheTruncatedError(f"implausible header: dim={dim}, agents={agent_count}")

    corpora: dict[str, AgentCorpus] = {}
    for _ in range(agent_count):
        agent = cursor.take(cursor.u16("agent id length"), "agent id").decode("utf-8")
        rows = cursor.u64(f"row count for {agent!r}")
        if rows < 1:
            raise CacheTruncatedError(f"corpus {agent!r} declares zero rows")
        prompt_ids = tuple(
            cursor.take(cursor.u16("prompt id length"), f"prompt id in {agent!r}").decode("utf-8")
            for _ in range(rows)
        )
        payload = cursor.take(rows * dim * 4, f"embedding payload for {agent!r}")
        matrix = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float64)
        norms = np.linalg.norm(matrix, axis=1)
        worst_row = int(np.abs(norms - 1.0).argmax())
        worst = float(abs(norms[worst_row] - 1.0))
        if worst > NORM_TOLERANCE:
            raise CacheNormError(
                f"corpus {agent!r} row {worst_row}: norm off unit by {worst:.3e}"
            )
        corpora[agent] = AgentCorpus(agent, matrix, prompt_ids)

    stored_crc = cursor.u32("checksum")
    if cursor.offset != len(data):
        raise CacheTruncatedError(
            f"cache has {len(data) - cursor.offset} trailing bytes after the checksum"
        )
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CacheChecksumError(
            f"cache checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    return corpora


# ---------------------------------------------------------------------------
# JSONL prompt datasets
# ---------------------------------------------------------------------------


def read_prompts(path) -> list[PromptRecord]:
    """Read a JSON-lines prompt dataset ({"id", "agent", "text"} per line)."""
    records: list[PromptRecord] = []
    seen: set[str] = set()
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read prompts from {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            record = PromptRecord(id=str(obj["id"]), agent=str(obj["agent"]), text=str(obj["text"]))
        except (ValueError, KeyError) as exc:
            raise InvalidInputError(f"{path}:{lineno}: malformed prompt record: {exc}") from exc
        if record.id in seen:
            raise InvalidInputError(f"{path}:{lineno}: duplicate prompt id {record.id!r}")
        seen.add(record.id)
        records.append(record)
    return records


def write_prompts(records: Iterable[PromptRecord], path) -> int:
    """Write prompts as JSON lines; returns the number of records written."""
    count = 0
    try:
        with Path(path).open("w", encoding="utf-8") as handle:
            for record in records:
                json.dump(
                    {"id": record.id, "agent": record.agent, "text": record.text},
                    handle,
                    ensure_ascii=False,
                )
                handle.write("\n")
                count += 1
    except OSError as exc:
        raise StorageError(f"cannot write prompts to {path}: {exc}") from exc
    return count
