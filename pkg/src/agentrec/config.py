"""Engine configuration: TOML file, AGENTREC_* environment overrides, CLI flags.

Precedence, lowest to highest: built-in defaults, config file, environment,
explicit overrides (CLI flags). Nested sections map to env names as
``AGENTREC_<SECTION>_<FIELD>``, e.g. ``AGENTREC_SCORE_P=150``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .embedding import EmbeddingProviderSpec, RephraseSpec
from .errors import InvalidConfigurationError
from .scoring import ScoreConfig

ENV_PREFIX = "AGENTREC_"

_TOP_FIELDS = {"cache_path": str, "listen_address": str, "default_k": int}
_SECTION_FIELDS: dict[str, dict[str, type]] = {
    "provider": {"kind": str, "dim": int, "seed": int, "endpoint": str, "timeout_ms": float},
    "rephrase": {"kind": str, "endpoint": str, "timeout_ms": float},
    "score": {"kind": str, "p": float, "epsilon": float},
}


@dataclass(frozen=True)
class EngineConfig:
    """Everything the service and CLI need to run the engine."""

    provider: EmbeddingProviderSpec = EmbeddingProviderSpec()
    rephrase: RephraseSpec = RephraseSpec()
    score: ScoreConfig = ScoreConfig()
    cache_path: str | None = None
    listen_address: str = "127.0.0.1:8080"
    default_k: int = 3

    def __post_init__(self):
        if self.default_k < 1:
            raise InvalidConfigurationError("default_k must be >= 1")
        host, _, port = self.listen_address.rpartition(":")
        if not host or not port.isdigit():
            raise InvalidConfigurationError(
                f"listen_address must be host:port, got {self.listen_address!r}"
            )

    @property
    def host(self) -> str:
        return self.listen_address.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.listen_address.rpartition(":")[2])


def _coerce(value: Any, target: type, where: str) -> Any:
    if target is str:
        return str(value)
    try:
        if target is int:
            if isinstance(value, str):
                return int(value, 0)
            if isinstance(value, float) and value != int(value):
                raise ValueError(value)
            return int(value)
        return float(value)
    except (TypeError, ValueError) as exc:
        raise InvalidConfigurationError(f"{where}: cannot parse {value!r} as {target.__name__}") from exc


def _read_file(path) -> dict:
    try:
        with Path(path).open("rb") as handle:
            data = tomllib.load(handle)
    except OSError as exc:
        raise InvalidConfigurationError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfigurationError(f"config file {path} is not valid TOML: {exc}") from exc
    out: dict = {}
    for key, value in data.items():
        if key in _TOP_FIELDS:
            out[key] = _coerce(value, _TOP_FIELDS[key], key)
        elif key in _SECTION_FIELDS:
            if not isinstance(value, Mapping):
                raise InvalidConfigurationError(f"config section {key!r} must be a table")
            section = {}
            for field, raw in value.items():
                if field not in _SECTION_FIELDS[key]:
                    raise InvalidConfigurationError(f"unknown config key {key}.{field}")
                section[field] = _coerce(raw, _SECTION_FIELDS[key][field], f"{key}.{field}")
            out[key] = section
        else:
            raise InvalidConfigurationError(f"unknown config key {key!r}")
    return out


def _read_env(env: Mapping[str, str]) -> dict:
    out: dict = {}
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX) :].lower()
        section, _, field = rest.partition("_")
        if rest in _TOP_FIELDS:
            out[rest] = _coerce(raw, _TOP_FIELDS[rest], key)
        elif section in _SECTION_FIELDS and field in _SECTION_FIELDS[section]:
            out.setdefault(section, {})[field] = _coerce(raw, _SECTION_FIELDS[section][field], key)
        elif rest in ("default_k", "cache_path", "listen_address"):
            out[rest] = _coerce(raw, _TOP_FIELDS[rest], key)
        else:
            raise InvalidConfigurationError(f"unrecognized environment variable {key}")
    return out


def _merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def load_config(
    path=None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> EngineConfig:
    """Assemble an :class:`EngineConfig` from file, environment, and overrides.

    ``overrides`` uses the same nested shape the file produces, e.g.
    ``{"default_k": 5, "score": {"p": 150.0}}``.
    """
    merged: dict = {}
    if path is not None:
        merged = _merge(merged, _read_file(path))
    merged = _merge(merged, _read_env(os.environ if env is None else env))
    if overrides:
        merged = _merge(merged, {k: v for k, v in overrides.items() if v is not None})

    try:
        provider = EmbeddingProviderSpec(**merged.get("provider", {}))
        rephrase = RephraseSpec(**merged.get("rephrase", {}))
        score = ScoreConfig(**merged.get("score", {}))
    except TypeError as exc:
        raise InvalidConfigurationError(f"bad config section: {exc}") from exc
    return EngineConfig(
        provider=provider,
        rephrase=rephrase,
        score=score,
        cache_path=merged.get("cache_path"),
        listen_address=merged.get("listen_address", "127.0.0.1:8080"),
        default_k=merged.get("default_k", 3),
    )


_TOP_FIELDS_DOC = """Top-level keys: cache_path, listen_address, default_k.
Sections: [provider] kind/dim/seed/endpoint/timeout_ms,
[rephrase] kind/endpoint/timeout_ms, [score] kind/p/epsilon."""
