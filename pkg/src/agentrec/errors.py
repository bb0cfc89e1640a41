"""Exception hierarchy with stable machine-readable error codes.

Every error that can cross the CLI or HTTP boundary carries a ``code``
string that clients may dispatch on; messages are free-form and may change.
"""

from __future__ import annotations


class AgentRecError(Exception):
    """Base class for all engine errors."""

    code = "internal_error"


class ContractViolationError(AgentRecError):
    """A caller broke an API precondition (e.g. mismatched dimensions)."""

    code = "contract_violation"


class InvalidInputError(AgentRecError):
    """Input data is structurally invalid for the requested operation."""

    code = "invalid_input"


class InvalidPromptError(AgentRecError):
    """Prompt text is empty or unusable after standardization."""

    code = "invalid_prompt"


class InvalidEmbeddingError(AgentRecError):
    """A vector cannot be turned into a valid unit embedding."""

    code = "invalid_embedding"


class InvalidConfigurationError(AgentRecError):
    """Configuration values are inconsistent or out of range."""

    code = "invalid_configuration"


class ProviderError(AgentRecError):
    """A remote provider (embedding, rephrase, logits) failed."""

    code = "provider_error"


class GenerationError(AgentRecError):
    """Prompt generation aborted; carries partial output for diagnostics."""

    code = "generation_error"

    def __init__(self, message: str, partial_text: str = ""):
        super().__init__(message)
        self.partial_text = partial_text


class CorpusBuildError(AgentRecError):
    """Building an agent corpus failed; message names the failed batch."""

    code = "corpus_build_failed"


class StorageError(AgentRecError):
    """Filesystem I/O failed; message includes the path."""

    code = "io_error"


class CacheError(AgentRecError):
    """Base class for corpus-cache format errors."""

    code = "cache_error"


class CacheMagicError(CacheError):
    code = "cache_bad_magic"


class CacheVersionError(CacheError):
    code = "cache_unsupported_version"


class CacheTruncatedError(CacheError):
    code = "cache_truncated"


class CacheChecksumError(CacheError):
    code = "cache_bad_checksum"


class CacheNormError(CacheError):
    code = "cache_norm_violation"


class NumericalError(AgentRecError):
    """An iterative numerical routine failed to converge."""

    code = "numerical_error"


class StartupError(AgentRecError):
    """The service could not start (bind failure, unreadable cache)."""

    code = "startup_failed"
