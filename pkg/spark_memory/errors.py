"""
Spark error hierarchy
Every error raised by the memory service carries the JSON-RPC code it maps to
"""

from typing import Optional


class SparkError(Exception):
    """Base class for all memory service errors"""

    rpc_code: int = -32603

    def __init__(self, message: str, *, stage: Optional[str] = None):
        self.message = message
        self.stage = stage
        super().__init__(message)

    def with_stage(self, stage: str) -> "SparkError":
        """Label the pipeline stage the error surfaced from (first label wins)"""
        if self.stage is None:
            self.stage = stage
        return self

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


class ValidationError(SparkError):
    rpc_code = -32602


class UnknownReferenceError(ValidationError):
    """A referenced recommendation, epoch or insight does not exist"""

    rpc_code = -32004


class NotFoundError(SparkError):
    rpc_code = -32004


class ConflictError(SparkError):
    rpc_code = -32009


class EpochConflictError(ConflictError):
    def __init__(self, message: str = "epoch already in progress", **kwargs):
        super().__init__(message, **kwargs)


class StorageError(SparkError):
    rpc_code = -32060


class ProviderError(SparkError):
    """Upstream text-generation or embedding provider failed"""

    rpc_code = -32050

    def __init__(self, message: str, *, attempts: int = 0, **kwargs):
        self.attempts = attempts
        super().__init__(message, **kwargs)


class ConfigError(SparkError):
    rpc_code = -32051


class TemplateError(ValidationError):
    pass


class JudgeParseError(ValidationError):
    """Judge output had no recognizable (or an ambiguous) score or band"""

    def __init__(self, message: str, *, raw_text: str = "", **kwargs):
        self.raw_text = raw_text
        super().__init__(message, **kwargs)
