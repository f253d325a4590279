"""
Spark configuration
YAML config file (versioned) + SPARK_* environment overrides + .env support
"""

import os
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml
from dotenv import load_dotenv

from .errors import ConfigError

SCHEMA_VERSION = 1
DEFAULT_CREDENTIAL_VAR = "SPARK_PROVIDER_API_KEY"


@dataclass
class StoreConfig:
    root: str = "./spark_store"


@dataclass
class ProviderConfig:
    """
    Text-generation / embedding provider settings
    kind=stub needs nothing else; kind=http needs endpoint and the name of the env var holding the key
    """
    kind: str = "stub"
    endpoint: Optional[str] = None
    model_name: str = "stub-1"
    auth_env: str = DEFAULT_CREDENTIAL_VAR
    timeout: float = 30.0
    max_attempts: int = 3
    backoff_base: float = 0.5
    max_in_flight: int = 4
    dim: int = 64

    def validate(self, section: str) -> None:
        if self.kind not in ("stub", "http"):
            raise ConfigError(f"{section}.kind must be 'stub' or 'http', got {self.kind!r}")
        if self.kind == "http" and (not self.endpoint or not self.auth_env):
            raise ConfigError(f"{section}: kind=http requires endpoint and auth env var name")
        if self.max_attempts < 1:
            raise ConfigError(f"{section}.max_attempts must be >= 1")
        if self.backoff_base < 0 or self.timeout <= 0:
            raise ConfigError(f"{section}: timeout must be > 0 and backoff_base >= 0")


@dataclass
class GatewayConfig:
    generation: ProviderConfig = field(default_factory=ProviderConfig)
    embedding: ProviderConfig = field(default_factory=ProviderConfig)


@dataclass
class RetrievalConfig:
    fusion_k: int = 10
    channel_k: int = 25
    insight_k: int = 5
    insight_threshold: float = 0.35
    max_problem_bytes: int = 32 * 1024
    excerpt_chars: int = 400


@dataclass
class LearningConfig:
    cluster_threshold: float = 0.80
    supersede_threshold: float = 0.90
    min_support: int = 1
    novelty_floor: float = 0.2
    confidence_prior: int = 2
    extraction_batch: int = 20
    enable_confidence: bool = True
    enable_novelty_filter: bool = True
    enable_supersession: bool = True
    schedule: str = "manual"

    def schedule_interval(self) -> Optional[float]:
        """Seconds between scheduled epochs, None when manual"""
        if self.schedule == "manual":
            return None
        if self.schedule.startswith("interval:"):
            try:
                seconds = float(self.schedule.split(":", 1)[1])
            except ValueError:
                seconds = 0.0
            if seconds > 0:
                return seconds
        raise ConfigError(f"learning.schedule must be 'manual' or 'interval:<seconds>', got {self.schedule!r}")


@dataclass
class ServerConfig:
    transport: str = "stdio"
    host: str = "127.0.0.1"
    port: int = 8765
    max_request_bytes: int = 1024 * 1024
    max_workers: int = 8


@dataclass
class SparkConfig:
    store: StoreConfig = field(default_factory=StoreConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    server: ServerConfig = field(default_factory=ServerConfig)

    def validate(self) -> "SparkConfig":
        self.gateway.generation.validate("gateway.generation")
        self.gateway.embedding.validate("gateway.embedding")
        self.learning.schedule_interval()
        if self.server.transport not in ("stdio", "http"):
            raise ConfigError(f"server.transport must be 'stdio' or 'http', got {self.server.transport!r}")
        if self.retrieval.fusion_k < 1:
            raise ConfigError("retrieval.fusion_k must be >= 1")
        return self


def _leaf_keys(obj: Any, prefix: str = "") -> Dict[str, Tuple[Any, str, type]]:
    """Map dotted key -> (owning dataclass, attribute, declared type)"""
    keys: Dict[str, Tuple[Any, str, type]] = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        dotted = f"{prefix}{f.name}"
        if is_dataclass(value):
            keys.update(_leaf_keys(value, dotted + "."))
        else:
            keys[dotted] = (obj, f.name, type(value) if value is not None else str)
    return keys


def _coerce(key: str, raw: Any, target: type) -> Any:
    if raw is None:
        return None
    try:
        if target is bool:
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target is int and isinstance(raw, float) and not raw.is_integer():
            raise ValueError(raw)
        return target(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key}: cannot interpret {raw!r} as {target.__name__}") from None


def _flatten(data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def env_var_for(key: str) -> str:
    """store.root -> SPARK_STORE_ROOT"""
    return "SPARK_" + key.replace(".", "_").upper()


def load_config(path: Optional[str] = None, env: Optional[Mapping[str, str]] = None) -> SparkConfig:
    """
    Build the effective configuration
    Precedence: defaults < config file < SPARK_* environment variables
    """
    if env is None:
        load_dotenv()
        env = os.environ

    config = SparkConfig()
    keys = _leaf_keys(config)

    path = path or env.get("SPARK_CONFIG")
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            data = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {config_path} is not valid YAML: {e}") from None
        if not isinstance(data, Mapping):
            raise ConfigError(f"config file {config_path} must be a mapping")
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version must be {SCHEMA_VERSION}, got {version!r}")
        for key, raw in _flatten({k: v for k, v in data.items() if k != "schema_version"}).items():
            if key not in keys:
                raise ConfigError(f"unknown config key: {key}")
            owner, attr, target = keys[key]
            setattr(owner, attr, _coerce(key, raw, target))

    for key, (owner, attr, target) in keys.items():
        name = env_var_for(key)
        if name in env and name != "SPARK_CONFIG":
            setattr(owner, attr, _coerce(key, env[name], target))

    return config.validate()
