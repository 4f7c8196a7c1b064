import json
import os
import re
from copy import deepcopy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

from src.errors import ConfigError
from src.logger import get_logger

yaml: YAML = YAML(typ="safe")
yaml.default_flow_style = False


logger = get_logger(__name__)
CONFIGS_PATH = Path.cwd() / "configs.yml"

# ${VAR} or ${VAR:-default}
_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")
SECRET_KEY_PATTERN = re.compile(r"(api_key|token|secret|password)$", re.IGNORECASE)
MASK = "***"


def _interpolate(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if not isinstance(value, str):
        return value

    def _replace(match: re.Match) -> str:
        name, default = match.group(1), match.group(2)
        resolved = os.getenv(name)
        if resolved is None:
            if default is None:
                raise ConfigError(f"environment variable {name} is referenced in the config but not defined")
            return default
        return resolved

    return _ENV_PATTERN.sub(_replace, value)


def load_configs(path: str | Path | None = None) -> dict:
    """Read the YAML config with ``${VAR}`` interpolation. A missing file gives an empty config."""
    path = Path(path) if path is not None else CONFIGS_PATH
    if not path.exists():
        logger.error(f"✖ Config file not found: {path}")
        return {}

    try:
        with open(path, "r", encoding="utf-8") as file:
            data = yaml.load(file) or {}
    except YAMLError as e:
        raise ConfigError(f"error while loading {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    return _interpolate(data)


def apply_overrides(data: dict, overrides: Mapping[str, Any]) -> dict:
    """Set dotted keys (``pipeline.mode``) on a copy of ``data``. None values are skipped."""
    merged = deepcopy(data)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = merged
        *parents, leaf = dotted.split(".")
        for key in parents:
            child = node.get(key)
            if not isinstance(child, dict):
                child = node[key] = {}
            node = child
        node[leaf] = value
    return merged


@dataclass(frozen=True)
class SimulatedSettings:
    drop_count: int = 2
    corrupt_rate: float = 0.0
    compliance: float = 1.0
    preamble: str = ""


@dataclass(frozen=True)
class LLMSettings:
    backend: str = "openai"  # openai | simulated
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-3.5-turbo"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_tokens: int = 512
    timeout: float = 60
    max_attempts: int = 5
    backoff: float = 1.0
    max_in_flight: int = 4
    min_interval: float = 0.0
    simulated: SimulatedSettings = field(default_factory=SimulatedSettings)


@dataclass(frozen=True)
class VerifierSettings:
    backend: str = "http"  # http | oracle
    base_url: str = "http://localhost:8000"
    endpoint: str = "/verify"
    instruction_prefix: str = ""
    api_key_env: str | None = None
    oracle_mode: str = "one_at_a_time"
    oracle_references: str | None = None  # defaults to the input dataset
    timeout: float = 60
    max_attempts: int = 5
    backoff: float = 1.0
    max_in_flight: int = 4
    min_interval: float = 0.0


@dataclass(frozen=True)
class PipelineSettings:
    mode: str = "prompt"
    max_iterations: int = 3
    augment_max_iterations: int = 4
    shots: int = 6
    style: str = "P1"
    policy: str = "default"
    malformed_output_handling: str = "empty_graph"
    parallelism: int = 4
    fail_open: bool = True
    max_failed_ratio: float = 0.1
    overlap_threshold: float = 0.5


@dataclass(frozen=True)
class MetricSettings:
    similarity: str = "token"  # exact | token | remote
    similarity_endpoint: str | None = None
    similarity_api_key_env: str | None = None
    ged_budget: int = 8
    ged_timeout: float | None = None  # seconds per exact GED search


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    log_level: str = "ERROR"
    dataset: str | None = None
    dataset_tag: str = "webnlg"
    demonstrations: str | None = None  # overrides the bundled demos for dataset_tag
    run_dir: str = "runs/latest"
    cache_enabled: bool = True
    cache_dir: str = ".cache/responses"
    llm: LLMSettings = field(default_factory=LLMSettings)
    verifier: VerifierSettings = field(default_factory=VerifierSettings)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    metrics: MetricSettings = field(default_factory=MetricSettings)


def _section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {', '.join(sorted(unknown))}")
    return cls(**data)


def build_run_config(data: dict) -> RunConfig:
    """Map the YAML layout onto a RunConfig."""
    data = data or {}
    llm = dict(data.get("llm") or {})
    simulated = _section(SimulatedSettings, llm.pop("simulated", None), "llm.simulated")
    data_section = data.get("data") or {}
    cache = data.get("cache") or {}
    try:
        return RunConfig(
            seed=int(data.get("seed", 0)),
            log_level=str((data.get("logging") or {}).get("level", "ERROR")),
            dataset=data_section.get("dataset"),
            dataset_tag=data_section.get("dataset_tag", "webnlg"),
            demonstrations=data_section.get("demonstrations"),
            run_dir=(data.get("output") or {}).get("run_dir", "runs/latest"),
            cache_enabled=bool(cache.get("enabled", True)),
            cache_dir=cache.get("dir", ".cache/responses"),
            llm=LLMSettings(**{**asdict(_section(LLMSettings, llm, "llm")), "simulated": simulated}),
            verifier=_section(VerifierSettings, data.get("verifier"), "verifier"),
            pipeline=_section(PipelineSettings, data.get("pipeline"), "pipeline"),
            metrics=_section(MetricSettings, data.get("metrics"), "metrics"),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config value: {e}") from e


def validate(cfg: RunConfig, needs_llm: bool = True, needs_verifier: bool = True) -> RunConfig:
    """Check paths, ranges and credentials before any work starts."""
    if cfg.dataset is not None and not Path(cfg.dataset).exists():
        raise ConfigError(f"dataset not found: {cfg.dataset}")
    if cfg.demonstrations is not None and not Path(cfg.demonstrations).exists():
        raise ConfigError(f"demonstration file not found: {cfg.demonstrations}")

    p = cfg.pipeline
    if p.mode not in ("prompt", "offline"):
        raise ConfigError(f"pipeline.mode must be prompt or offline, got {p.mode!r}")
    if p.max_iterations < 1 or p.augment_max_iterations < 1:
        raise ConfigError("iteration caps must be >= 1")
    for name in ("max_failed_ratio", "overlap_threshold"):
        value = getattr(p, name)
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"pipeline.{name} must be in [0, 1], got {value}")
    sim = cfg.llm.simulated
    for name in ("corrupt_rate", "compliance"):
        value = getattr(sim, name)
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"llm.simulated.{name} must be in [0, 1], got {value}")

    if needs_llm:
        if cfg.llm.backend not in ("openai", "simulated"):
            raise ConfigError(f"llm.backend must be openai or simulated, got {cfg.llm.backend!r}")
        if cfg.llm.backend == "openai" and not os.getenv(cfg.llm.api_key_env):
            raise ConfigError(f"{cfg.llm.api_key_env} is not set; the openai backend needs an API key")
    if needs_verifier:
        if cfg.verifier.backend not in ("http", "oracle"):
            raise ConfigError(f"verifier.backend must be http or oracle, got {cfg.verifier.backend!r}")
        refs = cfg.verifier.oracle_references
        if cfg.verifier.backend == "oracle" and refs is not None and not Path(refs).exists():
            raise ConfigError(f"oracle reference file not found: {refs}")
        if cfg.verifier.backend == "http" and cfg.verifier.api_key_env and not os.getenv(cfg.verifier.api_key_env):
            raise ConfigError(f"{cfg.verifier.api_key_env} is not set")
    if cfg.metrics.ged_timeout is not None and cfg.metrics.ged_timeout <= 0:
        raise ConfigError(f"metrics.ged_timeout must be positive, got {cfg.metrics.ged_timeout}")
    if cfg.metrics.similarity == "remote" and not cfg.metrics.similarity_endpoint:
        raise ConfigError("metrics.similarity is remote but metrics.similarity_endpoint is empty")
    return cfg


def mask_secrets(value: Any) -> Any:
    if isinstance(value, dict):
        return {
            k: (MASK if SECRET_KEY_PATTERN.search(str(k)) and v is not None else mask_secrets(v))
            for k, v in value.items()
        }
    if isinstance(value, list):
        return [mask_secrets(v) for v in value]
    return value


def effective_config(cfg: RunConfig) -> dict:
    """The config as used, secret-looking keys masked. Holds env var names, never their values."""
    return mask_secrets(asdict(cfg))


def write_effective_config(path: str | Path, cfg: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        json.dump(effective_config(cfg), file, indent=2)
