"""Run configuration: hydra defaults, a YAML override file, environment, then flags.

The resolved tree is validated into ``RunConfig`` and echoed into every
artifact a command writes. ``SEMCACHE_API_KEY`` is read by the providers
themselves and never appears here.
"""

import os
import sys
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

from hydra import compose, initialize_config_dir
from loguru import logger
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException
from pydantic import BaseModel, Field, ValidationError

from semcache.cache import CacheConfig, ScorerConfig, SemanticCache, SimilarityScorer, make_scorer
from semcache.embedding import Embedder, EmbeddingProviderConfig, make_embedder
from semcache.errors import ConfigError
from semcache.evaluation import InsertPolicy, OrderPolicy
from semcache.llm import LlmConfig, LlmGateway, make_llm_provider
from semcache.pipeline import PipelineConfig
from semcache.templates import CONF_DIR
from semcache.transport import RetryPolicy

CONFIG_NAME = "semcache"

ENV_OVERRIDES = {
    "SEMCACHE_LLM_URL": "llm.endpoint_url",
    "SEMCACHE_EMBEDDING_URL": "embedding.endpoint_url",
    "SEMCACHE_SCORER_URL": "scorer.endpoint_url",
}

LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {name}:{function} - <level>{message}</level>"


class CacheSettings(BaseModel):
    threshold: float = Field(0.9, ge=0.0, le=1.0)
    top_k_candidates: int = Field(5, ge=1)
    capacity: Optional[int] = Field(None, gt=0)


class EvaluationSettings(BaseModel):
    order_policy: OrderPolicy = "seeded_shuffle"
    seed: int = Field(0, ge=0, lt=2**64)
    insert_policy: InsertPolicy = "miss"


class RunConfig(BaseModel):
    project_name: str = "semcache"
    verbose: bool = False
    embedding: EmbeddingProviderConfig = Field(default_factory=EmbeddingProviderConfig)
    llm: LlmConfig = Field(default_factory=LlmConfig)
    scorer: ScorerConfig = Field(default_factory=ScorerConfig)
    cache: CacheSettings = Field(default_factory=CacheSettings)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    evaluation: EvaluationSettings = Field(default_factory=EvaluationSettings)
    retry: RetryPolicy = Field(
        default_factory=RetryPolicy, description="Backoff shared by the LLM, embedding and scorer clients"
    )

    def echo(self) -> dict:
        """JSON-safe dump written into manifests and reports."""
        return self.model_dump(mode="json")


def load_config(
    config_file: Optional[Union[str, Path]] = None,
    groups: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    dotlist: Sequence[str] = (),
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Resolve packaged defaults < config file < environment < flags.

    Args:
        config_file: YAML file whose keys must already exist in the defaults.
        groups: Config group choices, e.g. ``{"llm": "openai"}``.
        overrides: Dotted key -> value from typed command-line flags; None values are ignored.
        dotlist: Raw ``key=value`` strings from ``--set``.
        environ: Environment to read URL overrides from; defaults to ``os.environ``.

    Returns:
        The validated RunConfig.

    Raises:
        ConfigError: On an unknown key, an unreadable file or a value out of range.
    """
    environ = os.environ if environ is None else environ
    group_overrides = [f"{group}={choice}" for group, choice in (groups or {}).items() if choice]
    try:
        with initialize_config_dir(version_base="1.3", config_dir=str(CONF_DIR), job_name=CONFIG_NAME):
            cfg: DictConfig = compose(config_name=CONFIG_NAME, overrides=group_overrides)
        OmegaConf.set_struct(cfg, True)

        if config_file is not None:
            cfg = OmegaConf.merge(cfg, OmegaConf.load(config_file))

        for variable, key in ENV_OVERRIDES.items():
            if environ.get(variable):
                OmegaConf.update(cfg, key, environ[variable])

        for key, value in (overrides or {}).items():
            if value is not None:
                OmegaConf.update(cfg, key, list(value) if isinstance(value, tuple) else value)

        if dotlist:
            cfg = OmegaConf.merge(cfg, OmegaConf.from_dotlist(list(dotlist)))

        resolved = OmegaConf.to_container(cfg, resolve=True)
    except (OmegaConfBaseException, OSError) as e:
        raise ConfigError(f"cannot resolve configuration: {e}") from e

    try:
        return RunConfig.model_validate(resolved)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid configuration at {location or 'root'}: {first['msg']}") from e


def configure_logging(verbose: bool = False) -> None:
    """Send diagnostics to stderr; stdout stays free for summaries."""
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO", format=LOG_FORMAT, colorize=None)


def build_embedder(config: RunConfig) -> Embedder:
    """Embedder from the ``embedding`` group; remote clients get the shared backoff."""
    if config.embedding.kind == "remote":
        return make_embedder(config.embedding, policy=config.retry)
    return make_embedder(config.embedding)


def build_llm(config: RunConfig) -> LlmGateway:
    """LLM provider wrapped with the model, retry budget and shared backoff."""
    return LlmGateway(
        make_llm_provider(config.llm),
        model_name=config.llm.model_name,
        max_retries=config.llm.max_retries,
        max_tokens=config.llm.max_tokens,
        policy=config.retry,
    )


def build_scorer(config: RunConfig) -> SimilarityScorer:
    """Scorer from the ``scorer`` section; a remote one gets the shared backoff."""
    return make_scorer(config.scorer, policy=config.retry)


def build_cache(
    config: RunConfig,
    embedder: Embedder,
    scorer: SimilarityScorer,
    threshold: Optional[float] = None,
) -> SemanticCache:
    """A fresh cache; ``threshold`` overrides the configured one (used by sweeps)."""
    return SemanticCache(
        embedder,
        CacheConfig(
            threshold=config.cache.threshold if threshold is None else threshold,
            top_k_candidates=config.cache.top_k_candidates,
            capacity=config.cache.capacity,
            scorer=scorer,
        ),
    )

