"""Chat-completion access for the generation pipeline.

Two providers share one contract: an OpenAI-compatible HTTP client and a
scripted table for deterministic runs. ``complete_with_retry`` adds backoff
and usage accounting; ``complete_json_list`` adds JSON-array parsing with one
repair re-prompt.
"""

import asyncio
import json
import os
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Literal, Mapping, Optional, Union

import httpx
import yaml
from loguru import logger
from pydantic import BaseModel, Field, field_validator, model_validator

from semcache.embedding import API_KEY_ENV
from semcache.errors import ContractViolationError, LlmParseError, ScriptMissError, SemcacheError
from semcache.transport import RetryPolicy, Sleep, call_with_retry, post_json

REPAIR_INSTRUCTION = "Return ONLY a JSON array of strings."

_decoder = json.JSONDecoder()


class ChatRequest(BaseModel):
    system_prompt: str
    user_prompt: str
    temperature: float = Field(0.0, ge=0.0)
    max_tokens: int = Field(1024, gt=0)
    model_name: str = "default"
    script_key: Optional[str] = Field(
        None, description="Stable key for the scripted provider; ignored by remote providers"
    )

    @field_validator("system_prompt", "user_prompt")
    @classmethod
    def _not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("prompt is empty")
        return value


class UsageLedger(BaseModel):
    """Per-attempt counters: requests_sent == successes + failures."""

    requests_sent: int = 0
    successes: int = 0
    failures: int = 0
    prompt_chars: int = 0
    completion_chars: int = 0

    def record_attempt(self, req: ChatRequest) -> None:
        """Count one request sent, successful or not."""
        self.requests_sent += 1
        self.prompt_chars += len(req.system_prompt) + len(req.user_prompt)

    def record_success(self, text: str) -> None:
        self.successes += 1
        self.completion_chars += len(text)

    def record_failure(self) -> None:
        self.failures += 1


class LlmProvider(ABC):
    name: str

    @abstractmethod
    async def complete(self, req: ChatRequest) -> str:
        """Assistant text for one request; one attempt, no retries."""

    async def aclose(self) -> None:
        return None


class ScriptedProvider(LlmProvider):
    """Returns responses from a keyed table and fails loudly on anything else.

    Lookup uses ``req.script_key`` first, then the exact user prompt. A list
    value is returned as its JSON encoding.
    """

    name = "scripted"

    def __init__(self, table: Mapping[str, Union[str, list]]):
        self.table = dict(table)
        self.calls: list[str] = []

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScriptedProvider":
        """Load a YAML mapping of script key (or exact prompt) to response."""
        table = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(table, dict):
            raise SemcacheError(f"script {path} must be a mapping of key to response")
        return cls(table)

    async def complete(self, req: ChatRequest) -> str:
        for key in (req.script_key, req.user_prompt):
            if key is not None and key in self.table:
                self.calls.append(key)
                value = self.table[key]
                return value if isinstance(value, str) else json.dumps(value)
        raise ScriptMissError(f"no scripted response for key {req.script_key!r}")


class OpenAICompatibleProvider(LlmProvider):
    """POST ``{endpoint}/v1/chat/completions``; reads ``choices[0].message.content``."""

    name = "openai_compatible"

    def __init__(
        self,
        endpoint_url: str,
        api_key: Optional[str] = None,
        timeout_ms: int = 60_000,
        max_in_flight: int = 4,
        client: Optional[httpx.AsyncClient] = None,
    ):
        self.url = f"{endpoint_url.rstrip('/')}/v1/chat/completions"
        self.api_key = api_key if api_key is not None else os.getenv(API_KEY_ENV)
        self.timeout_ms = timeout_ms
        self._client = client or httpx.AsyncClient()
        self._owns_client = client is None
        self._semaphore = asyncio.Semaphore(max_in_flight)

    async def complete(self, req: ChatRequest) -> str:
        payload = {
            "model": req.model_name,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
        }
        async with self._semaphore:
            body = await post_json(
                self._client, self.url, payload, api_key=self.api_key, timeout=self.timeout_ms / 1000
            )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise ContractViolationError(f"malformed chat completion: {e!r}") from e
        if not isinstance(content, str):
            raise ContractViolationError("chat completion content is not text")
        return content

    async def aclose(self) -> None:
        if self._owns_client:
            await self._client.aclose()


class LlmConfig(BaseModel):
    kind: Literal["scripted", "openai_compatible"] = "scripted"
    endpoint_url: Optional[str] = None
    model_name: str = "scripted"
    script_path: Optional[str] = None
    timeout_ms: int = Field(60_000, gt=0)
    max_retries: int = Field(3, ge=0)
    max_in_flight: int = Field(4, gt=0)
    max_tokens: int = Field(1024, gt=0)

    @model_validator(mode="after")
    def _remote_needs_endpoint(self) -> "LlmConfig":
        if self.kind == "openai_compatible" and not self.endpoint_url:
            raise ValueError("openai_compatible provider needs endpoint_url (or SEMCACHE_LLM_URL)")
        return self


def make_llm_provider(config: LlmConfig) -> LlmProvider:
    """Build the provider named by ``config.kind``.

    Args:
        config: The ``llm`` section of the run configuration.

    Returns:
        An OpenAI-compatible HTTP client, or a ScriptedProvider loaded from ``config.script_path``.

    Raises:
        SemcacheError: If the scripted provider has no script file.
    """
    if config.kind == "openai_compatible":
        return OpenAICompatibleProvider(
            config.endpoint_url, timeout_ms=config.timeout_ms, max_in_flight=config.max_in_flight
        )
    if not config.script_path:
        raise SemcacheError("scripted provider needs a script file (--script)")
    return ScriptedProvider.from_file(config.script_path)


async def complete_with_retry(
    provider: LlmProvider,
    req: ChatRequest,
    max_retries: int,
    *,
    ledger: Optional[UsageLedger] = None,
    policy: Optional[RetryPolicy] = None,
    sleep: Sleep = asyncio.sleep,
) -> str:
    """First successful completion; transient failures retry with backoff."""
    ledger = ledger if ledger is not None else UsageLedger()

    async def attempt() -> str:
        ledger.record_attempt(req)
        try:
            text = await provider.complete(req)
        except Exception:
            ledger.record_failure()
            raise
        ledger.record_success(text)
        return text

    return await call_with_retry(
        attempt, max_retries=max_retries, policy=policy, sleep=sleep, label=f"chat {provider.name}"
    )


def parse_json_list(raw: str) -> list[str]:
    """The first JSON array of strings in ``raw``, trimmed, empties dropped.

    Surrounding prose and code fences are skipped over.
    """
    start = raw.find("[")
    while start != -1:
        try:
            value, _ = _decoder.raw_decode(raw, start)
        except json.JSONDecodeError:
            value = None
        if isinstance(value, list) and all(isinstance(item, str) for item in value):
            return [item.strip() for item in value if item.strip()]
        start = raw.find("[", start + 1)
    raise LlmParseError("no JSON array of strings in completion", raw=raw)


async def complete_json_list(
    provider: LlmProvider,
    req: ChatRequest,
    max_retries: int,
    *,
    ledger: Optional[UsageLedger] = None,
    policy: Optional[RetryPolicy] = None,
    sleep: Sleep = asyncio.sleep,
) -> list[str]:
    """complete_with_retry + parse_json_list, with one repair re-prompt on a parse failure."""
    raw = await complete_with_retry(provider, req, max_retries, ledger=ledger, policy=policy, sleep=sleep)
    try:
        return parse_json_list(raw)
    except LlmParseError:
        logger.warning(f"Unparseable completion for {req.script_key or 'request'}; asking for a repair")

    repair = req.model_copy(
        update={
            "user_prompt": f"{req.user_prompt}\n\n{REPAIR_INSTRUCTION}",
            "script_key": f"{req.script_key}/repair" if req.script_key else None,
        }
    )
    raw = await complete_with_retry(provider, repair, max_retries, ledger=ledger, policy=policy, sleep=sleep)
    return parse_json_list(raw)


class LlmGateway:
    """A provider bound to a model name, retry settings and a shared usage ledger."""

    def __init__(
        self,
        provider: LlmProvider,
        model_name: str = "default",
        max_retries: int = 3,
        max_tokens: int = 1024,
        ledger: Optional[UsageLedger] = None,
        policy: Optional[RetryPolicy] = None,
        sleep: Sleep = asyncio.sleep,
    ):
        self.provider = provider
        self.model_name = model_name
        self.max_retries = max_retries
        self.max_tokens = max_tokens
        self.ledger = ledger if ledger is not None else UsageLedger()
        self.policy = policy
        self.sleep = sleep

    @classmethod
    def wrap(cls, provider: Union[LlmProvider, "LlmGateway"]) -> "LlmGateway":
        """Gateways pass through unchanged; bare providers get default settings."""
        return provider if isinstance(provider, LlmGateway) else cls(provider)

    async def ask_list(
        self, system_prompt: str, user_prompt: str, *, temperature: float, script_key: str
    ) -> list[str]:
        """Send one prompt and parse the reply as a JSON list of strings.

        Args:
            system_prompt: Rendered system template.
            user_prompt: Rendered stage template.
            temperature: Sampling temperature for this stage.
            script_key: Lookup key for the scripted provider; ignored by HTTP providers.

        Returns:
            The parsed list, after at most one repair re-prompt.

        Raises:
            LlmParseError: If neither reply holds a JSON array of strings.
            ProviderError: When the provider fails for good.
        """
        req = ChatRequest(
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            temperature=temperature,
            max_tokens=self.max_tokens,
            model_name=self.model_name,
            script_key=script_key,
        )
        return await complete_json_list(
            self.provider,
            req,
            self.max_retries,
            ledger=self.ledger,
            policy=self.policy,
            sleep=self.sleep,
        )
