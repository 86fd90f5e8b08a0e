"""HTTP posting and retry-with-backoff shared by every remote provider."""

import asyncio
from typing import Any, Awaitable, Callable, Optional, TypeVar

import httpx
from loguru import logger
from pydantic import BaseModel, Field
from tenacity import (
    AsyncRetrying,
    RetryCallState,
    RetryError,
    retry_if_exception,
    stop_after_attempt,
    wait_random_exponential,
)

from semcache.errors import ContractViolationError, ProviderError, RetriesExhaustedError

T = TypeVar("T")
Sleep = Callable[[float], Awaitable[None]]


class RetryPolicy(BaseModel):
    """Exponential backoff with full jitter: wait ~ U(0, min(cap, base * factor**n))."""

    base_delay: float = Field(0.5, ge=0.0, description="Seconds; upper bound of the first wait")
    factor: float = Field(2.0, ge=1.0)
    max_delay: float = Field(30.0, ge=0.0)


def is_transient(exc: BaseException) -> bool:
    """Only ProviderErrors flagged transient are retried."""
    return isinstance(exc, ProviderError) and exc.transient


def _log_retry(label: str) -> Callable[[RetryCallState], None]:
    def before_sleep(state: RetryCallState) -> None:
        exc = state.outcome.exception() if state.outcome else None
        wait = state.next_action.sleep if state.next_action else 0.0
        logger.warning(f"{label}: attempt {state.attempt_number} failed ({exc}); retrying in {wait:.2f}s")

    return before_sleep


async def call_with_retry(
    fn: Callable[[], Awaitable[T]],
    *,
    max_retries: int,
    policy: Optional[RetryPolicy] = None,
    sleep: Sleep = asyncio.sleep,
    label: str = "request",
) -> T:
    """Run ``fn`` until it succeeds, retrying transient ProviderErrors.

    Non-transient errors propagate immediately. When retries run out a
    RetriesExhaustedError carrying the attempt count is raised.
    """
    policy = policy or RetryPolicy()
    attempts = 0

    async def attempt() -> T:
        nonlocal attempts
        attempts += 1
        return await fn()

    retryer = AsyncRetrying(
        stop=stop_after_attempt(max_retries + 1),
        wait=wait_random_exponential(
            multiplier=policy.base_delay, exp_base=policy.factor, max=policy.max_delay
        ),
        retry=retry_if_exception(is_transient),
        sleep=sleep,
        before_sleep=_log_retry(label),
    )
    try:
        return await retryer(attempt)
    except RetryError as e:
        last = e.last_attempt.exception()
        raise RetriesExhaustedError(
            f"{label} failed after {attempts} attempts: {last}",
            status_code=getattr(last, "status_code", None),
            transient=True,
            attempts=attempts,
        ) from last
    except ProviderError as e:
        e.attempts = attempts
        raise


async def post_json(
    client: httpx.AsyncClient,
    url: str,
    payload: dict,
    *,
    api_key: Optional[str] = None,
    timeout: Optional[float] = None,
) -> Any:
    """POST a JSON body and return the decoded JSON reply, mapping failures to ProviderError."""
    headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
    try:
        response = await client.post(url, json=payload, headers=headers, timeout=timeout)
    except httpx.TransportError as e:
        raise ProviderError(f"transport error calling {url}: {e!r}", transient=True) from e

    if response.status_code >= 400:
        status = response.status_code
        raise ProviderError(
            f"{url} returned HTTP {status}: {response.text[:200]}",
            status_code=status,
            transient=status == 429 or status >= 500,
        )
    try:
        return response.json()
    except ValueError as e:
        raise ContractViolationError(f"{url} returned a non-JSON body") from e
