import os
import threading
import time

import httpx
from tenacity import (
    Retrying,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from src.errors import AuthError, BackendTimeout, ProtocolError, RateLimited
from src.logger import get_logger

logger = get_logger(__name__)


class RetryableStatus(Exception):
    """429 or 5xx answer, raised inside the retry loop so tenacity tries again."""

    def __init__(self, response: httpx.Response):
        self.response = response
        super().__init__(f"HTTP {response.status_code}")


class HttpService:
    """
    Shared plumbing for the remote backends: one httpx client, retries with
    exponential backoff, a cap on requests in flight and a minimum spacing
    between requests.

    The credential is read from ``api_key_env`` and only ever placed in the
    Authorization header; it is never logged.
    """

    def __init__(
        self,
        base_url: str,
        api_key_env: str | None = None,
        require_key: bool = False,
        timeout: float = 60,
        max_attempts: int = 5,
        backoff: float = 1.0,
        max_in_flight: int = 4,
        min_interval: float = 0.0,
        transport: httpx.BaseTransport | None = None,
    ):
        api_key = os.getenv(api_key_env, None) if api_key_env else None
        if require_key and not api_key:
            logger.error(f"✖ {api_key_env} not defined")
            raise AuthError(f"{api_key_env} not defined")

        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.base_url = base_url
        self.client = httpx.Client(
            base_url=base_url,
            timeout=httpx.Timeout(timeout, connect=10),
            headers=headers,
            transport=transport,
        )
        self._retrying = Retrying(
            stop=stop_after_attempt(max_attempts),
            wait=wait_exponential(multiplier=backoff, min=backoff, max=60 * backoff),
            retry=retry_if_exception_type((RetryableStatus, httpx.TransportError)),
            reraise=True,
        )
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._rate_lock = threading.Lock()
        self._count_lock = threading.Lock()
        self._next_start = 0.0
        self.min_interval = min_interval
        self.call_count = 0  # network requests, retries included

    def _wait_for_turn(self) -> None:
        with self._rate_lock:
            now = time.monotonic()
            start = max(now, self._next_start)
            self._next_start = start + self.min_interval
        if start > now:
            time.sleep(start - now)

    def _try_post(self, endpoint: str, payload: dict) -> dict:
        self._wait_for_turn()
        with self._slots:
            with self._count_lock:
                self.call_count += 1
            response = self.client.post(endpoint, json=payload)

        if response.status_code in (401, 403):
            raise AuthError(f"{self.base_url}{endpoint} rejected the credential (HTTP {response.status_code})")
        if response.status_code == 429 or response.status_code >= 500:
            logger.warning(f"HTTP {response.status_code} from {endpoint}, retrying")
            raise RetryableStatus(response)
        if response.status_code != 200:
            raise ProtocolError(f"HTTP {response.status_code} from {endpoint}: {response.text[:200]}")
        try:
            return response.json()
        except ValueError as e:
            raise ProtocolError(f"response from {endpoint} is not valid JSON") from e

    def post(self, endpoint: str, payload: dict) -> dict:
        """POST with retries. Maps every failure onto the BackendError family."""
        try:
            return self._retrying.copy()(self._try_post, endpoint, payload)
        except RetryableStatus as e:
            if e.response.status_code == 429:
                raise RateLimited(f"{endpoint} still rate limited after retries") from e
            raise ProtocolError(f"{endpoint} answered HTTP {e.response.status_code} after retries") from e
        except httpx.TimeoutException as e:
            raise BackendTimeout(f"{endpoint} timed out: {e}") from e
        except httpx.HTTPError as e:
            raise ProtocolError(f"request to {endpoint} failed: {e}") from e

    def close(self) -> None:
        self.client.close()
