from __future__ import annotations

import logging
import os
import time
from collections.abc import Callable
from typing import Any

import requests

from ..config import TrackerSettings
from ..errors import NetworkError, NotFound

logger = logging.getLogger(__name__)


class HttpTrackerBase:
    """JSON-over-HTTP tracker client with bearer auth and retrying GETs."""

    name = "http"
    default_base_url = ""

    def __init__(
        self,
        settings: TrackerSettings,
        *,
        session: requests.Session | None = None,
        timeout_sec: float = 30.0,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.settings = settings
        self.base_url = (settings.base_url or self.default_base_url).rstrip("/")
        if not self.base_url:
            raise ValueError(f"{self.name} tracker needs tracker.base_url")
        self.session = session or requests.Session()
        self.timeout_sec = timeout_sec
        self._sleep = sleep

        token = os.environ.get(settings.token_env_var) if settings.token_env_var else None
        self.headers = {"Accept": "application/json", **self.extra_headers()}
        if token:
            self.headers["Authorization"] = f"Bearer {token}"

    def extra_headers(self) -> dict[str, str]:
        return {}

    def get_json(self, path: str, params: dict[str, Any] | None = None) -> Any:
        url = path if path.startswith("http") else f"{self.base_url}/{path.lstrip('/')}"
        attempts = self.settings.max_attempts
        last: str = ""
        for attempt in range(attempts):
            try:
                resp = self.session.get(
                    url, headers=self.headers, params=params, timeout=self.timeout_sec
                )
            except (requests.ConnectionError, requests.Timeout) as e:
                last = f"{type(e).__name__}: {e}"
            else:
                if resp.status_code == 404:
                    raise NotFound(f"{self.name}: {url} not found")
                if resp.status_code < 400:
                    return resp.json()
                if resp.status_code < 500 and resp.status_code != 429:
                    raise RuntimeError(
                        f"command failed: GET {url} -> {resp.status_code}: {resp.text[:500]}"
                    )
                last = f"status {resp.status_code}"

            if attempt + 1 < attempts:
                delay = self.settings.backoff_sec * (2**attempt)
                logger.warning(
                    "GET %s failed (attempt %d/%d): %s; retrying in %.1fs",
                    url,
                    attempt + 1,
                    attempts,
                    last,
                    delay,
                )
                self._sleep(delay)
        raise NetworkError(f"GET {url} failed: {last}", attempts=attempts)
