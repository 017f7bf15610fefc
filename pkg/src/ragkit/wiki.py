"""MediaWiki API client with an on-disk response cache.

Every response is cached as one JSON file keyed by (language, request kind,
query), so a directory of cached responses doubles as a test fixture: with
``offline=True`` the client never opens a socket and raises on a cache miss
instead.  Live requests are rate-limited and retried with backoff.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
import unicodedata
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import requests

__all__ = ["WikiError", "WikiClient", "normalize_title", "cache_key"]

logger = logging.getLogger(__name__)

_DEFAULT_BASE = "https://{lang}.wikipedia.org/w/api.php"
_DEFAULT_PAGE = "https://{lang}.wikipedia.org/wiki/{title}"
_USER_AGENT = "ragkit/0.1 (research toolkit; offline-cached)"


class WikiError(RuntimeError):
    """Raised on unrecoverable API failures or offline cache misses."""


def normalize_title(text: str) -> str:
    """Casefold and strip diacritics, for accent-insensitive title matching."""
    decomposed = unicodedata.normalize("NFKD", text.casefold())
    return "".join(ch for ch in decomposed if not unicodedata.combining(ch))


def cache_key(language: str, kind: str, query: str) -> str:
    """Stable file-name key for one cached request."""
    payload = json.dumps([language, kind, query], ensure_ascii=False)
    return hashlib.sha1(payload.encode("utf-8")).hexdigest()


@dataclass
class _CachedResponse:
    body: dict
    fetched_at: str


class WikiClient:
    """Search and article-extract access to a MediaWiki API.

    Args:
        cache_dir: Directory of cached responses; created on demand.  Without
            a cache directory every request goes to the network.
        offline: Never touch the network; a cache miss raises
            :class:`WikiError` naming the missed query.
        base_url: API URL template with a ``{lang}`` placeholder.
        page_url: Article URL template with ``{lang}`` and ``{title}``.
        min_interval_s: Minimum delay between live requests.
        timeout_s: Per-request timeout.
        retries: Extra attempts after a failed request.
        transport: Test hook; a callable ``(url, params, headers, timeout_s)
            -> (status, dict)`` replacing the HTTP layer.
    """

    def __init__(
        self,
        cache_dir: str | Path | None = None,
        offline: bool = False,
        base_url: str = _DEFAULT_BASE,
        page_url: str = _DEFAULT_PAGE,
        min_interval_s: float = 0.1,
        timeout_s: float = 15.0,
        retries: int = 2,
        transport: Callable | None = None,
    ) -> None:
        if offline and cache_dir is None:
            raise WikiError("offline mode needs a cache_dir")
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.offline = offline
        self.base_url = base_url
        self.page_url = page_url
        self.min_interval_s = min_interval_s
        self.timeout_s = timeout_s
        self.retries = retries
        self._transport = transport or self._http_get
        self._session = requests.Session()
        self._lock = threading.Lock()
        self._last_request = 0.0

    # -- HTTP layer ---------------------------------------------------------

    def _http_get(self, url: str, params: dict, headers: dict, timeout_s: float):
        response = self._session.get(url, params=params, headers=headers, timeout=timeout_s)
        status = response.status_code
        try:
            body = response.json()
        except ValueError as exc:
            raise WikiError(
                f"non-JSON response (status {status}) from {url}: {response.text[:200]!r}"
            ) from exc
        return status, body

    def _throttle(self) -> None:
        with self._lock:
            wait = self._last_request + self.min_interval_s - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()

    def _request(self, language: str, kind: str, query: str, params: dict) -> _CachedResponse:
        cached = self._cache_read(language, kind, query)
        if cached is not None:
            return cached
        if self.offline:
            raise WikiError(
                f"offline cache miss for {kind} {query!r} ({language}); "
                f"cache_dir={self.cache_dir}"
            )
        url = self.base_url.format(lang=language)
        headers = {"User-Agent": _USER_AGENT}
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            self._throttle()
            try:
                status, body = self._transport(url, params, headers, self.timeout_s)
                if status == 429 or status >= 500:
                    raise WikiError(f"status {status} for {kind} {query!r}")
                if status != 200:
                    raise WikiError(
                        f"status {status} for {kind} {query!r}: {json.dumps(body)[:200]}"
                    )
                response = _CachedResponse(
                    body=body, fetched_at=datetime.now(timezone.utc).isoformat()
                )
                self._cache_write(language, kind, query, response)
                return response
            except (requests.Timeout, requests.ConnectionError, WikiError) as exc:
                last_error = exc
                if attempt < self.retries:
                    backoff = 0.5 * (attempt + 1)
                    logger.warning(
                        "wiki request failed (attempt %d/%d), backing off %.1fs: %s",
                        attempt + 1,
                        self.retries + 1,
                        backoff,
                        exc,
                    )
                    time.sleep(backoff)
        raise WikiError(
            f"wiki request failed after {self.retries + 1} attempts: {last_error}"
        )

    # -- cache layer ---------------------------------------------------------

    def _cache_path(self, language: str, kind: str, query: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{cache_key(language, kind, query)}.json"

    def _cache_read(self, language: str, kind: str, query: str) -> _CachedResponse | None:
        path = self._cache_path(language, kind, query)
        if path is None or not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            stored = json.load(fh)
        return _CachedResponse(body=stored["response"], fetched_at=stored["fetched_at"])

    def _cache_write(
        self, language: str, kind: str, query: str, response: _CachedResponse
    ) -> None:
        path = self._cache_path(language, kind, query)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        stored = {
            "language": language,
            "kind": kind,
            "query": query,
            "fetched_at": response.fetched_at,
            "response": response.body,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(stored, fh, ensure_ascii=False, indent=1)
            fh.write("\n")

    @staticmethod
    def write_fixture(
        cache_dir: str | Path, language: str, kind: str, query: str, body: dict,
        fetched_at: str = "1970-01-01T00:00:00+00:00",
    ) -> Path:
        """Write a cache entry directly; used to build offline fixtures."""
        path = Path(cache_dir) / f"{cache_key(language, kind, query)}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        stored = {
            "language": language,
            "kind": kind,
            "query": query,
            "fetched_at": fetched_at,
            "response": body,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(stored, fh, ensure_ascii=False, indent=1)
            fh.write("\n")
        return path

    # -- public API ----------------------------------------------------------

    def search(self, query: str, language: str = "fr", limit: int = 10) -> list[str]:
        """Full-text search; returns page titles in relevance order."""
        params = {
            "action": "query",
            "format": "json",
            "list": "search",
            "srsearch": query,
            "srlimit": limit,
            "srprop": "",
        }
        response = self._request(language, "search", f"{query}|{limit}", params)
        try:
            hits = response.body["query"]["search"]
            return [hit["title"] for hit in hits]
        except (KeyError, TypeError) as exc:
            raise WikiError(
                f"malformed search response for {query!r}: "
                f"{json.dumps(response.body)[:200]}"
            ) from exc

    def page_extract(self, title: str, language: str = "fr") -> tuple[str, str]:
        """Plain-text extract of one page.

        Returns:
            ``(text, fetched_at)``; ``text`` is empty when the page has no
            extract (missing page, redirect loop, empty article).
        """
        params = {
            "action": "query",
            "format": "json",
            "prop": "extracts",
            "explaintext": 1,
            "redirects": 1,
            "titles": title,
        }
        response = self._request(language, "extract", title, params)
        try:
            pages = response.body["query"]["pages"]
            first = next(iter(pages.values()))
            return first.get("extract", "") or "", response.fetched_at
        except (KeyError, TypeError, StopIteration) as exc:
            raise WikiError(
                f"malformed extract response for {title!r}: "
                f"{json.dumps(response.body)[:200]}"
            ) from exc

    def page_url_for(self, title: str, language: str = "fr") -> str:
        """Canonical article URL for a page title."""
        return self.page_url.format(lang=language, title=title.replace(" ", "_"))
