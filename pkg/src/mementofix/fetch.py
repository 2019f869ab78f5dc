"""HTTP retrieval with cache avoidance and dynamism probing.

The fetcher never trusts a cached response when bypass is enabled: it retries
with no-cache request headers and, only as a last resort, a throwaway query
parameter (which changes the requested URI and is therefore flagged on the
result).  Stability probing issues exactly two requests and compares body
bytes; headers like Date always vary and must not trip dynamism.
"""

from __future__ import annotations

import time
import uuid
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from urllib.parse import urljoin, urlsplit

import requests

from .protocol import (
    LinkRelationSet,
    MalformedDatetime,
    MalformedLinkHeader,
    MementoUri,
    build_raw_uri,
    parse_http_datetime,
    parse_link_header,
)

MAX_REDIRECTS = 5
_REDIRECT_STATUSES = {301, 302, 303, 307, 308}
_CACHE_RETRY_HARD_CAP = 10
_BYPASS_PARAM = "_mfx_nocache"


class CacheStatus(Enum):
    HIT = "hit"
    MISS = "miss"
    ABSENT = "absent"


class Stability(Enum):
    STABLE = "stable"
    DYNAMIC = "dynamic"
    UNPROBED = "unprobed"


class FetchErrorKind(Enum):
    TIMEOUT = "timeout"
    CONNECTION_FAILED = "connection-failed"
    TOO_MANY_CACHE_HITS = "too-many-cache-hits"
    NON_HTTP_SCHEME = "non-http-scheme"


class FetchError(Exception):
    def __init__(self, uri: str, kind: FetchErrorKind, detail: str = ""):
        super().__init__(f"{kind.value}: {uri} {detail}".strip())
        self.uri = uri
        self.kind = kind
        self.detail = detail


@dataclass(frozen=True)
class FetchPolicy:
    cache_retry_limit: int = 3
    cache_bypass: bool = True
    stability_probe: bool = False
    stability_delay_ms: int = 1000
    request_timeout_ms: int = 10_000
    user_agent: str = "mementofix/0.1"

    def __post_init__(self) -> None:
        if not 0 <= self.cache_retry_limit <= _CACHE_RETRY_HARD_CAP:
            raise ValueError(
                f"cache_retry_limit must be 0..{_CACHE_RETRY_HARD_CAP}"
            )
        if self.stability_delay_ms < 0:
            raise ValueError("stability_delay_ms must be >= 0")


@dataclass(frozen=True)
class RedirectHop:
    status: int
    location: str          # Location header verbatim, possibly relative
    resolved: str          # absolute URI the chain continued with
    scheme_change: bool = False


@dataclass(frozen=True)
class FetchResult:
    requested_uri: str
    final_uri: str
    status: int
    headers: dict[str, str]
    memento_datetime: datetime | None
    location: str | None               # first 3xx hop's Location, verbatim
    content_type: str | None
    page_cache: CacheStatus
    link_relations: LinkRelationSet
    body: bytes
    fetched_at: datetime
    stability: Stability = Stability.UNPROBED
    hops: tuple[RedirectHop, ...] = ()
    raw_used: bool = False
    bypass_query_used: bool = False
    header_warnings: tuple[str, ...] = ()

    def media_type(self) -> str:
        return (self.content_type or "").split(";")[0].strip().lower()

    def is_success(self) -> bool:
        return 200 <= self.status < 300


def _require_http(uri: str) -> None:
    scheme = urlsplit(uri).scheme
    if scheme not in ("http", "https"):
        raise FetchError(uri, FetchErrorKind.NON_HTTP_SCHEME, f"scheme {scheme!r}")


def _single_request(
    session: requests.Session,
    uri: str,
    policy: FetchPolicy,
    extra_headers: dict[str, str],
    method: str = "GET",
) -> FetchResult:
    """One request/redirect-chain cycle, no cache handling."""
    timeout = policy.request_timeout_ms / 1000.0
    headers = {"User-Agent": policy.user_agent, **extra_headers}
    hops: list[RedirectHop] = []
    current = uri
    first_location: str | None = None
    try:
        for _ in range(MAX_REDIRECTS + 1):
            resp = session.request(
                method, current, headers=headers, timeout=timeout,
                allow_redirects=False,
            )
            if resp.status_code in _REDIRECT_STATUSES and "location" in resp.headers:
                loc = resp.headers["location"]
                if first_location is None:
                    first_location = loc
                resolved = urljoin(current, loc)
                scheme_change = urlsplit(resolved).scheme != urlsplit(current).scheme
                hops.append(RedirectHop(
                    status=resp.status_code,
                    location=loc,
                    resolved=resolved,
                    scheme_change=scheme_change,
                ))
                if scheme_change:
                    break  # cross-scheme hops are surfaced, never chased
                if len(hops) > MAX_REDIRECTS:
                    break
                current = resolved
                continue
            break
    except requests.exceptions.Timeout as exc:
        raise FetchError(uri, FetchErrorKind.TIMEOUT, str(exc)) from exc
    except requests.exceptions.RequestException as exc:
        raise FetchError(uri, FetchErrorKind.CONNECTION_FAILED, str(exc)) from exc

    lower_headers = {k.lower(): v for k, v in resp.headers.items()}

    warnings: list[str] = []
    memento_dt = None
    if "memento-datetime" in lower_headers:
        try:
            memento_dt = parse_http_datetime(lower_headers["memento-datetime"])
        except MalformedDatetime:
            warnings.append("memento-datetime unparseable")

    relations = LinkRelationSet()
    if "link" in lower_headers:
        try:
            relations = parse_link_header(lower_headers["link"])
        except MalformedLinkHeader:
            warnings.append("link header unparseable")

    cache_value = lower_headers.get("x-page-cache")
    if cache_value is None:
        page_cache = CacheStatus.ABSENT
    elif cache_value.strip().upper() == "HIT":
        page_cache = CacheStatus.HIT
    else:
        page_cache = CacheStatus.MISS

    return FetchResult(
        requested_uri=uri,
        final_uri=current,
        status=resp.status_code,
        headers=lower_headers,
        memento_datetime=memento_dt,
        location=first_location,
        content_type=lower_headers.get("content-type"),
        page_cache=page_cache,
        link_relations=relations,
        body=resp.content if method != "HEAD" else b"",
        fetched_at=datetime.now(timezone.utc),
        hops=tuple(hops),
        header_warnings=tuple(warnings),
    )


def fetch_resource(
    uri: str,
    policy: FetchPolicy,
    session: requests.Session | None = None,
) -> FetchResult:
    """Retrieve one resource, retrying past cache HITs when bypass is on.

    Retries send Cache-Control/Pragma no-cache; the final retry additionally
    appends a unique throwaway query parameter, since that changes the
    requested URI and must stay a last resort.  Raises TooManyCacheHits when
    every attempt came from the cache.
    """
    _require_http(uri)
    sess = session or requests.Session()
    result = _single_request(sess, uri, policy, {})
    if result.page_cache is not CacheStatus.HIT or not policy.cache_bypass:
        return result
    bypass_headers = {"Cache-Control": "no-cache", "Pragma": "no-cache"}
    for attempt in range(1, policy.cache_retry_limit + 1):
        target = uri
        used_query = False
        if attempt == policy.cache_retry_limit:
            sep = "&" if "?" in uri else "?"
            target = f"{uri}{sep}{_BYPASS_PARAM}={uuid.uuid4().hex}"
            used_query = True
        result = _single_request(sess, target, policy, bypass_headers)
        if result.page_cache is not CacheStatus.HIT:
            return replace(result, requested_uri=uri, bypass_query_used=used_query)
    raise FetchError(
        uri, FetchErrorKind.TOO_MANY_CACHE_HITS,
        f"cache HIT on all {policy.cache_retry_limit + 1} attempts",
    )


def probe_stability(
    uri: str,
    policy: FetchPolicy,
    session: requests.Session | None = None,
) -> tuple[FetchResult, FetchResult]:
    """Fetch twice with a delay; mark the first result Stable or Dynamic.

    Stability is defined on body bytes and status only — anything else
    (Date, per-request headers) must not count as dynamism.
    """
    if not policy.stability_probe:
        raise ValueError("probe_stability requires policy.stability_probe")
    sess = session or requests.Session()
    first = fetch_resource(uri, policy, sess)
    if policy.stability_delay_ms:
        time.sleep(policy.stability_delay_ms / 1000.0)
    second = fetch_resource(uri, policy, sess)
    stable = first.body == second.body and first.status == second.status
    first = replace(
        first, stability=Stability.STABLE if stable else Stability.DYNAMIC
    )
    return first, second


def fetch_raw(
    m: MementoUri,
    policy: FetchPolicy,
    session: requests.Session | None = None,
) -> FetchResult:
    """Fetch the raw-content (id_) variant of a memento; tagged raw_used."""
    result = fetch_resource(build_raw_uri(m).serialize(), policy, session)
    return replace(result, raw_used=True)


def probe_relations(
    uri: str,
    policy: FetchPolicy,
    session: requests.Session | None = None,
) -> LinkRelationSet:
    """HEAD probe (GET fallback) for classification evidence in Link headers."""
    sess = session or requests.Session()
    try:
        result = _single_request(sess, uri, policy, {}, method="HEAD")
        if result.status == 405 or result.status >= 500:
            result = _single_request(sess, uri, policy, {})
        return result.link_relations
    except FetchError:
        return LinkRelationSet()
