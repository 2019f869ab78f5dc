"""Embedded-resource discovery, archive-markup stripping, URI classification.

Discovery is static: references readable from markup (HTML attributes, CSS
url()/@import).  URIs constructed by script execution are out of scope and
simply never seen.

Classification rules, in order: a deny-list match or a donotnegotiate Link
probe makes a URI archive-specific; a parseable URI-M under a configured
replay prefix is an archived memento; everything else is live web and is
never fetched.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from html.parser import HTMLParser
from urllib.parse import urljoin, urlsplit

import requests

from .config import ArchiveConfig
from .fetch import (
    FetchError,
    FetchErrorKind,
    FetchPolicy,
    FetchResult,
    fetch_raw,
    fetch_resource,
    probe_relations,
    probe_stability,
)
from .protocol import (
    LinkRelationSet,
    MementoUri,
    Modifier,
    NotAMemento,
    build_raw_uri,
    parse_memento_uri,
)

DEFAULT_MAX_DEPTH = 3
ARCHIVE_COMMENT_MARKER = "FILE ARCHIVED ON"


class Origin(Enum):
    ROOT = "root"
    IMG_SRC = "img-src"
    IMG_SRCSET = "img-srcset"
    SCRIPT_SRC = "script-src"
    STYLESHEET_HREF = "stylesheet-href"
    CSS_URL = "css-url"
    IFRAME_SRC = "iframe-src"
    FRAME_SRC = "frame-src"
    OBJECT_DATA = "object-data"
    EMBED_SRC = "embed-src"
    LINK_ICON_HREF = "link-icon-href"


class ClassificationValue(Enum):
    ARCHIVED_MEMENTO = "archived-memento"
    ARCHIVE_SPECIFIC = "archive-specific"
    LIVE_WEB = "live-web"


class Evidence(Enum):
    URI_PATTERN = "uri-pattern"
    DO_NOT_NEGOTIATE_HEADER = "donotnegotiate-header"
    CONFIG_DENY_LIST = "config-deny-list"
    NO_ARCHIVE_PREFIX = "no-archive-prefix"


@dataclass(frozen=True)
class Classification:
    value: ClassificationValue
    evidence: Evidence

    def __post_init__(self) -> None:
        if self.value is ClassificationValue.ARCHIVE_SPECIFIC:
            allowed = (Evidence.DO_NOT_NEGOTIATE_HEADER, Evidence.CONFIG_DENY_LIST)
        elif self.value is ClassificationValue.LIVE_WEB:
            allowed = (Evidence.NO_ARCHIVE_PREFIX,)
        else:
            allowed = (Evidence.URI_PATTERN,)
        if self.evidence not in allowed:
            raise ValueError(f"{self.value} cannot rest on {self.evidence}")


@dataclass(frozen=True)
class DiscoveredResource:
    raw_reference: str
    resolved_uri: str
    origin: Origin
    source_uri: str
    depth: int


@dataclass
class DiscoveryResult:
    """Discovered references plus a count of references that had to be dropped."""

    resources: list[DiscoveredResource] = field(default_factory=list)
    skipped: int = 0

    def __iter__(self):
        return iter(self.resources)

    def __len__(self) -> int:
        return len(self.resources)


_CSS_URL_RE = re.compile(
    r"""url\(\s*(?:'([^']*)'|"([^"]*)"|([^)'"\s][^)]*?))\s*\)""", re.IGNORECASE
)
_CSS_IMPORT_RE = re.compile(
    r"""@import\s+(?:'([^']*)'|"([^"]*)")""", re.IGNORECASE
)

_HTML_TYPES = ("text/html", "application/xhtml+xml")
_CSS_TYPES = ("text/css",)


def _css_references(text: str) -> list[str]:
    refs = []
    for m in _CSS_IMPORT_RE.finditer(text):
        refs.append(next(g for g in m.groups() if g is not None))
    for m in _CSS_URL_RE.finditer(text):
        refs.append(next(g for g in m.groups() if g is not None))
    return refs


class _RequisiteParser(HTMLParser):
    """Collects page-requisite references in document order."""

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.found: list[tuple[str, Origin]] = []
        self.base_href: str | None = None
        self._in_style = False

    def handle_starttag(self, tag, attrs):
        a = {k.lower(): (v or "") for k, v in attrs}
        if tag == "base" and self.base_href is None and a.get("href"):
            self.base_href = a["href"]
        elif tag == "img":
            if a.get("src"):
                self.found.append((a["src"], Origin.IMG_SRC))
            for candidate in _srcset_candidates(a.get("srcset", "")):
                self.found.append((candidate, Origin.IMG_SRCSET))
        elif tag == "script" and a.get("src"):
            self.found.append((a["src"], Origin.SCRIPT_SRC))
        elif tag == "link":
            rels = a.get("rel", "").lower().split()
            if "stylesheet" in rels and a.get("href"):
                self.found.append((a["href"], Origin.STYLESHEET_HREF))
            elif any("icon" in r for r in rels) and a.get("href"):
                self.found.append((a["href"], Origin.LINK_ICON_HREF))
        elif tag == "iframe" and a.get("src"):
            self.found.append((a["src"], Origin.IFRAME_SRC))
        elif tag == "frame" and a.get("src"):
            self.found.append((a["src"], Origin.FRAME_SRC))
        elif tag == "object" and a.get("data"):
            self.found.append((a["data"], Origin.OBJECT_DATA))
        elif tag == "embed" and a.get("src"):
            self.found.append((a["src"], Origin.EMBED_SRC))
        elif tag == "style":
            self._in_style = True
        if tag != "style" and a.get("style"):
            for ref in _css_references(a["style"]):
                self.found.append((ref, Origin.CSS_URL))

    def handle_startendtag(self, tag, attrs):
        self.handle_starttag(tag, attrs)

    def handle_endtag(self, tag):
        if tag == "style":
            self._in_style = False

    def handle_data(self, data):
        if self._in_style:
            for ref in _css_references(data):
                self.found.append((ref, Origin.CSS_URL))


def _srcset_candidates(srcset: str) -> list[str]:
    """Every candidate URL in a srcset; any of them may be fetched by a client."""
    out = []
    for part in srcset.split(","):
        part = part.strip()
        if part:
            out.append(part.split()[0])
    return out


def discover_resources(
    body: bytes,
    content_type: str,
    base: str,
    source_uri: str | None = None,
    depth: int = 1,
) -> DiscoveryResult:
    """Find embedded-resource references in an HTML or CSS body.

    Other content types yield an empty result.  Duplicate resolved URIs are
    collapsed keeping the first origin; references that do not resolve to an
    absolute http(s) URI are dropped and counted in ``skipped``.
    """
    media = content_type.split(";")[0].strip().lower()
    result = DiscoveryResult()
    if media in _HTML_TYPES:
        text = body.decode("utf-8", errors="replace")
        parser = _RequisiteParser()
        parser.feed(text)
        parser.close()
        effective_base = urljoin(base, parser.base_href) if parser.base_href else base
        raw_refs = parser.found
    elif media in _CSS_TYPES:
        text = body.decode("utf-8", errors="replace")
        effective_base = base
        raw_refs = [(ref, Origin.CSS_URL) for ref in _css_references(text)]
    else:
        return result

    seen: set[str] = set()
    for raw_ref, origin in raw_refs:
        ref = raw_ref.strip()
        if not ref:
            result.skipped += 1
            continue
        resolved = urljoin(effective_base, ref)
        if urlsplit(resolved).scheme not in ("http", "https"):
            result.skipped += 1
            continue
        if resolved in seen:
            continue
        seen.add(resolved)
        result.resources.append(DiscoveredResource(
            raw_reference=raw_ref,
            resolved_uri=resolved,
            origin=origin,
            source_uri=source_uri or base,
            depth=depth,
        ))
    return result


def classify_uri(
    uri: str,
    probe: LinkRelationSet | None,
    config: ArchiveConfig,
) -> Classification:
    """Archive-specific, archived memento, or live web — in that order."""
    if probe is not None and probe.is_do_not_negotiate():
        return Classification(
            ClassificationValue.ARCHIVE_SPECIFIC, Evidence.DO_NOT_NEGOTIATE_HEADER
        )
    if config.is_denied(uri):
        return Classification(
            ClassificationValue.ARCHIVE_SPECIFIC, Evidence.CONFIG_DENY_LIST
        )
    try:
        parse_memento_uri(uri, list(config.prefixes))
        return Classification(ClassificationValue.ARCHIVED_MEMENTO, Evidence.URI_PATTERN)
    except NotAMemento:
        return Classification(ClassificationValue.LIVE_WEB, Evidence.NO_ARCHIVE_PREFIX)


# --------------------------------------------------------------------------
# Archive-markup stripping (fallback when raw retrieval is unavailable)
# --------------------------------------------------------------------------

_COMMENT_RE = re.compile(rb"<!--.*?-->\s*", re.DOTALL)


def strip_archive_markup(body: bytes, config: ArchiveConfig) -> bytes:
    """Remove archive-inserted markup, leaving every other byte intact.

    Drops comment blocks carrying the archival marker, elements whose id or
    class matches a banner selector, and script elements whose src matches
    the deny-list.  Idempotent; returns the input unchanged when nothing
    matches.  Heuristic by nature — raw (id_) retrieval is always preferred.
    """
    out = _COMMENT_RE.sub(
        lambda m: b"" if ARCHIVE_COMMENT_MARKER.encode() in m.group(0) else m.group(0),
        body,
    )
    text = out.decode("latin-1")  # byte-preserving
    text = _strip_banner_elements(text, config.banner_selectors)
    text = _strip_denied_scripts(text, config.deny)
    return text.encode("latin-1")


_START_TAG_RE = re.compile(r"<([a-zA-Z][a-zA-Z0-9]*)((?:[^>'\"]|'[^']*'|\"[^\"]*\")*)>")
_SCRIPT_RE = re.compile(
    r"<script\b((?:[^>'\"]|'[^']*'|\"[^\"]*\")*)>.*?</script\s*>",
    re.IGNORECASE | re.DOTALL,
)


def _attr_value(attrs_text: str, name: str) -> str | None:
    m = re.search(
        rf"""\b{name}\s*=\s*(?:"([^"]*)"|'([^']*)'|([^\s>]+))""",
        attrs_text, re.IGNORECASE,
    )
    if not m:
        return None
    return next(g for g in m.groups() if g is not None)


def _matches_selector(attrs_text: str, selectors: tuple[str, ...]) -> bool:
    id_value = _attr_value(attrs_text, "id")
    class_value = _attr_value(attrs_text, "class")
    tokens = set()
    if id_value:
        tokens.add(id_value)
    if class_value:
        tokens.update(class_value.split())
    return bool(tokens & set(selectors))


def _strip_banner_elements(text: str, selectors: tuple[str, ...]) -> str:
    if not selectors:
        return text
    while True:
        removed = False
        for m in _START_TAG_RE.finditer(text):
            tag, attrs_text = m.group(1).lower(), m.group(2)
            if not _matches_selector(attrs_text, selectors):
                continue
            if attrs_text.rstrip().endswith("/"):
                end = m.end()
            else:
                end = _find_element_end(text, tag, m.end())
            text = text[:m.start()] + text[end:]
            removed = True
            break
        if not removed:
            return text


def _find_element_end(text: str, tag: str, search_from: int) -> int:
    """Index just past the matching close tag, balancing nested same-name tags."""
    open_re = re.compile(rf"<{tag}\b", re.IGNORECASE)
    close_re = re.compile(rf"</{tag}\s*>", re.IGNORECASE)
    depth = 1
    pos = search_from
    while depth:
        close = close_re.search(text, pos)
        if not close:
            return len(text)  # unterminated; drop to end rather than guess
        nested = open_re.search(text, pos, close.start())
        if nested:
            depth += 1
            pos = nested.end()
        else:
            depth -= 1
            pos = close.end()
    return pos


def _strip_denied_scripts(text: str, deny: tuple[str, ...]) -> str:
    if not deny:
        return text

    def drop_if_denied(m: re.Match) -> str:
        src = _attr_value(m.group(1), "src")
        if src and any(pattern in src for pattern in deny):
            return ""
        return m.group(0)

    return _SCRIPT_RE.sub(drop_if_denied, text)


# --------------------------------------------------------------------------
# Composite expansion
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpansionRow:
    resource: DiscoveredResource
    classification: Classification
    memento: MementoUri | None = None
    result: FetchResult | None = None
    error: FetchError | None = None


@dataclass
class Expansion:
    root: MementoUri
    rows: list[ExpansionRow]
    discovery_skipped: int = 0


def _plain_variant(m: MementoUri) -> MementoUri:
    """The replay (unmodified) form of a memento URI."""
    if m.modifier is Modifier.NONE:
        return m
    return MementoUri(
        archive_prefix=m.archive_prefix,
        timestamp14=m.timestamp14,
        modifier=Modifier.NONE,
        target=m.target,
    )


def _fetch_for_hashing(
    m: MementoUri,
    policy: FetchPolicy,
    config: ArchiveConfig,
    session: requests.Session,
    replay: FetchResult | None,
) -> tuple[FetchResult | None, FetchError | None]:
    """Raw-first retrieval; falls back to stripped replay content.

    When the policy asks for stability probing the raw variant is fetched
    twice and the body-level verdict lands on the returned result.
    """
    try:
        if policy.stability_probe:
            raw, _second = probe_stability(
                build_raw_uri(m).serialize(), policy, session
            )
        else:
            raw = fetch_raw(m, policy, session)
        if raw.is_success():
            return replace(raw, raw_used=True), None
    except FetchError as exc:
        if exc.kind is FetchErrorKind.TOO_MANY_CACHE_HITS:
            return None, exc
        # fall through to the replay fallback on transport errors

    fallback = replay
    try:
        if fallback is None:
            fallback = fetch_resource(_plain_variant(m).serialize(), policy, session)
        if not fallback.is_success():
            return fallback, None
        stripped = strip_archive_markup(fallback.body, config)
        return replace(fallback, body=stripped, raw_used=False), None
    except FetchError as exc2:
        return None, exc2


def expand_composite(
    root: MementoUri,
    policy: FetchPolicy,
    config: ArchiveConfig,
    max_depth: int = DEFAULT_MAX_DEPTH,
    session: requests.Session | None = None,
) -> Expansion:
    """Breadth-first expansion of a composite memento.

    Hash-relevant bodies come from raw (id_) retrieval with a stripped-replay
    fallback; reference discovery reads the replay variant, whose rewritten
    links carry the archive's own URI-M mapping.  Archive-specific and
    live-web references are recorded but never fetched (a donotnegotiate
    probe touches only URIs already on a configured archive host).
    Per-resource failures become rows, never aborts.
    """
    sess = session or requests.Session()
    rows: list[ExpansionRow] = []
    skipped = 0
    seen: set[str] = {_plain_variant(root).serialize()}

    root_resource = DiscoveredResource(
        raw_reference=root.serialize(),
        resolved_uri=root.serialize(),
        origin=Origin.ROOT,
        source_uri=root.serialize(),
        depth=0,
    )
    archived = Classification(ClassificationValue.ARCHIVED_MEMENTO, Evidence.URI_PATTERN)

    # (resource row shell, memento, depth) queue; BFS in document order
    queue: list[tuple[DiscoveredResource, MementoUri]] = [(root_resource, root)]

    while queue:
        resource, memento = queue.pop(0)

        replay_result: FetchResult | None = None
        try:
            replay_result = fetch_resource(
                _plain_variant(memento).serialize(), policy, sess
            )
        except FetchError:
            replay_result = None  # raw retrieval may still succeed

        hash_result, hash_error = _fetch_for_hashing(
            memento, policy, config, sess, replay_result
        )
        rows.append(ExpansionRow(
            resource=resource,
            classification=archived,
            memento=memento,
            result=hash_result,
            error=hash_error if hash_result is None else None,
        ))

        if resource.depth >= max_depth:
            continue
        # rewritten links live in the replay body; raw is a last resort whose
        # unrewritten references will mostly classify as live web
        discovery_source = replay_result
        if discovery_source is None or not discovery_source.is_success():
            discovery_source = hash_result
        if discovery_source is None or not discovery_source.is_success():
            continue
        found = discover_resources(
            discovery_source.body,
            discovery_source.content_type or "",
            base=discovery_source.requested_uri,
            source_uri=resource.resolved_uri,
            depth=resource.depth + 1,
        )
        skipped += found.skipped
        for child in found:
            if child.resolved_uri in seen:
                continue
            seen.add(child.resolved_uri)
            classification, child_memento = _classify_discovered(
                child.resolved_uri, policy, config, sess
            )
            if classification.value is not ClassificationValue.ARCHIVED_MEMENTO:
                rows.append(ExpansionRow(resource=child, classification=classification))
                continue
            child_media_hint = _looks_recursable(child)
            if child_media_hint and child.depth < max_depth:
                queue.append((child, child_memento))
                continue
            child_result, child_error = _fetch_for_hashing(
                child_memento, policy, config, sess, replay=None
            ) if child_media_hint else _fetch_leaf(child_memento, policy, sess)
            rows.append(ExpansionRow(
                resource=child,
                classification=classification,
                memento=child_memento,
                result=child_result,
                error=child_error,
            ))
    return Expansion(root=root, rows=rows, discovery_skipped=skipped)


def _fetch_leaf(
    memento: MementoUri,
    policy: FetchPolicy,
    session: requests.Session,
) -> tuple[FetchResult | None, FetchError | None]:
    """Raw-variant fetch for non-recursable resources (images and the like)."""
    try:
        if policy.stability_probe:
            first, _ = probe_stability(
                build_raw_uri(memento).serialize(), policy, session
            )
            return replace(first, raw_used=True), None
        return fetch_raw(memento, policy, session), None
    except FetchError as exc:
        return None, exc


def _looks_recursable(resource: DiscoveredResource) -> bool:
    """Origins that can embed further references (documents and stylesheets)."""
    return resource.origin in (
        Origin.IFRAME_SRC, Origin.FRAME_SRC, Origin.STYLESHEET_HREF,
        Origin.CSS_URL, Origin.OBJECT_DATA,
    )


def _classify_discovered(
    uri: str,
    policy: FetchPolicy,
    config: ArchiveConfig,
    session: requests.Session,
) -> tuple[Classification, MementoUri | None]:
    """Classify one discovered URI, probing only when safe and useful.

    The probe (HEAD, GET fallback) runs only for non-memento URIs already on
    a configured archive host with no deny-list verdict; im_/id_ mementos and
    anything off-archive are never probed, so live-web URIs see zero requests.
    """
    if config.is_denied(uri):
        return (
            Classification(ClassificationValue.ARCHIVE_SPECIFIC, Evidence.CONFIG_DENY_LIST),
            None,
        )
    try:
        memento = parse_memento_uri(uri, list(config.prefixes))
        return (
            Classification(ClassificationValue.ARCHIVED_MEMENTO, Evidence.URI_PATTERN),
            memento,
        )
    except NotAMemento:
        pass
    if config.on_archive_host(uri):
        probe = probe_relations(uri, policy, session)
        if probe.is_do_not_negotiate():
            return (
                Classification(
                    ClassificationValue.ARCHIVE_SPECIFIC,
                    Evidence.DO_NOT_NEGOTIATE_HEADER,
                ),
                None,
            )
    return (
        Classification(ClassificationValue.LIVE_WEB, Evidence.NO_ARCHIVE_PREFIX),
        None,
    )
