"""Memento-protocol artifacts: archival URIs, TimeMaps, Link headers, datetimes.

Everything in this module is a pure function over immutable values; nothing
here touches the network.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum

DO_NOT_NEGOTIATE_URI = "http://mementoweb.org/terms/donotnegotiate"


class ProtocolError(ValueError):
    """Base class for parse failures in this module."""


class NotAMemento(ProtocolError):
    """URI does not name an archived capture; treat as a live-web candidate."""


class MalformedLinkFormat(ProtocolError):
    """TimeMap body could not be tokenized; record the failure, do not guess."""


class MalformedLinkHeader(ProtocolError):
    pass


class MalformedDatetime(ProtocolError):
    pass


class OriginalMismatch(ProtocolError):
    """Two TimeMap snapshots describe different original resources."""


@dataclass(frozen=True)
class OriginalUri:
    """An absolute http(s) URI naming the original (live-web) resource."""

    uri: str

    def __post_init__(self) -> None:
        if not re.match(r"^https?://", self.uri):
            raise ValueError(f"original URI must be absolute http(s): {self.uri!r}")


class Modifier(Enum):
    """Archival replay modifier appended to the 14-digit timestamp."""

    NONE = ""
    RAW = "id_"
    IMAGE = "im_"
    OPAQUE = None  # unknown suffix, token kept verbatim on the MementoUri

    @classmethod
    def from_token(cls, token: str) -> "Modifier":
        if token == "":
            return cls.NONE
        for m in (cls.RAW, cls.IMAGE):
            if token == m.value:
                return m
        return cls.OPAQUE


@dataclass(frozen=True)
class MementoUri:
    """A parsed archival URI: replay prefix, capture timestamp, modifier, target.

    ``serialize(parse(u)) == u`` holds for every well-formed input; unknown
    modifiers survive verbatim via ``opaque_token``.
    """

    archive_prefix: str
    timestamp14: str
    modifier: Modifier = Modifier.NONE
    target: OriginalUri = None  # type: ignore[assignment]
    opaque_token: str = ""

    def __post_init__(self) -> None:
        if not re.fullmatch(r"\d{14}", self.timestamp14):
            raise ValueError(f"timestamp must be 14 digits: {self.timestamp14!r}")
        self.capture_datetime()  # validates the digits form a real datetime
        if self.modifier is Modifier.OPAQUE and not self.opaque_token:
            raise ValueError("opaque modifier requires its verbatim token")

    def modifier_token(self) -> str:
        if self.modifier is Modifier.OPAQUE:
            return self.opaque_token
        return self.modifier.value

    def capture_datetime(self) -> datetime:
        """The timestamp14 interpreted as a UTC datetime."""
        try:
            return datetime.strptime(self.timestamp14, "%Y%m%d%H%M%S").replace(
                tzinfo=timezone.utc
            )
        except ValueError as exc:
            raise ValueError(f"timestamp14 is not a valid datetime: {self.timestamp14}") from exc

    def serialize(self) -> str:
        return f"{self.archive_prefix}{self.timestamp14}{self.modifier_token()}/{self.target.uri}"


# Trailing letters + underscore directly after the timestamp, e.g. "id_", "im_".
_MODIFIER_RE = re.compile(r"^([a-z]{1,8}_)")


def parse_memento_uri(uri: str, archive_prefixes: list[str]) -> MementoUri:
    """Split a URI-M into prefix, timestamp, modifier and embedded target.

    Raises NotAMemento when no configured replay prefix matches or the
    timestamp is malformed; callers treat that as a live-web candidate.
    """
    prefix = None
    for p in sorted(archive_prefixes, key=len, reverse=True):
        if p and uri.startswith(p):
            prefix = p
            break
    if prefix is None:
        raise NotAMemento(f"no configured replay prefix matches {uri!r}")

    rest = uri[len(prefix):]
    m = re.match(r"^(\d{14})", rest)
    if not m:
        raise NotAMemento(f"no 14-digit timestamp after prefix in {uri!r}")
    ts = m.group(1)
    rest = rest[14:]

    mod_token = ""
    mod_match = _MODIFIER_RE.match(rest)
    if mod_match:
        mod_token = mod_match.group(1)
        rest = rest[len(mod_token):]

    if not rest.startswith("/"):
        raise NotAMemento(f"missing separator before target in {uri!r}")
    target = _normalize_target(rest[1:])
    if target is None:
        raise NotAMemento(f"unusable target in {uri!r}")

    modifier = Modifier.from_token(mod_token)
    try:
        return MementoUri(
            archive_prefix=prefix,
            timestamp14=ts,
            modifier=modifier,
            target=OriginalUri(target),
            opaque_token=mod_token if modifier is Modifier.OPAQUE else "",
        )
    except ValueError as exc:
        raise NotAMemento(str(exc)) from exc


def _normalize_target(rest: str) -> str | None:
    """Make the post-timestamp remainder an absolute URI.

    Replay systems emit both schemeful and schemeless forms; extra leading
    slashes before an embedded scheme are dropped, scheme-relative targets get
    "http:", and bare host paths resolve against "http://".
    """
    if re.match(r"^https?://", rest):
        return rest
    stripped = rest.lstrip("/")
    if re.match(r"^https?://", stripped):
        return stripped
    if rest.startswith("//"):
        return "http:" + rest
    if not rest:
        return None
    return "http://" + rest


def build_raw_uri(m: MementoUri) -> MementoUri:
    """Rewrite to the raw-content form (``id_`` modifier); idempotent."""
    if m.modifier is Modifier.RAW:
        return m
    return MementoUri(
        archive_prefix=m.archive_prefix,
        timestamp14=m.timestamp14,
        modifier=Modifier.RAW,
        target=m.target,
    )


# --------------------------------------------------------------------------
# HTTP datetimes (IMF-fixdate only)
# --------------------------------------------------------------------------

_DAYS = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"]
_MONTHS = ["Jan", "Feb", "Mar", "Apr", "May", "Jun",
           "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"]
_IMF_RE = re.compile(
    r"^(Mon|Tue|Wed|Thu|Fri|Sat|Sun), "
    r"(\d{2}) (Jan|Feb|Mar|Apr|May|Jun|Jul|Aug|Sep|Oct|Nov|Dec) (\d{4}) "
    r"(\d{2}):(\d{2}):(\d{2}) GMT$"
)


def parse_http_datetime(value: str) -> datetime:
    """Parse an IMF-fixdate header value into an aware UTC datetime.

    Rejects every other date form, including a correct date carrying the
    wrong weekday name, so that format(parse(v)) == v for accepted inputs.
    """
    m = _IMF_RE.match(value.strip())
    if not m:
        raise MalformedDatetime(f"not IMF-fixdate: {value!r}")
    day_name, day, mon_name, year, hh, mm, ss = m.groups()
    try:
        dt = datetime(
            int(year), _MONTHS.index(mon_name) + 1, int(day),
            int(hh), int(mm), int(ss), tzinfo=timezone.utc,
        )
    except ValueError as exc:
        raise MalformedDatetime(f"impossible date: {value!r}") from exc
    if _DAYS[dt.weekday()] != day_name:
        raise MalformedDatetime(f"weekday does not match date: {value!r}")
    return dt


def format_http_datetime(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    dt = dt.astimezone(timezone.utc)
    return (
        f"{_DAYS[dt.weekday()]}, {dt.day:02d} {_MONTHS[dt.month - 1]} {dt.year:04d} "
        f"{dt.hour:02d}:{dt.minute:02d}:{dt.second:02d} GMT"
    )


# --------------------------------------------------------------------------
# Link header / link-format parsing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkRelation:
    target: str
    rels: tuple[str, ...]
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class LinkRelationSet:
    relations: tuple[LinkRelation, ...] = ()

    def is_do_not_negotiate(self) -> bool:
        return any(
            r.target == DO_NOT_NEGOTIATE_URI and "type" in r.rels
            for r in self.relations
        )

    def first_target(self, rel: str) -> str | None:
        for r in self.relations:
            if rel in r.rels:
                return r.target
        return None


def _split_top_level(text: str, error: type[ProtocolError]) -> list[str]:
    """Split serialized links on commas outside quotes and angle brackets."""
    parts: list[str] = []
    buf: list[str] = []
    in_quote = False
    in_angle = False
    for ch in text:
        if in_quote:
            buf.append(ch)
            if ch == '"':
                in_quote = False
            continue
        if ch == '"':
            in_quote = True
            buf.append(ch)
        elif ch == "<" and not in_angle:
            in_angle = True
            buf.append(ch)
        elif ch == ">" and in_angle:
            in_angle = False
            buf.append(ch)
        elif ch == "," and not in_angle:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if in_quote or in_angle:
        raise error(f"unbalanced quotes or brackets near {''.join(buf)[:60]!r}")
    parts.append("".join(buf))
    return [p.strip() for p in parts if p.strip()]


def _parse_one_link(chunk: str, error: type[ProtocolError]) -> LinkRelation:
    m = re.match(r"^<([^>]*)>\s*(.*)$", chunk, re.DOTALL)
    if not m:
        raise error(f"link does not start with <uri>: {chunk[:60]!r}")
    target, params_text = m.group(1), m.group(2)
    rels: tuple[str, ...] = ()
    attributes: dict[str, str] = {}
    for param in _split_params(params_text, error):
        if "=" in param:
            name, value = param.split("=", 1)
            name = name.strip().lower()
            value = value.strip()
            if value.startswith('"'):
                if not value.endswith('"') or len(value) < 2:
                    raise error(f"unterminated quoted value in {chunk[:60]!r}")
                value = value[1:-1].replace('\\"', '"')
        else:
            name, value = param.strip().lower(), ""
        if not name:
            continue
        if name == "rel" and not rels:
            rels = tuple(value.split())
        elif name not in attributes:  # first value wins, per RFC 8288
            attributes[name] = value
    return LinkRelation(target=target, rels=rels, attributes=attributes)


def _split_params(text: str, error: type[ProtocolError]) -> list[str]:
    parts: list[str] = []
    buf: list[str] = []
    in_quote = False
    for ch in text:
        if in_quote:
            buf.append(ch)
            if ch == '"':
                in_quote = False
            continue
        if ch == '"':
            in_quote = True
            buf.append(ch)
        elif ch == ";":
            if buf:
                parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if in_quote:
        raise error(f"unbalanced quotes in parameters {text[:60]!r}")
    if buf:
        parts.append("".join(buf))
    return [p.strip() for p in parts if p.strip()]


def parse_link_header(value: str) -> LinkRelationSet:
    """Parse a raw Link header value (possibly several comma-separated links)."""
    if not value.strip():
        return LinkRelationSet()
    relations = tuple(
        _parse_one_link(chunk, MalformedLinkHeader)
        for chunk in _split_top_level(value, MalformedLinkHeader)
    )
    return LinkRelationSet(relations=relations)


# --------------------------------------------------------------------------
# TimeMaps
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeMapSnapshot:
    """A URI-T's memento list as observed at one instant.

    Entry memento URIs are kept in serialized form; parsing them into
    MementoUri values needs archive-prefix configuration this parser is not
    given, and the serialized string is exactly the diff key anyway.
    """

    timemap_uri: str
    original: str | None
    entries: tuple[tuple[str, datetime], ...]
    relations: LinkRelationSet
    observed_at: datetime
    dropped_entries: int = 0


@dataclass(frozen=True)
class TimeMapDelta:
    added: tuple[tuple[str, datetime], ...]
    removed: tuple[tuple[str, datetime], ...]
    unchanged_count: int

    def in_flux(self) -> bool:
        return bool(self.added or self.removed)


def parse_link_format(
    body: str,
    base: str,
    observed_at: datetime | None = None,
) -> TimeMapSnapshot:
    """Parse an application/link-format TimeMap body.

    Entries are links whose rel contains "memento", in document order.
    Entries with unparseable datetime attributes are dropped and counted in
    ``dropped_entries``, never silently coerced.
    """
    observed = observed_at or datetime.now(timezone.utc)
    if not body.strip():
        return TimeMapSnapshot(
            timemap_uri=base, original=None, entries=(),
            relations=LinkRelationSet(), observed_at=observed,
        )
    links = [
        _parse_one_link(chunk, MalformedLinkFormat)
        for chunk in _split_top_level(body, MalformedLinkFormat)
    ]
    entries: list[tuple[str, datetime]] = []
    dropped = 0
    others: list[LinkRelation] = []
    original = None
    for link in links:
        if "memento" in link.rels:
            raw_dt = link.attributes.get("datetime")
            if raw_dt is None:
                dropped += 1
                continue
            try:
                entries.append((link.target, parse_http_datetime(raw_dt)))
            except MalformedDatetime:
                dropped += 1
                continue
            if len(link.rels) > 1:  # keep first/last markers visible
                others.append(link)
            continue
        others.append(link)
        if "original" in link.rels and original is None:
            original = link.target
    return TimeMapSnapshot(
        timemap_uri=base,
        original=original,
        entries=tuple(entries),
        relations=LinkRelationSet(relations=tuple(others)),
        observed_at=observed,
        dropped_entries=dropped,
    )


def diff_timemaps(a: TimeMapSnapshot, b: TimeMapSnapshot) -> TimeMapDelta:
    """Set difference between two snapshots of the same original, a earlier."""
    if a.original != b.original:
        raise OriginalMismatch(f"{a.original!r} != {b.original!r}")
    set_a = set(a.entries)
    set_b = set(b.entries)
    added = tuple(e for e in b.entries if e not in set_a)
    removed = tuple(e for e in a.entries if e not in set_b)
    return TimeMapDelta(
        added=added,
        removed=removed,
        unchanged_count=len(set_a & set_b),
    )
