"""Canonical hashing of retrieved resources and composite-memento manifests.

The repeatability contract: hashing the same unchanged composite memento at
two different times yields the same aggregate.  Everything volatile is either
canonicalized (header whitespace), excluded by construction (date-varying
headers are rejected at profile load), or excluded with a recorded reason
(cache hits, dynamic bodies, archive-specific and live-web resources).

Aggregation binds each per-resource hash to its original URI and sorts, so
the aggregate is independent of retrieval order and resource substitution
swaps remain detectable.  A single-record manifest's aggregate is that
record's own hash.

See docs/manifest-format.md for the bit-exact serialization rules.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

import requests

from . import __version__ as _toolkit_version
from .config import ArchiveConfig
from .extract import (
    Classification,
    ClassificationValue,
    Evidence,
    Expansion,
    ExpansionRow,
    expand_composite,
)
from .fetch import (
    CacheStatus,
    FetchErrorKind,
    FetchPolicy,
    FetchResult,
    Stability,
    fetch_resource,
)
from .protocol import MementoUri

STATUS_PSEUDO_HEADER = "status"
DEFAULT_INCLUDED_HEADERS = (STATUS_PSEUDO_HEADER, "content-type", "location")

# Hop-by-hop or date-varying: hashing these can never be repeatable.
_FORBIDDEN_HEADERS = frozenset({
    "date", "age", "expires", "connection", "keep-alive", "transfer-encoding",
    "upgrade", "te", "trailer", "proxy-authenticate", "proxy-authorization",
    "set-cookie", "x-page-cache",
})


class FixityError(Exception):
    pass


class EmptyManifest(FixityError):
    """Nothing hashable: the root itself failed."""


class ProfileMismatch(FixityError):
    pass


class RootMismatch(FixityError):
    pass


class ManifestFormatError(FixityError):
    pass


class Algorithm(Enum):
    SHA256 = "sha256"
    MD5 = "md5"  # compat only: reproduces the paper-era cache demonstrations

    def new(self):
        return hashlib.new(self.value)

    @property
    def hex_length(self) -> int:
        return 64 if self is Algorithm.SHA256 else 32


@dataclass(frozen=True)
class HashProfile:
    algorithm: Algorithm = Algorithm.SHA256
    included_headers: tuple[str, ...] = DEFAULT_INCLUDED_HEADERS
    include_body: bool = True
    html_only: bool = False

    def __post_init__(self) -> None:
        normalized = tuple(h.strip().lower() for h in self.included_headers)
        object.__setattr__(self, "included_headers", normalized)
        for name in normalized:
            if name in _FORBIDDEN_HEADERS:
                raise ValueError(f"header {name!r} varies per response; not hashable")

    def body_only(self) -> "HashProfile":
        return replace(self, included_headers=())


class ExclusionReason(Enum):
    ARCHIVE_SPECIFIC = "archive-specific"
    LIVE_WEB = "live-web"
    DYNAMIC = "dynamic"
    CACHE_HIT = "cache-hit"
    FETCH_ERROR = "fetch-error"


@dataclass(frozen=True)
class ResourceRecord:
    target: str
    memento_uri: str
    classification: Classification
    memento_datetime: datetime | None
    content_hash: str
    header_digest_input: str
    cache_status: CacheStatus
    stability: Stability
    raw_used: bool
    bypass_query_used: bool = False

    def sort_key(self) -> tuple[str, str]:
        return (self.target, self.memento_uri)


@dataclass(frozen=True)
class FixityManifest:
    root: str
    observed_at: datetime
    profile: HashProfile
    records: tuple[ResourceRecord, ...]
    excluded: tuple[tuple[str, ExclusionReason], ...]
    aggregate_hash: str
    toolkit_version: str = _toolkit_version
    warnings: tuple[str, ...] = ()


def _canonical_header_value(value: str) -> str:
    return " ".join(value.split())


def canonical_serialization(result: FetchResult, profile: HashProfile) -> tuple[str, bytes]:
    """The exact bytes a resource's digest covers, plus the header section text.

    One line per configured header, in profile order; the pseudo-header
    "status" contributes the response code; absent headers contribute "-".
    A blank line separates headers from the verbatim body, and is omitted
    when the profile includes no headers at all.
    """
    lines = []
    for name in profile.included_headers:
        if name == STATUS_PSEUDO_HEADER:
            lines.append(f"status:{result.status}")
            continue
        value = result.headers.get(name)
        rendered = _canonical_header_value(value) if value is not None else "-"
        lines.append(f"{name}:{rendered}")
    header_section = "".join(line + "\n" for line in lines)
    data = header_section.encode("utf-8")
    if data:
        data += b"\n"
    if profile.include_body:
        data += result.body
    return header_section, data


def hash_resource(result: FetchResult, profile: HashProfile) -> str:
    """Lowercase hex digest over the canonical serialization."""
    _, data = canonical_serialization(result, profile)
    h = profile.algorithm.new()
    h.update(data)
    return h.hexdigest()


def aggregate(records: list[ResourceRecord] | tuple[ResourceRecord, ...],
              profile: HashProfile) -> str:
    """Fold pre-sorted per-resource hashes into the composite digest.

    A single record passes through unchanged; otherwise the digest covers
    one "<hash> <target>\\n" line per record.
    """
    if not records:
        raise EmptyManifest("no hashable records")
    if len(records) == 1:
        return records[0].content_hash
    text = "".join(f"{r.content_hash} {r.target}\n" for r in records)
    h = profile.algorithm.new()
    h.update(text.encode("utf-8"))
    return h.hexdigest()


def _row_exclusion(row: ExpansionRow, policy: FetchPolicy) -> ExclusionReason | None:
    if row.classification.value is ClassificationValue.ARCHIVE_SPECIFIC:
        return ExclusionReason.ARCHIVE_SPECIFIC
    if row.classification.value is ClassificationValue.LIVE_WEB:
        return ExclusionReason.LIVE_WEB
    if row.error is not None:
        if row.error.kind is FetchErrorKind.TOO_MANY_CACHE_HITS:
            return ExclusionReason.CACHE_HIT
        return ExclusionReason.FETCH_ERROR
    assert row.result is not None
    if not row.result.is_success():
        return ExclusionReason.FETCH_ERROR
    if row.result.stability is Stability.DYNAMIC:
        return ExclusionReason.DYNAMIC
    if row.result.page_cache is CacheStatus.HIT and policy.cache_bypass:
        return ExclusionReason.CACHE_HIT  # defensive; fetch already retries
    return None


def build_manifest(expansion: Expansion, profile: HashProfile,
                   policy: FetchPolicy) -> FixityManifest:
    """Turn expansion rows into the sorted, aggregated manifest."""
    observed_at = datetime.now(timezone.utc).replace(microsecond=0)
    records: list[ResourceRecord] = []
    excluded: list[tuple[str, ExclusionReason]] = []
    warnings: list[str] = []
    for row in expansion.rows:
        reason = _row_exclusion(row, policy)
        if reason is not None:
            excluded.append((row.resource.resolved_uri, reason))
            continue
        result = row.result
        assert result is not None and row.memento is not None
        header_section, _ = canonical_serialization(result, profile)
        records.append(ResourceRecord(
            target=row.memento.target.uri,
            memento_uri=row.memento.serialize(),
            classification=row.classification,
            memento_datetime=result.memento_datetime,
            content_hash=hash_resource(result, profile),
            header_digest_input=header_section,
            cache_status=result.page_cache,
            stability=result.stability,
            raw_used=result.raw_used,
            bypass_query_used=result.bypass_query_used,
        ))
        if result.bypass_query_used:
            # the retry changed the requested URI; that must stay visible
            warnings.append(
                f"cache bypass appended a throwaway query parameter for "
                f"{row.memento.serialize()}"
            )
        if (
            result.memento_datetime is not None
            and result.memento_datetime != row.memento.capture_datetime()
        ):
            # neither side is authoritative; both are recorded, mismatch flagged
            warnings.append(
                f"memento-datetime disagrees with URI timestamp for "
                f"{row.memento.serialize()}"
            )
    records.sort(key=lambda r: r.sort_key())
    excluded.sort(key=lambda e: (e[0], e[1].value))
    return FixityManifest(
        root=expansion.root.serialize(),
        observed_at=observed_at,
        profile=profile,
        records=tuple(records),
        excluded=tuple(excluded),
        aggregate_hash=aggregate(records, profile),
        warnings=tuple(warnings),
    )


def hash_composite_memento(
    root: MementoUri,
    policy: FetchPolicy,
    profile: HashProfile,
    config: ArchiveConfig,
    max_depth: int = 3,
    session: requests.Session | None = None,
) -> FixityManifest:
    """Expand, filter, hash, sort and aggregate one composite memento.

    Per-resource failures become recorded exclusions; the only fatal case is
    an empty record set (EmptyManifest).
    """
    expansion = expand_composite(root, policy, config, max_depth=max_depth,
                                 session=session)
    return build_manifest(expansion, profile, policy)


def hash_html_only(
    root: MementoUri,
    policy: FetchPolicy,
    profile: HashProfile,
    session: requests.Session | None = None,
) -> tuple[str, FixityManifest]:
    """The naive method: digest the replay HTML exactly as served.

    No embedded resources, no stripping, no headers — kept as an educational
    contrast; a tampered embedded image leaves this digest unchanged.
    Returns the digest and a single-record manifest so comparisons work.
    """
    body_profile = replace(profile, included_headers=(), html_only=True)
    result = fetch_resource(root.serialize(), policy, session)
    digest = hash_resource(result, body_profile)
    record = ResourceRecord(
        target=root.target.uri,
        memento_uri=root.serialize(),
        classification=Classification(
            ClassificationValue.ARCHIVED_MEMENTO, Evidence.URI_PATTERN
        ),
        memento_datetime=result.memento_datetime,
        content_hash=digest,
        header_digest_input="",
        cache_status=result.page_cache,
        stability=result.stability,
        raw_used=False,
    )
    manifest = FixityManifest(
        root=root.serialize(),
        observed_at=datetime.now(timezone.utc).replace(microsecond=0),
        profile=body_profile,
        records=(record,),
        excluded=(),
        aggregate_hash=digest,
    )
    return digest, manifest


# --------------------------------------------------------------------------
# Manifest comparison
# --------------------------------------------------------------------------

class Verdict(Enum):
    MATCH = "match"
    TAMPERED = "tampered"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class ChangedRecord:
    target: str
    hash_a: str
    hash_b: str


@dataclass(frozen=True)
class VerificationReport:
    verdict: Verdict
    changed: tuple[ChangedRecord, ...] = ()
    added: tuple[str, ...] = ()
    removed: tuple[str, ...] = ()
    exclusion_notes: tuple[str, ...] = ()


def compare_manifests(a: FixityManifest, b: FixityManifest) -> VerificationReport:
    """Decide Match / Tampered / Inconclusive between two observations.

    A changed hash for the same resource is definite tamper evidence.  When
    hashes agree but the exclusion sets differ (a resource turned dynamic,
    started cache-hitting, or failed), the record sets are not comparable
    and the verdict is Inconclusive rather than a guess.
    """
    if a.root != b.root:
        raise RootMismatch(f"{a.root!r} != {b.root!r}")
    if a.profile != b.profile:
        raise ProfileMismatch("manifests were built under different hash profiles")

    by_target_a = {r.sort_key(): r for r in a.records}
    by_target_b = {r.sort_key(): r for r in b.records}
    changed = tuple(
        ChangedRecord(target=key[0], hash_a=by_target_a[key].content_hash,
                      hash_b=by_target_b[key].content_hash)
        for key in sorted(by_target_a.keys() & by_target_b.keys())
        if by_target_a[key].content_hash != by_target_b[key].content_hash
    )
    added = tuple(k[0] for k in sorted(by_target_b.keys() - by_target_a.keys()))
    removed = tuple(k[0] for k in sorted(by_target_a.keys() - by_target_b.keys()))

    excl_a = set(a.excluded)
    excl_b = set(b.excluded)
    notes = tuple(
        f"only in {'second' if e in excl_b else 'first'} manifest: "
        f"{e[0]} excluded as {e[1].value}"
        for e in sorted(excl_a ^ excl_b, key=lambda x: (x[0], x[1].value))
    )

    if changed:
        verdict = Verdict.TAMPERED
    elif excl_a != excl_b:
        verdict = Verdict.INCONCLUSIVE
    elif added or removed:
        verdict = Verdict.TAMPERED
    else:
        verdict = Verdict.MATCH
    return VerificationReport(
        verdict=verdict, changed=changed, added=added, removed=removed,
        exclusion_notes=notes,
    )


# --------------------------------------------------------------------------
# Manifest (de)serialization — JSON, fixed field order, RFC 3339 datetimes
# --------------------------------------------------------------------------

MANIFEST_FORMAT = "fixity-manifest/1"


def _rfc3339(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_rfc3339(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)


def manifest_to_json(manifest: FixityManifest) -> str:
    doc = {
        "format": MANIFEST_FORMAT,
        "toolkit_version": manifest.toolkit_version,
        "root": manifest.root,
        "observed_at": _rfc3339(manifest.observed_at),
        "profile": {
            "algorithm": manifest.profile.algorithm.value,
            "included_headers": list(manifest.profile.included_headers),
            "include_body": manifest.profile.include_body,
            "html_only": manifest.profile.html_only,
        },
        "records": [
            {
                "target": r.target,
                "memento_uri": r.memento_uri,
                "classification": r.classification.value.value,
                "evidence": r.classification.evidence.value,
                "memento_datetime": (
                    _rfc3339(r.memento_datetime) if r.memento_datetime else None
                ),
                "content_hash": r.content_hash,
                "header_digest_input": r.header_digest_input,
                "cache_status": r.cache_status.value,
                "stability": r.stability.value,
                "raw_used": r.raw_used,
                "bypass_query_used": r.bypass_query_used,
            }
            for r in manifest.records
        ],
        "excluded": [
            {"uri": uri, "reason": reason.value} for uri, reason in manifest.excluded
        ],
        "warnings": list(manifest.warnings),
        "aggregate_hash": manifest.aggregate_hash,
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def manifest_from_json(text: str) -> FixityManifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestFormatError(f"not JSON: {exc}") from exc
    try:
        if doc["format"] != MANIFEST_FORMAT:
            raise ManifestFormatError(f"unsupported format {doc['format']!r}")
        profile = HashProfile(
            algorithm=Algorithm(doc["profile"]["algorithm"]),
            included_headers=tuple(doc["profile"]["included_headers"]),
            include_body=doc["profile"]["include_body"],
            html_only=doc["profile"]["html_only"],
        )
        records = tuple(
            ResourceRecord(
                target=r["target"],
                memento_uri=r["memento_uri"],
                classification=Classification(
                    ClassificationValue(r["classification"]),
                    Evidence(r["evidence"]),
                ),
                memento_datetime=(
                    _parse_rfc3339(r["memento_datetime"])
                    if r["memento_datetime"] else None
                ),
                content_hash=r["content_hash"],
                header_digest_input=r["header_digest_input"],
                cache_status=CacheStatus(r["cache_status"]),
                stability=Stability(r["stability"]),
                raw_used=r["raw_used"],
                bypass_query_used=r.get("bypass_query_used", False),
            )
            for r in doc["records"]
        )
        manifest = FixityManifest(
            root=doc["root"],
            observed_at=_parse_rfc3339(doc["observed_at"]),
            profile=profile,
            records=records,
            excluded=tuple(
                (e["uri"], ExclusionReason(e["reason"])) for e in doc["excluded"]
            ),
            aggregate_hash=doc["aggregate_hash"],
            toolkit_version=doc["toolkit_version"],
            warnings=tuple(doc.get("warnings", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestFormatError(f"malformed manifest: {exc}") from exc
    if records and aggregate(list(records), profile) != manifest.aggregate_hash:
        raise ManifestFormatError("aggregate_hash does not match records")
    return manifest


def load_manifest(path: str | Path) -> FixityManifest:
    return manifest_from_json(Path(path).read_text(encoding="utf-8"))


def save_manifest(manifest: FixityManifest, path: str | Path) -> None:
    Path(path).write_text(manifest_to_json(manifest), encoding="utf-8")
