"""Command-line surface: hash, compare, stamp, verify, timemap, serve-fixture.

Exit codes are the contract: 0 success/match, 1 tampered or not found,
2 inconclusive/flux, 3 usage error, 4 fetch or ledger failure.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .anchor import (
    AnchorError,
    Ledger,
    NotFound,
    stamp as anchor_stamp,
    verify_timestamp,
)
from .archive_sim import ScenarioInvalid, load_scenario, serve
from .config import ConfigError, load_config
from .fetch import FetchError, FetchPolicy, fetch_resource
from .fixity import (
    Algorithm,
    EmptyManifest,
    HashProfile,
    ManifestFormatError,
    ProfileMismatch,
    RootMismatch,
    compare_manifests,
    hash_composite_memento,
    hash_html_only,
    load_manifest,
    save_manifest,
)
from .protocol import (
    NotAMemento,
    OriginalMismatch,
    TimeMapSnapshot,
    diff_timemaps,
    parse_link_format,
    parse_memento_uri,
)

EXIT_OK = 0
EXIT_TAMPERED = 1        # also: hash not found in ledger
EXIT_INCONCLUSIVE = 2    # also: TimeMap flux
EXIT_USAGE = 3
EXIT_FAILURE = 4         # fetch or ledger trouble


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mementofix", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_hash = sub.add_parser("hash", help="hash a composite memento into a manifest")
    p_hash.add_argument("uri_m", help="the memento URI to hash")
    p_hash.add_argument("--config", help="archive config file (prefixes/deny/banners)")
    p_hash.add_argument("--out", default="manifest.json", help="manifest output path")
    p_hash.add_argument("--profile", help="hash profile JSON file")
    p_hash.add_argument("--policy", help="fetch policy JSON file")
    p_hash.add_argument("--algorithm", choices=[a.value for a in Algorithm])
    p_hash.add_argument("--headers", help="comma-separated header list to hash")
    p_hash.add_argument("--body-only", action="store_true",
                        help="hash bodies only, no status/header lines")
    p_hash.add_argument("--html-only", action="store_true",
                        help="naive mode: digest the replay HTML alone")
    p_hash.add_argument("--no-cache-bypass", action="store_true")
    p_hash.add_argument("--probe-stability", action="store_true")
    p_hash.add_argument("--probe-delay-ms", type=int)
    p_hash.add_argument("--timeout-ms", type=int)
    p_hash.add_argument("--retry-limit", type=int)
    p_hash.add_argument("--max-depth", type=int, default=3)

    p_cmp = sub.add_parser("compare", help="compare two manifests")
    p_cmp.add_argument("manifest_a")
    p_cmp.add_argument("manifest_b")
    p_cmp.add_argument("--json", action="store_true", dest="as_json")

    p_stamp = sub.add_parser("stamp", help="anchor a hash or manifest aggregate")
    p_stamp.add_argument("subject", help="hex digest or manifest file")
    p_stamp.add_argument("--ledger", help="ledger path (or LEDGER_PATH env)")

    p_verify = sub.add_parser("verify", help="look up receipts for a hash")
    p_verify.add_argument("subject", help="hex digest or manifest file")
    p_verify.add_argument("--ledger", help="ledger path (or LEDGER_PATH env)")
    p_verify.add_argument("--json", action="store_true", dest="as_json")

    p_tm = sub.add_parser("timemap", help="snapshot a TimeMap or diff against a prior one")
    p_tm.add_argument("uri_t", help="the TimeMap URI")
    p_tm.add_argument("--out", default="timemap-snapshot.json")
    p_tm.add_argument("--diff", help="prior snapshot file to diff against")
    p_tm.add_argument("--json", action="store_true", dest="as_json")
    p_tm.add_argument("--timeout-ms", type=int)

    p_serve = sub.add_parser("serve-fixture", help="run the fixture replay archive")
    p_serve.add_argument("--scenario", required=True)
    p_serve.add_argument("--port", type=int, default=0)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--var", action="append", default=[],
                         help="NAME=VALUE substitution, repeatable")
    return parser


def _load_json_file(path: str, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from exc


def _profile_from_args(args) -> HashProfile:
    values: dict = {}
    if args.profile:
        doc = _load_json_file(args.profile, "profile")
        if "algorithm" in doc:
            values["algorithm"] = Algorithm(doc["algorithm"])
        if "included_headers" in doc:
            values["included_headers"] = tuple(doc["included_headers"])
        if "include_body" in doc:
            values["include_body"] = doc["include_body"]
    if args.algorithm:
        values["algorithm"] = Algorithm(args.algorithm)
    if args.headers is not None:
        values["included_headers"] = tuple(
            h.strip() for h in args.headers.split(",") if h.strip()
        )
    if args.body_only:
        values["included_headers"] = ()
    try:
        return HashProfile(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _policy_from_args(args) -> FetchPolicy:
    values: dict = {}
    if getattr(args, "policy", None):
        doc = _load_json_file(args.policy, "policy")
        allowed = {"cache_retry_limit", "cache_bypass", "stability_probe",
                   "stability_delay_ms", "request_timeout_ms", "user_agent"}
        unknown = set(doc) - allowed
        if unknown:
            raise UsageError(f"unknown policy keys: {sorted(unknown)}")
        values.update(doc)
    if getattr(args, "no_cache_bypass", False):
        values["cache_bypass"] = False
    if getattr(args, "probe_stability", False):
        values["stability_probe"] = True
    if getattr(args, "probe_delay_ms", None) is not None:
        values["stability_delay_ms"] = args.probe_delay_ms
    if getattr(args, "timeout_ms", None) is not None:
        values["request_timeout_ms"] = args.timeout_ms
    if getattr(args, "retry_limit", None) is not None:
        values["cache_retry_limit"] = args.retry_limit
    try:
        return FetchPolicy(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_hash(args) -> int:
    try:
        config = load_config(args.config)
    except (ConfigError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    profile = _profile_from_args(args)
    policy = _policy_from_args(args)
    try:
        root = parse_memento_uri(args.uri_m, list(config.prefixes))
    except NotAMemento as exc:
        raise UsageError(f"not a memento URI under configured prefixes: {exc}") from exc
    try:
        if args.html_only:
            print("warning: html-only hashing ignores embedded resources; "
                  "a tampered image will NOT change this digest", file=sys.stderr)
            digest, manifest = hash_html_only(root, policy, profile)
        else:
            manifest = hash_composite_memento(
                root, policy, profile, config, max_depth=args.max_depth
            )
    except (FetchError, EmptyManifest) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    save_manifest(manifest, args.out)
    print(f"aggregate: {manifest.aggregate_hash}")
    print(f"manifest: {args.out} ({len(manifest.records)} records, "
          f"{len(manifest.excluded)} excluded)", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        a = load_manifest(args.manifest_a)
        b = load_manifest(args.manifest_b)
    except (OSError, ManifestFormatError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        report = compare_manifests(a, b)
    except (RootMismatch, ProfileMismatch) as exc:
        raise UsageError(str(exc)) from exc
    if args.as_json:
        print(json.dumps({
            "verdict": report.verdict.value,
            "changed": [
                {"target": c.target, "hash_a": c.hash_a, "hash_b": c.hash_b}
                for c in report.changed
            ],
            "added": list(report.added),
            "removed": list(report.removed),
            "exclusion_notes": list(report.exclusion_notes),
        }, indent=2))
    else:
        print(f"verdict: {report.verdict.value}")
        for c in report.changed:
            print(f"changed: {c.target}")
            print(f"  was {c.hash_a}")
            print(f"  now {c.hash_b}")
        for uri in report.added:
            print(f"added: {uri}")
        for uri in report.removed:
            print(f"removed: {uri}")
        for note in report.exclusion_notes:
            print(f"note: {note}")
    return {
        "match": EXIT_OK,
        "tampered": EXIT_TAMPERED,
        "inconclusive": EXIT_INCONCLUSIVE,
    }[report.verdict.value]


_HEX_RE = re.compile(r"^[0-9a-f]{32}$|^[0-9a-f]{64}$")


def _subject_hash(subject: str) -> str:
    if _HEX_RE.match(subject):
        return subject
    path = Path(subject)
    if path.is_file():
        try:
            return load_manifest(path).aggregate_hash
        except ManifestFormatError as exc:
            raise UsageError(f"{subject}: {exc}") from exc
    raise UsageError(
        f"{subject!r} is neither a lowercase hex digest nor a manifest file"
    )


def _ledger_from_args(args) -> Ledger:
    path = args.ledger or os.environ.get("LEDGER_PATH")
    if not path:
        raise UsageError("no ledger: pass --ledger or set LEDGER_PATH")
    return Ledger(path)


def cmd_stamp(args) -> int:
    digest = _subject_hash(args.subject)
    ledger = _ledger_from_args(args)
    try:
        receipt = anchor_stamp(digest, ledger)
    except AnchorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"stamped: {receipt.hash}")
    print(f"address: {receipt.address}")
    print(f"sequence: {receipt.sequence}")
    print(f"recorded_at: {receipt.recorded_at.strftime('%Y-%m-%dT%H:%M:%SZ')}")
    return EXIT_OK


def cmd_verify(args) -> int:
    digest = _subject_hash(args.subject)
    ledger = _ledger_from_args(args)
    try:
        receipts = verify_timestamp(digest, ledger)
    except NotFound:
        if args.as_json:
            print(json.dumps({"hash": digest, "receipts": []}))
        else:
            print("not found")
        return EXIT_TAMPERED
    except AnchorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    if args.as_json:
        print(json.dumps({
            "hash": digest,
            "receipts": [
                {
                    "address": r.address,
                    "sequence": r.sequence,
                    "recorded_at": r.recorded_at.strftime("%Y-%m-%dT%H:%M:%SZ"),
                }
                for r in receipts
            ],
        }, indent=2))
    else:
        for r in receipts:
            print(f"receipt: address={r.address} sequence={r.sequence} "
                  f"recorded_at={r.recorded_at.strftime('%Y-%m-%dT%H:%M:%SZ')}")
    return EXIT_OK


SNAPSHOT_FORMAT = "timemap-snapshot/1"


def snapshot_to_json(snapshot: TimeMapSnapshot) -> str:
    return json.dumps({
        "format": SNAPSHOT_FORMAT,
        "timemap_uri": snapshot.timemap_uri,
        "original": snapshot.original,
        "observed_at": snapshot.observed_at.strftime("%Y-%m-%dT%H:%M:%SZ"),
        "entries": [
            {"memento_uri": uri, "datetime": dt.strftime("%Y-%m-%dT%H:%M:%SZ")}
            for uri, dt in snapshot.entries
        ],
        "dropped_entries": snapshot.dropped_entries,
    }, indent=2) + "\n"


def snapshot_from_json(text: str) -> TimeMapSnapshot:
    from .protocol import LinkRelationSet

    doc = json.loads(text)
    if doc.get("format") != SNAPSHOT_FORMAT:
        raise UsageError(f"unsupported snapshot format {doc.get('format')!r}")
    return TimeMapSnapshot(
        timemap_uri=doc["timemap_uri"],
        original=doc["original"],
        entries=tuple(
            (
                e["memento_uri"],
                datetime.strptime(e["datetime"], "%Y-%m-%dT%H:%M:%SZ").replace(
                    tzinfo=timezone.utc
                ),
            )
            for e in doc["entries"]
        ),
        relations=LinkRelationSet(),
        observed_at=datetime.strptime(
            doc["observed_at"], "%Y-%m-%dT%H:%M:%SZ"
        ).replace(tzinfo=timezone.utc),
        dropped_entries=doc.get("dropped_entries", 0),
    )


def cmd_timemap(args) -> int:
    policy_values = {}
    if args.timeout_ms is not None:
        policy_values["request_timeout_ms"] = args.timeout_ms
    policy = FetchPolicy(cache_bypass=False, **policy_values)
    try:
        result = fetch_resource(args.uri_t, policy)
    except FetchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    if not result.is_success():
        print(f"error: TimeMap fetch returned {result.status}", file=sys.stderr)
        return EXIT_FAILURE
    snapshot = parse_link_format(
        result.body.decode("utf-8", errors="replace"), base=args.uri_t
    )
    if not args.diff:
        Path(args.out).write_text(snapshot_to_json(snapshot), encoding="utf-8")
        print(f"snapshot: {args.out} ({len(snapshot.entries)} mementos)")
        return EXIT_OK
    try:
        prior = snapshot_from_json(Path(args.diff).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot read prior snapshot {args.diff}: {exc}") from exc
    try:
        delta = diff_timemaps(prior, snapshot)
    except OriginalMismatch as exc:
        raise UsageError(str(exc)) from exc
    if args.as_json:
        print(json.dumps({
            "in_flux": delta.in_flux(),
            "added": [
                {"memento_uri": u, "datetime": d.strftime("%Y-%m-%dT%H:%M:%SZ")}
                for u, d in delta.added
            ],
            "removed": [
                {"memento_uri": u, "datetime": d.strftime("%Y-%m-%dT%H:%M:%SZ")}
                for u, d in delta.removed
            ],
            "unchanged_count": delta.unchanged_count,
        }, indent=2))
    else:
        for uri, dt in delta.added:
            print(f"added: {uri} @ {dt.strftime('%Y-%m-%dT%H:%M:%SZ')}")
        for uri, dt in delta.removed:
            print(f"removed: {uri} @ {dt.strftime('%Y-%m-%dT%H:%M:%SZ')}")
        print(f"unchanged: {delta.unchanged_count}")
    return EXIT_INCONCLUSIVE if delta.in_flux() else EXIT_OK


def cmd_serve_fixture(args) -> int:
    variables = {}
    for pair in args.var:
        if "=" not in pair:
            raise UsageError(f"--var expects NAME=VALUE, got {pair!r}")
        name, value = pair.split("=", 1)
        variables[name] = value
    try:
        scenario = load_scenario(args.scenario, variables or None)
    except ScenarioInvalid as exc:
        for line in exc.errors:
            print(f"scenario error: {line}", file=sys.stderr)
        return EXIT_USAGE
    handle = serve(scenario, host=args.host, port=args.port)
    print(f"fixture archive {scenario.name!r} on {handle.base_url}", flush=True)
    print(f"replay prefix: {handle.archive_prefix}", flush=True)
    try:
        handle.thread.join()
    except KeyboardInterrupt:
        handle.close()
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "hash": cmd_hash,
            "compare": cmd_compare,
            "stamp": cmd_stamp,
            "verify": cmd_verify,
            "timemap": cmd_timemap,
            "serve-fixture": cmd_serve_fixture,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
