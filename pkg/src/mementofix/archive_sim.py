"""Deterministic fixture replay archive.

Serves declared captures under ``/web/<timestamp14><modifier>/<original-uri>``
with replay-time link rewriting and banner injection; the ``id_`` variant
returns the stored bytes verbatim.  Scripted cache HIT/MISS sequences,
rotating bodies, tamper switches, TimeMap states and donotnegotiate statics
reproduce the adversarial-archive scenarios the pipeline must survive, all
advanced by an explicit control endpoint rather than wall-clock time so test
runs are reproducible.

Scenario files are JSON; see tests/fixtures/scenarios for committed examples.
String values (and body files) may reference ``{{VARIABLES}}`` resolved at
load time, which lets a scenario point at a second server bound to an
ephemeral port.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from .extract import discover_resources
from .protocol import format_http_datetime, DO_NOT_NEGOTIATE_URI, MementoUri, OriginalUri, Modifier

BANNER_DIV_ID = "wm-ipp"
ARCHIVE_COMMENT = (
    "\n FILE ARCHIVED ON {captured} AND RETRIEVED FROM THE\n"
    " FIXTURE ARCHIVE ON REPLAY. BANNER AND COMMENT ARE\n"
    " ARCHIVE-SPECIFIC AND NOT PART OF THE CAPTURE.\n"
)


class ScenarioInvalid(Exception):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class ScenarioResource:
    uri_r: str
    timestamp14: str
    content_type: str
    body: bytes
    banner: bool = True
    raw_unavailable: bool = False
    tamper_body: bytes | None = None
    tamper_after_requests: int | None = None
    alt_content_type: str | None = None
    cache_script: list[str] = field(default_factory=list)
    dynamic_cycle: list[bytes] = field(default_factory=list)
    donotnegotiate: bool = False
    cache_ignores_query: bool = False

    def replay_modifier(self) -> str:
        return "im_" if self.content_type.startswith("image/") else ""

    def is_html(self) -> bool:
        return self.content_type.split(";")[0].strip() == "text/html"


@dataclass
class ScenarioStatic:
    path: str
    content_type: str
    body: bytes
    donotnegotiate: bool = True


@dataclass
class Scenario:
    name: str
    resources: list[ScenarioResource]
    statics: list[ScenarioStatic] = field(default_factory=list)
    timemaps: dict[str, list[list[str]]] = field(default_factory=dict)
    expected_dangling: list[str] = field(default_factory=list)
    banner_script: str | None = None

    def find(self, timestamp14: str, uri_r: str) -> ScenarioResource | None:
        for r in self.resources:
            if r.timestamp14 == timestamp14 and r.uri_r == uri_r:
                return r
        return None


_VAR_RE = re.compile(r"\{\{([A-Z0-9_]+)\}\}")


def _substitute(text: str, variables: dict[str, str]) -> str:
    return _VAR_RE.sub(lambda m: variables.get(m.group(1), m.group(0)), text)


def _substitute_bytes(data: bytes, variables: dict[str, str]) -> bytes:
    for name, value in variables.items():
        data = data.replace(b"{{" + name.encode() + b"}}", value.encode())
    return data


def load_scenario(path: str | Path, variables: dict[str, str] | None = None) -> Scenario:
    """Load and validate a scenario file; raises ScenarioInvalid with all errors."""
    path = Path(path)
    errors: list[str] = []
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioInvalid([f"{path}: line {exc.lineno}: {exc.msg}"]) from exc
    except OSError as exc:
        raise ScenarioInvalid([f"{path}: unreadable: {exc}"]) from exc

    variables = {**raw.get("variables", {}), **(variables or {})}
    base_dir = path.parent

    def read_body(name: str, where: str) -> bytes:
        file_path = base_dir / name
        if not file_path.is_file():
            errors.append(f"{where}: body file {name!r} not found")
            return b""
        return _substitute_bytes(file_path.read_bytes(), variables)

    resources: list[ScenarioResource] = []
    seen_routes: set[tuple[str, str]] = set()
    for i, r in enumerate(raw.get("resources", [])):
        where = f"resources[{i}]"
        uri_r = _substitute(r.get("uri_r", ""), variables)
        ts = r.get("timestamp14", "")
        if not re.fullmatch(r"\d{14}", ts or ""):
            errors.append(f"{where}: timestamp14 must be 14 digits, got {ts!r}")
            continue
        try:
            MementoUri(archive_prefix="http://x/web/", timestamp14=ts,
                       target=OriginalUri(uri_r))
        except ValueError as exc:
            errors.append(f"{where}: {exc}")
            continue
        if (ts, uri_r) in seen_routes:
            errors.append(f"{where}: overlapping route for {ts} {uri_r}")
            continue
        seen_routes.add((ts, uri_r))
        if "body_file" not in r:
            errors.append(f"{where}: missing body_file")
            continue
        tamper = r.get("tamper") or {}
        cache_script = [s.upper() for s in r.get("cache_script", [])]
        for s in cache_script:
            if s not in ("HIT", "MISS"):
                errors.append(f"{where}: cache_script entries must be HIT/MISS")
        resources.append(ScenarioResource(
            uri_r=uri_r,
            timestamp14=ts,
            content_type=r.get("content_type", "application/octet-stream"),
            body=read_body(r["body_file"], where),
            banner=r.get("banner", True),
            raw_unavailable=r.get("raw_unavailable", False),
            tamper_body=(
                read_body(tamper["body_file"], where) if tamper.get("body_file") else None
            ),
            tamper_after_requests=tamper.get("after_requests"),
            alt_content_type=r.get("alt_content_type"),
            cache_script=cache_script,
            dynamic_cycle=[
                read_body(f, where) for f in r.get("dynamic_cycle", []) or []
            ],
            donotnegotiate=r.get("donotnegotiate", False),
            cache_ignores_query=r.get("cache_ignores_query", False),
        ))

    statics: list[ScenarioStatic] = []
    seen_paths: set[str] = set()
    for i, s in enumerate(raw.get("statics", [])):
        where = f"statics[{i}]"
        static_path = _substitute(s.get("path", ""), variables)
        if not static_path.startswith("/"):
            errors.append(f"{where}: path must start with '/'")
            continue
        if static_path in seen_paths:
            errors.append(f"{where}: duplicate static path {static_path}")
            continue
        seen_paths.add(static_path)
        if "body_file" not in s:
            errors.append(f"{where}: missing body_file")
            continue
        statics.append(ScenarioStatic(
            path=static_path,
            content_type=s.get("content_type", "application/octet-stream"),
            body=read_body(s["body_file"], where),
            donotnegotiate=s.get("donotnegotiate", True),
        ))

    timemaps: dict[str, list[list[str]]] = {}
    for uri_r, states in (raw.get("timemaps") or {}).items():
        uri_r = _substitute(uri_r, variables)
        checked: list[list[str]] = []
        for j, state in enumerate(states):
            entries = []
            for k, entry in enumerate(state):
                ts = entry.get("timestamp14", "")
                if not re.fullmatch(r"\d{14}", ts or ""):
                    errors.append(
                        f"timemaps[{uri_r!r}][{j}][{k}]: bad timestamp14 {ts!r}"
                    )
                    continue
                entries.append(ts)
            checked.append(entries)
        timemaps[uri_r] = checked

    scenario = Scenario(
        name=raw.get("name", path.stem),
        resources=resources,
        statics=statics,
        timemaps=timemaps,
        expected_dangling=[
            _substitute(d, variables) for d in raw.get("expected_dangling", [])
        ],
        banner_script=(
            _substitute(raw["banner_script"], variables)
            if raw.get("banner_script") else None
        ),
    )
    if scenario.banner_script and scenario.banner_script not in seen_paths:
        errors.append(f"banner_script {scenario.banner_script!r} is not a declared static")
    if not errors:
        errors.extend(_check_references(scenario))
    if errors:
        raise ScenarioInvalid(errors)
    return scenario


_VALIDATION_BASE = "http://fixture.invalid"


def _check_references(scenario: Scenario) -> list[str]:
    """Every rewritten reference must resolve to a declared route or be
    deliberately dangling (listed in expected_dangling)."""
    errors = []
    declared_targets = {r.uri_r for r in scenario.resources}
    declared_statics = {s.path for s in scenario.statics}
    state = _ServerState(scenario)
    for r in scenario.resources:
        if not (r.is_html() or r.content_type.startswith("text/css")):
            continue
        body = _render_replay(scenario, r, state, _VALIDATION_BASE, r.body)
        found = discover_resources(
            body, r.content_type, base=f"{_VALIDATION_BASE}/web/{r.timestamp14}/{r.uri_r}"
        )
        for res in found:
            uri = res.resolved_uri
            if uri.startswith(_VALIDATION_BASE):
                rest = uri[len(_VALIDATION_BASE):]
                if rest in declared_statics:
                    continue
                m = re.match(r"^/web/(\d{14})(?:[a-z]{1,8}_)?/(.*)$", rest)
                if m and m.group(2) in declared_targets:
                    continue
                errors.append(
                    f"{r.uri_r}: reference {res.raw_reference!r} does not resolve "
                    f"to a declared route"
                )
            elif uri in declared_targets or uri in scenario.expected_dangling:
                continue
            else:
                errors.append(
                    f"{r.uri_r}: reference {uri!r} is neither declared nor "
                    f"listed in expected_dangling"
                )
    return errors


def validate_scenario(path: str | Path) -> Scenario:
    """Alias for load_scenario with default variables; raises ScenarioInvalid."""
    return load_scenario(path)


# --------------------------------------------------------------------------
# Server
# --------------------------------------------------------------------------

class _ServerState:
    """All mutable scenario state, guarded by one lock, reset-able."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.lock = threading.Lock()
        self.reset()

    def reset(self) -> None:
        self.request_counts: dict[str, int] = {}
        self.resource_counters: dict[tuple[str, str], int] = {}
        self.variant_cache: dict[tuple[str, str, str], bytes] = {}
        self.tamper_fired = False
        self.ctype_fired = False
        self.timemap_index = 0
        self.banner_bump = 0

    def count(self, path: str) -> int:
        self.request_counts[path] = self.request_counts.get(path, 0) + 1
        return self.request_counts[path]

    def next_counter(self, resource: ScenarioResource) -> int:
        key = (resource.timestamp14, resource.uri_r)
        n = self.resource_counters.get(key, 0)
        self.resource_counters[key] = n + 1
        return n


def _current_raw_body(resource: ScenarioResource, state: _ServerState,
                      counter: int) -> bytes:
    if resource.dynamic_cycle:
        return resource.dynamic_cycle[counter % len(resource.dynamic_cycle)]
    tampered = state.tamper_fired or (
        resource.tamper_after_requests is not None
        and counter >= resource.tamper_after_requests
    )
    if tampered and resource.tamper_body is not None:
        return resource.tamper_body
    return resource.body


def _render_replay(scenario: Scenario, resource: ScenarioResource,
                   state: _ServerState, base: str, body: bytes) -> bytes:
    """Rewrite declared links into the archive and inject the banner."""
    if resource.is_html() or resource.content_type.startswith("text/css"):
        # single pass, longest alternative first, so one original URI being a
        # prefix of another never produces nested rewrites
        by_length = sorted(scenario.resources, key=lambda x: len(x.uri_r), reverse=True)
        replay_map = {
            r.uri_r.encode():
                f"{base}/web/{r.timestamp14}{r.replay_modifier()}/{r.uri_r}".encode()
            for r in by_length
        }
        if replay_map:
            pattern = re.compile(
                b"|".join(re.escape(u) for u in replay_map)
            )
            body = pattern.sub(lambda m: replay_map[m.group(0)], body)
    if resource.is_html() and resource.banner:
        version = 1 + state.banner_bump
        captures = len(scenario.resources) + state.banner_bump
        banner = (
            f'<div id="{BANNER_DIV_ID}">fixture archive banner v{version} '
            f"&mdash; {captures} captures</div>"
        )
        if scenario.banner_script:
            banner += f'<script src="{base}{scenario.banner_script}"></script>'
        comment = "<!--" + ARCHIVE_COMMENT.format(
            captured=format_http_datetime(
                MementoUri(
                    archive_prefix=f"{base}/web/",
                    timestamp14=resource.timestamp14,
                    target=OriginalUri(resource.uri_r),
                ).capture_datetime()
            )
        ) + "-->"
        text = body.decode("utf-8", errors="replace")
        if re.search(r"<body[^>]*>", text, re.IGNORECASE):
            text = re.sub(r"<body[^>]*>", lambda mm: mm.group(0) + banner,
                          text, count=1, flags=re.IGNORECASE)
        else:
            text = banner + text
        if "</body>" in text:
            text = text.replace("</body>", comment + "</body>", 1)
        else:
            text += comment
        body = text.encode("utf-8")
    return body


_MEMENTO_PATH_RE = re.compile(r"^/web/(\d{14})([a-z]{1,8}_)?/(.+)$", re.DOTALL)


class _FixtureHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "FixtureArchive/1"

    # set by serve()
    state: _ServerState = None  # type: ignore[assignment]

    def log_message(self, *args):  # quiet
        pass

    def _base(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def _respond(self, status: int, content_type: str | None, body: bytes,
                 extra_headers: list[tuple[str, str]] | None = None,
                 head_only: bool = False) -> None:
        # send_response_only: no Date/Server headers, so responses are
        # byte-identical across restarts
        self.send_response_only(status)
        if content_type:
            self.send_header("Content-Type", content_type)
        for name, value in extra_headers or []:
            self.send_header(name, value)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if not head_only:
            self.wfile.write(body)

    def do_GET(self):
        self._handle(head_only=False)

    def do_HEAD(self):
        self._handle(head_only=True)

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            self.rfile.read(length)  # drain so keep-alive connections stay usable
        path = self.path.split("?")[0]
        state = self.state
        with state.lock:
            state.count(path)
            if path.startswith("/_control/"):
                event = path[len("/_control/"):]
                ok = self._apply_control(event)
                body = json.dumps({"ok": ok, "event": event}).encode()
                self._respond(200 if ok else 400, "application/json", body)
                return
        self._respond(404, "text/plain", b"not found")

    def _apply_control(self, event: str) -> bool:
        state = self.state
        if event == "tamper":
            state.tamper_fired = True
        elif event == "timemap":
            state.timemap_index += 1
        elif event == "banner":
            state.banner_bump += 1
        elif event == "ctype":
            state.ctype_fired = True
        elif event == "reset":
            state.reset()
        else:
            return False
        return True

    def _handle(self, head_only: bool) -> None:
        raw_path = self.path
        path, _, query = raw_path.partition("?")
        state = self.state
        with state.lock:
            state.count(path)
            if path == "/_control/hits":
                body = json.dumps(state.request_counts, sort_keys=True).encode()
                self._respond(200, "application/json", body, head_only=head_only)
                return
            for static in state.scenario.statics:
                if path == static.path:
                    headers = []
                    if static.donotnegotiate:
                        headers.append(
                            ("Link", f'<{DO_NOT_NEGOTIATE_URI}>; rel="type"')
                        )
                    self._respond(200, static.content_type, static.body,
                                  headers, head_only)
                    return
            if path.startswith("/web/timemap/link/"):
                self._serve_timemap(path[len("/web/timemap/link/"):], head_only)
                return
            m = _MEMENTO_PATH_RE.match(path)
            if m:
                self._serve_memento(m.group(1), m.group(2) or "", m.group(3),
                                    query, head_only)
                return
            self._respond(404, "text/html", b"<html><body>not found</body></html>",
                          head_only=head_only)

    def _serve_memento(self, ts: str, modifier: str, target: str, query: str,
                       head_only: bool) -> None:
        state = self.state
        scenario = state.scenario
        resource = scenario.find(ts, target)
        if resource is None or modifier not in ("", "id_", "im_"):
            self._respond(404, "text/html", b"<html><body>no capture</body></html>",
                          head_only=head_only)
            return
        if modifier == "id_" and resource.raw_unavailable:
            self._respond(404, "text/html", b"<html><body>raw unavailable</body></html>",
                          head_only=head_only)
            return

        counter = state.next_counter(resource)
        base = self._base()
        raw_body = _current_raw_body(resource, state, counter)
        if modifier == "":
            fresh = _render_replay(scenario, resource, state, base, raw_body)
        else:
            fresh = raw_body

        cache_key = (resource.timestamp14, resource.uri_r, modifier)
        cache_status = None
        if resource.cache_script:
            scripted = resource.cache_script[counter % len(resource.cache_script)]
            if "_mfx_nocache" in query and not resource.cache_ignores_query:
                scripted = "MISS"  # changed URI: different cache key, always fresh
            if scripted == "HIT" and cache_key in state.variant_cache:
                body = state.variant_cache[cache_key]
                cache_status = "HIT"
            else:
                body = fresh
                state.variant_cache[cache_key] = body
                cache_status = scripted if scripted == "MISS" else "HIT"
        else:
            body = fresh

        content_type = resource.content_type
        if state.ctype_fired and resource.alt_content_type:
            content_type = resource.alt_content_type

        headers = [
            ("Memento-Datetime", format_http_datetime(
                MementoUri(
                    archive_prefix=f"{base}/web/",
                    timestamp14=ts,
                    target=OriginalUri(resource.uri_r),
                ).capture_datetime()
            )),
            ("Link",
             f'<{resource.uri_r}>; rel="original", '
             f'<{base}/web/timemap/link/{resource.uri_r}>; rel="timemap"; '
             f'type="application/link-format"'
             + (f', <{DO_NOT_NEGOTIATE_URI}>; rel="type"'
                if resource.donotnegotiate else "")),
        ]
        if cache_status is not None:
            headers.append(("X-Page-Cache", cache_status))
        self._respond(200, content_type, body, headers, head_only)

    def _serve_timemap(self, target: str, head_only: bool) -> None:
        state = self.state
        scenario = state.scenario
        base = self._base()
        if target in scenario.timemaps:
            states = scenario.timemaps[target]
            entries = states[min(state.timemap_index, len(states) - 1)]
        else:
            declared = [r for r in scenario.resources if r.uri_r == target]
            if not declared:
                self._respond(404, "text/plain", b"no timemap", head_only=head_only)
                return
            entries = [r.timestamp14 for r in declared]

        modifier = ""
        for r in scenario.resources:
            if r.uri_r == target:
                modifier = r.replay_modifier()
                break
        links = [
            f'<{target}>; rel="original"',
            f'<{base}/web/timemap/link/{target}>; rel="self"; '
            f'type="application/link-format"',
        ]
        for i, ts in enumerate(sorted(entries)):
            rels = ["memento"]
            if len(entries) > 1 and i == 0:
                rels.insert(0, "first")
            if len(entries) > 1 and i == len(entries) - 1:
                rels.insert(0, "last")
            dt = MementoUri(
                archive_prefix=f"{base}/web/", timestamp14=ts,
                target=OriginalUri(target),
            ).capture_datetime()
            links.append(
                f'<{base}/web/{ts}{modifier}/{target}>; '
                f'rel="{" ".join(rels)}"; datetime="{format_http_datetime(dt)}"'
            )
        body = (",\n".join(links) + "\n").encode("utf-8")
        self._respond(200, "application/link-format", body, head_only=head_only)


@dataclass
class ServerHandle:
    scenario: Scenario
    httpd: ThreadingHTTPServer
    thread: threading.Thread
    state: _ServerState

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    @property
    def base_url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def archive_prefix(self) -> str:
        return f"{self.base_url}/web/"

    def hits(self, path: str) -> int:
        with self.state.lock:
            return self.state.request_counts.get(path, 0)

    def total_hits(self) -> dict[str, int]:
        with self.state.lock:
            return dict(self.state.request_counts)

    def memento_uri(self, resource: ScenarioResource,
                    modifier: Modifier = Modifier.NONE) -> MementoUri:
        return MementoUri(
            archive_prefix=self.archive_prefix,
            timestamp14=resource.timestamp14,
            modifier=modifier,
            target=OriginalUri(resource.uri_r),
        )

    def timemap_uri(self, uri_r: str) -> str:
        return f"{self.base_url}/web/timemap/link/{uri_r}"

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join(timeout=5)

    def __enter__(self) -> "ServerHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def serve(scenario: Scenario, host: str = "127.0.0.1", port: int = 0) -> ServerHandle:
    """Start the fixture archive on an ephemeral port; caller must close()."""
    state = _ServerState(scenario)
    handler = type("BoundHandler", (_FixtureHandler,), {"state": state})
    httpd = ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    return ServerHandle(scenario=scenario, httpd=httpd, thread=thread, state=state)
