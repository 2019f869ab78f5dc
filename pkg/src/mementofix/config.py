"""Archive configuration: replay prefixes, deny-list patterns, banner selectors.

Classification needs a closed world, so the known replay prefixes are plain
configuration rather than discovery.  The file format is line-oriented with
INI-style section headers and ``#`` comments::

    [prefixes]
    https://web.archive.org/web/

    [deny]
    https://web.archive.org/static/

    [banner-selectors]
    wm-ipp
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from urllib.parse import urlsplit

DEFAULT_PREFIXES = [
    "https://web.archive.org/web/",
    "http://web.archive.org/web/",
]

# Wayback toolbar/static trees; conservative full-prefix patterns so live-web
# URIs that merely contain "/static/" are never swallowed.
DEFAULT_DENY = [
    "https://web.archive.org/static/",
    "http://web.archive.org/static/",
    "wayback-toolbar",
]

DEFAULT_BANNER_SELECTORS = [
    "wm-ipp",
    "wm-ipp-base",
    "wb-banner",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchiveConfig:
    prefixes: tuple[str, ...] = tuple(DEFAULT_PREFIXES)
    deny: tuple[str, ...] = tuple(DEFAULT_DENY)
    banner_selectors: tuple[str, ...] = tuple(DEFAULT_BANNER_SELECTORS)

    def is_denied(self, uri: str) -> bool:
        return any(pattern in uri for pattern in self.deny)

    def archive_hosts(self) -> frozenset[str]:
        """netlocs of the configured replay prefixes."""
        return frozenset(urlsplit(p).netloc for p in self.prefixes if p)

    def on_archive_host(self, uri: str) -> bool:
        return urlsplit(uri).netloc in self.archive_hosts()


_SECTIONS = {"prefixes", "deny", "banner-selectors"}


def parse_config(text: str) -> ArchiveConfig:
    sections: dict[str, list[str]] = {name: [] for name in _SECTIONS}
    # entries before any section header are prefixes, so a bare
    # one-prefix-per-line file is also a valid config
    current = "prefixes"
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{name}]")
            current = name
            continue
        sections[current].append(line)
    if not sections["prefixes"]:
        raise ConfigError("config must list at least one replay prefix")
    return ArchiveConfig(
        prefixes=tuple(sections["prefixes"]),
        deny=tuple(sections["deny"]),
        banner_selectors=tuple(sections["banner-selectors"] or DEFAULT_BANNER_SELECTORS),
    )


def load_config(path: str | Path | None) -> ArchiveConfig:
    """Load a config file; None returns the built-in Wayback defaults."""
    if path is None:
        return ArchiveConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))
