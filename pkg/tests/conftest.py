from __future__ import annotations

import json
from pathlib import Path

import pytest

from mementofix.archive_sim import ServerHandle, load_scenario, serve
from mementofix.config import ArchiveConfig
from mementofix.fetch import FetchPolicy

FIXTURES = Path(__file__).parent / "fixtures"
SCENARIOS = FIXTURES / "scenarios"


@pytest.fixture
def fast_policy() -> FetchPolicy:
    return FetchPolicy(stability_delay_ms=0)


@pytest.fixture
def serve_scenario():
    """Factory: start a committed fixture scenario, torn down afterwards."""
    handles: list[ServerHandle] = []

    def start(name: str, variables: dict[str, str] | None = None) -> ServerHandle:
        scenario = load_scenario(SCENARIOS / name / "scenario.json", variables)
        handle = serve(scenario)
        handles.append(handle)
        return handle

    yield start
    for handle in handles:
        handle.close()


@pytest.fixture
def serve_inline(tmp_path):
    """Factory: write an ad-hoc scenario to tmp_path and serve it."""
    handles: list[ServerHandle] = []
    counter = [0]

    def start(doc: dict, files: dict[str, bytes | str],
              variables: dict[str, str] | None = None) -> ServerHandle:
        counter[0] += 1
        scenario_dir = tmp_path / f"scenario{counter[0]}"
        scenario_dir.mkdir()
        for name, content in files.items():
            if isinstance(content, str):
                (scenario_dir / name).write_text(content, encoding="utf-8")
            else:
                (scenario_dir / name).write_bytes(content)
        (scenario_dir / "scenario.json").write_text(json.dumps(doc), encoding="utf-8")
        handle = serve(load_scenario(scenario_dir / "scenario.json", variables))
        handles.append(handle)
        return handle

    yield start
    for handle in handles:
        handle.close()


def config_for(server: ServerHandle, deny: tuple[str, ...] = (),
               banner_selectors: tuple[str, ...] = ("wm-ipp", "wb-banner")) -> ArchiveConfig:
    return ArchiveConfig(
        prefixes=(server.archive_prefix,),
        deny=deny,
        banner_selectors=banner_selectors,
    )


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    outcome = "PASS" if report.passed else "FAIL"
    print(f"\n[{outcome}] {name}")
