from __future__ import annotations

import json
import subprocess
import sys

import pytest
import requests
from conftest import SCENARIOS

from mementofix.cli import main


@pytest.fixture
def archive_cfg(tmp_path):
    def write(server, deny=()):
        path = tmp_path / "archive.cfg"
        lines = ["[prefixes]", server.archive_prefix, "", "[deny]"]
        lines += list(deny)
        lines += ["", "[banner-selectors]", "wm-ipp"]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return str(path)
    return write


def _aggregate_from(capsys) -> str:
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith("aggregate: ")]
    assert len(lines) == 1
    return lines[0].split(": ", 1)[1]


class TestCmdHash:
    def test_deterministic_across_runs(self, serve_scenario, archive_cfg,
                                       tmp_path, capsys):
        server = serve_scenario("co2_text")
        cfg = archive_cfg(server)
        uri = server.memento_uri(server.scenario.resources[0]).serialize()
        digests = set()
        for i in range(3):
            out = tmp_path / f"m{i}.json"
            assert main(["hash", uri, "--config", cfg, "--out", str(out)]) == 0
            digests.add(_aggregate_from(capsys))
        assert len(digests) == 1

    def test_not_a_memento_is_usage_error(self, serve_scenario, archive_cfg):
        server = serve_scenario("co2_text")
        cfg = archive_cfg(server)
        assert main(["hash", "http://www.cnn.com/", "--config", cfg]) == 3

    def test_unreachable_archive_is_fetch_failure(self, tmp_path):
        cfg = tmp_path / "archive.cfg"
        cfg.write_text("[prefixes]\nhttp://127.0.0.1:9/web/\n")
        code = main([
            "hash", "http://127.0.0.1:9/web/20170101000000/http://x.test/",
            "--config", str(cfg), "--out", str(tmp_path / "m.json"),
            "--timeout-ms", "300",
        ])
        assert code == 4

    def test_html_only_prints_warning(self, serve_scenario, archive_cfg,
                                      tmp_path, capsys):
        server = serve_scenario("co2_image")
        cfg = archive_cfg(server)
        uri = server.memento_uri(server.scenario.resources[0]).serialize()
        assert main(["hash", uri, "--config", cfg, "--html-only",
                     "--out", str(tmp_path / "m.json")]) == 0
        captured = capsys.readouterr()
        assert "html-only" in captured.err

    def test_html_only_misses_image_tamper(self, serve_scenario, archive_cfg,
                                           tmp_path, capsys):
        server = serve_scenario("co2_image")
        cfg = archive_cfg(server)
        uri = server.memento_uri(server.scenario.resources[0]).serialize()
        main(["hash", uri, "--config", cfg, "--html-only",
              "--out", str(tmp_path / "a.json")])
        first = _aggregate_from(capsys)
        requests.post(server.base_url + "/_control/tamper")
        main(["hash", uri, "--config", cfg, "--html-only",
              "--out", str(tmp_path / "b.json")])
        assert _aggregate_from(capsys) == first

    def test_default_mode_catches_image_tamper(self, serve_scenario, archive_cfg,
                                               tmp_path, capsys):
        server = serve_scenario("co2_image")
        cfg = archive_cfg(server)
        uri = server.memento_uri(server.scenario.resources[0]).serialize()
        main(["hash", uri, "--config", cfg, "--out", str(tmp_path / "a.json")])
        first = _aggregate_from(capsys)
        requests.post(server.base_url + "/_control/tamper")
        main(["hash", uri, "--config", cfg, "--out", str(tmp_path / "b.json")])
        assert _aggregate_from(capsys) != first


def _hash_pair(server, cfg, tmp_path, tamper=True, extra=()):
    uri = server.memento_uri(server.scenario.resources[0]).serialize()
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    assert main(["hash", uri, "--config", cfg, "--out", str(a), *extra]) == 0
    if tamper:
        requests.post(server.base_url + "/_control/tamper")
    assert main(["hash", uri, "--config", cfg, "--out", str(b), *extra]) == 0
    return str(a), str(b)


class TestCmdCompare:
    def test_identical_exit_zero(self, serve_scenario, archive_cfg, tmp_path, capsys):
        server = serve_scenario("co2_image")
        cfg = archive_cfg(server)
        a, b = _hash_pair(server, cfg, tmp_path, tamper=False)
        assert main(["compare", a, b]) == 0
        assert "match" in capsys.readouterr().out

    def test_tamper_pair_exit_one_names_gif(self, serve_scenario, archive_cfg,
                                            tmp_path, capsys):
        server = serve_scenario("co2_image")
        cfg = archive_cfg(server)
        a, b = _hash_pair(server, cfg, tmp_path)
        assert main(["compare", a, b]) == 1
        assert "co2_left.gif" in capsys.readouterr().out

    def test_dynamic_drift_exit_two(self, serve_scenario, archive_cfg,
                                    tmp_path, capsys):
        server = serve_scenario("dynamic")
        cfg = archive_cfg(server)
        uri = server.memento_uri(server.scenario.resources[0]).serialize()
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        main(["hash", uri, "--config", cfg, "--out", str(a)])
        main(["hash", uri, "--config", cfg, "--out", str(b),
              "--probe-stability", "--probe-delay-ms", "0"])
        assert main(["compare", str(a), str(b)]) == 2

    def test_mismatched_roots_exit_three(self, serve_scenario, archive_cfg,
                                         tmp_path, capsys):
        server = serve_scenario("co2_image")
        cfg = archive_cfg(server)
        root = server.memento_uri(server.scenario.resources[0]).serialize()
        chart = server.memento_uri(server.scenario.resources[1]).serialize()
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        main(["hash", root, "--config", cfg, "--out", str(a)])
        main(["hash", chart, "--config", cfg, "--out", str(b)])
        assert main(["compare", str(a), str(b)]) == 3

    def test_json_output_parses(self, serve_scenario, archive_cfg, tmp_path, capsys):
        server = serve_scenario("co2_image")
        cfg = archive_cfg(server)
        a, b = _hash_pair(server, cfg, tmp_path)
        capsys.readouterr()
        main(["compare", a, b, "--json"])
        doc = json.loads(capsys.readouterr().out)
        assert doc["verdict"] == "tampered"
        assert doc["changed"][0]["target"].endswith("co2_left.gif")


class TestStampVerify:
    def test_round_trip(self, serve_scenario, archive_cfg, tmp_path, capsys):
        server = serve_scenario("co2_image")
        cfg = archive_cfg(server)
        a, _ = _hash_pair(server, cfg, tmp_path, tamper=False)
        ledger = str(tmp_path / "ledger.ndjson")
        assert main(["stamp", a, "--ledger", ledger]) == 0
        out = capsys.readouterr().out
        assert "address: 1" in out
        assert main(["verify", a, "--ledger", ledger]) == 0

    def test_verify_unknown_hash_exit_one(self, tmp_path, capsys):
        ledger = str(tmp_path / "ledger.ndjson")
        main(["stamp", "ab" * 32, "--ledger", ledger])
        assert main(["verify", "cd" * 32, "--ledger", ledger]) == 1
        assert "not found" in capsys.readouterr().out

    def test_tamper_breaks_verification(self, serve_scenario, archive_cfg,
                                        tmp_path, capsys):
        # stamp the healthy aggregate, tamper the archive, re-hash, verify fails
        server = serve_scenario("co2_image")
        cfg = archive_cfg(server)
        a, b = _hash_pair(server, cfg, tmp_path)
        ledger = str(tmp_path / "ledger.ndjson")
        assert main(["stamp", a, "--ledger", ledger]) == 0
        assert main(["verify", a, "--ledger", ledger]) == 0
        assert main(["verify", b, "--ledger", ledger]) == 1

    def test_ledger_from_environment(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("LEDGER_PATH", str(tmp_path / "env-ledger.ndjson"))
        assert main(["stamp", "ab" * 32]) == 0
        assert main(["verify", "ab" * 32]) == 0

    def test_missing_ledger_is_usage_error(self, capsys, monkeypatch):
        monkeypatch.delenv("LEDGER_PATH", raising=False)
        assert main(["stamp", "ab" * 32]) == 3

    def test_verify_json_round_trips(self, tmp_path, capsys):
        ledger = str(tmp_path / "ledger.ndjson")
        main(["stamp", "ab" * 32, "--ledger", ledger])
        capsys.readouterr()
        main(["verify", "ab" * 32, "--ledger", ledger, "--json"])
        doc = json.loads(capsys.readouterr().out)
        assert doc["receipts"][0]["sequence"] == 0


class TestCmdTimemap:
    def test_snapshot_then_no_change(self, serve_scenario, tmp_path, capsys):
        server = serve_scenario("timemap")
        uri_t = server.timemap_uri("http://ichef.example.test/wwhp/144/photo.jpg")
        snap = str(tmp_path / "snap.json")
        assert main(["timemap", uri_t, "--out", snap]) == 0
        assert main(["timemap", uri_t, "--diff", snap]) == 0

    def test_empty_to_one_exit_two(self, serve_scenario, tmp_path, capsys):
        server = serve_scenario("timemap")
        uri_t = server.timemap_uri("http://ichef.example.test/wwhp/144/photo.jpg")
        snap = str(tmp_path / "snap.json")
        main(["timemap", uri_t, "--out", snap])
        requests.post(server.base_url + "/_control/timemap")
        capsys.readouterr()
        assert main(["timemap", uri_t, "--diff", snap, "--json"]) == 2
        doc = json.loads(capsys.readouterr().out)
        assert len(doc["added"]) == 1
        assert doc["added"][0]["datetime"] == "2017-08-07T23:05:27Z"
        assert doc["removed"] == []

    def test_decreased_timemap_reports_removed(self, serve_scenario,
                                               tmp_path, capsys):
        server = serve_scenario("timemap")
        uri_t = server.timemap_uri("http://ichef.example.test/wwhp/144/photo.jpg")
        requests.post(server.base_url + "/_control/timemap")
        snap = str(tmp_path / "snap.json")
        main(["timemap", uri_t, "--out", snap])
        requests.post(server.base_url + "/_control/reset")
        capsys.readouterr()
        assert main(["timemap", uri_t, "--diff", snap, "--json"]) == 2
        doc = json.loads(capsys.readouterr().out)
        assert len(doc["removed"]) == 1 and doc["added"] == []

    def test_fetch_failure_exit_four(self, capsys):
        assert main(["timemap", "http://127.0.0.1:9/web/timemap/link/http://x/",
                     "--timeout-ms", "300"]) == 4


class TestServeFixtureCommand:
    def test_invalid_scenario_exit_three(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["serve-fixture", "--scenario", str(bad)]) == 3
        assert "scenario error" in capsys.readouterr().err

    def test_bad_var_syntax_exit_three(self, capsys):
        scenario = SCENARIOS / "co2_image" / "scenario.json"
        assert main(["serve-fixture", "--scenario", str(scenario),
                     "--var", "NOEQUALS"]) == 3

    def test_serves_until_terminated(self):
        scenario = SCENARIOS / "co2_image" / "scenario.json"
        proc = subprocess.Popen(
            [sys.executable, "-m", "mementofix.cli", "serve-fixture",
             "--scenario", str(scenario), "--port", "0"],
            stdout=subprocess.PIPE, text=True,
        )
        try:
            banner = proc.stdout.readline()
            assert "fixture archive" in banner
            prefix_line = proc.stdout.readline()
            base = prefix_line.split(": ", 1)[1].strip()
            r = requests.get(
                base + "20170717185130id_/"
                "https://climate.example.test/system/charts/co2_left.gif"
            )
            assert r.status_code == 200
        finally:
            proc.terminate()
            proc.wait(timeout=5)


class TestUsage:
    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 3

    def test_no_command(self, capsys):
        assert main([]) == 3
