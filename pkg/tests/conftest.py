from __future__ import annotations

from ipaddress import IPv4Address

import pytest

from segwatch.capture import (ETHERTYPE_IPV4, PROTO_TCP, PROTO_UDP, IPv4Info, L4Info,
                              PacketRecord, mac_for_ip)
from segwatch.sim import bundled, load_config, load_profile, run_scenario


def pkt(ts_us, src, dst, sport=1000, dport=502, proto=PROTO_TCP, flags=0x18, size=60,
        obs="c1"):
    """Small builder for IPv4 packet records used throughout the tests."""
    src, dst = IPv4Address(src), IPv4Address(dst)
    l4 = None
    if proto in (PROTO_TCP, PROTO_UDP):
        l4 = L4Info(sport, dport, flags if proto == PROTO_TCP else 0)
    ip = IPv4Info(src, dst, proto, size - 14)
    return PacketRecord(ts_us, obs, mac_for_ip(src), mac_for_ip(dst), ETHERTYPE_IPV4,
                        ip, l4, size, False)


@pytest.fixture(scope="session")
def fig2():
    return load_config(bundled("fig2.json"))


_runs: dict = {}


def scenario(name: str, duration_s: float = 600, monitoring: bool = True, seed=None):
    """Run a bundled fig2 profile once per session (runs are pure, so caching is safe)."""
    key = (name, duration_s, monitoring, seed)
    if key not in _runs:
        cfg = load_config(bundled("fig2.json"))
        prof = load_profile(bundled(f"fig2_{name}.json"), cfg.hosts)
        _runs[key] = run_scenario(cfg, prof, duration_s, monitoring=monitoring, seed=seed)
    return _runs[key]


@pytest.fixture(scope="session")
def run_fig2():
    return scenario


# -- acceptance summary ---------------------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _criteria[n] = (title, "PASS" if rep.outcome == "passed" else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, verdict = _criteria[n]
        terminalreporter.write_line(f"[{verdict}] criterion {n:2d}: {title}")
