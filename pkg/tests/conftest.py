import hashlib

import pytest

from gcnetomaly.ingest import NetConnEvent

BASE = 1_634_774_400  # 2021-10-21T00:00:00Z


def md5_of(text: str) -> str:
    return hashlib.md5(text.encode()).hexdigest()


def ev(machine, src, dst, t=0, proc="p", pid=1, path=None):
    return NetConnEvent(machine, BASE + t, md5_of(proc), pid, src, dst, path)


@pytest.fixture
def small_window():
    """Three monitored machines, one server, one external peer."""
    a, b, c = "10.1.0.1", "10.1.0.2", "10.1.0.3"
    srv, ext = "10.0.0.1", "8.8.8.8"
    return [
        ev("A", a, srv, 10, "svc", 100),
        ev("A", a, srv, 20, "svc", 100),
        ev("A", a, ext, 30, "browser", 200, r"C:\Program Files\b.exe"),
        ev("A", srv, a, 40, "svc", 101),
        ev("B", b, srv, 15, "svc", 300),
        ev("B", b, ext, 25, "tool", 301, r"C:\Users\x\tool.exe"),
        ev("C", c, srv, 35, "svc", 400),
        ev("C", c, b, 45, "svc", 401),
    ]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
