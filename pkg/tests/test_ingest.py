import io
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcnetomaly.ingest import (
    SECONDS_PER_DAY,
    Locality,
    MachineType,
    NetConnEvent,
    WindowSpec,
    filter_subset,
    label_machine,
    parse_events,
    parse_timestamp,
    resolve_machine_ips,
    serialize_events,
    subset_predicate,
    window_events,
    windows_covering,
)

from conftest import BASE, ev, md5_of


def _line(**overrides):
    record = {
        "machine_id": "ATM-1",
        "timestamp": BASE,
        "md5": md5_of("x"),
        "pid": 7,
        "src_ip": "10.1.0.1",
        "dst_ip": "10.0.0.1",
    }
    record.update(overrides)
    return json.dumps(record)


def test_parse_empty_stream():
    result = parse_events(io.StringIO(""))
    assert result.events == [] and result.skipped == 0


def test_parse_preserves_order():
    lines = [_line(pid=k) for k in (3, 1, 2)]
    result = parse_events(lines)
    assert [e.pid for e in result.events] == [3, 1, 2]
    assert result.skipped == 0


def test_short_md5_is_skipped():
    lines = [_line(), _line(md5="a" * 30), _line(pid=9)]
    result = parse_events(lines)
    assert len(result.events) == 2 and result.skipped == 1


@pytest.mark.parametrize(
    "bad",
    [
        _line(md5="A" * 32),
        _line(src_ip="10.0.0.1", dst_ip="10.0.0.1"),
        _line(pid=-1),
        _line(pid="7"),
        _line(src_ip="999.1.1.1"),
        _line(timestamp="yesterday"),
        "not json",
        "[1, 2]",
        json.dumps({"machine_id": "x"}),
    ],
)
def test_malformed_lines_are_counted(bad):
    result = parse_events([bad, _line()])
    assert result.skipped == 1 and len(result.events) == 1


def test_timestamp_formats_agree():
    assert parse_timestamp(BASE) == BASE
    assert parse_timestamp(str(BASE)) == BASE
    assert parse_timestamp("2021-10-21T00:00:00Z") == BASE
    assert parse_timestamp("2021-10-21T00:00:00") == BASE
    assert parse_timestamp("2021-10-21T02:00:00+02:00") == BASE


def test_label_machine_cases():
    ranges = ["10.0.0.0/8"]
    assert label_machine("10.0.0.5", ranges, {"10.0.0.5": "S"}) == (
        label_machine("10.0.0.5", ranges, {"10.0.0.5": "S"})
    )
    lab = label_machine("10.0.0.5", ranges, {"10.0.0.5": "S"})
    assert (lab.locality, lab.machine_type) == (Locality.INTERNAL, MachineType.SERVER)
    lab = label_machine("8.8.8.8", ranges)
    assert (lab.locality, lab.machine_type) == (Locality.EXTERNAL, MachineType.EXTERNAL)
    lab = label_machine("10.1.2.3", ranges, {})
    assert (lab.locality, lab.machine_type) == (Locality.INTERNAL, MachineType.INTERNAL_UNKNOWN)


def test_label_machine_needs_ranges():
    with pytest.raises(ValueError):
        label_machine("10.0.0.1", [])


@given(st.integers(0, 2**32 - 1), st.sampled_from(["M", "S", "W", "I", "E"]))
def test_label_external_implies_e(addr, kind):
    import ipaddress

    ip = str(ipaddress.IPv4Address(addr))
    lab = label_machine(ip, ["10.0.0.0/8", "192.168.0.0/16"], {ip: kind})
    if lab.locality is Locality.EXTERNAL:
        assert lab.machine_type is MachineType.EXTERNAL
    else:
        assert lab.machine_type in (MachineType.MOBILE, MachineType.SERVER,
                                    MachineType.WORKSTATION, MachineType.INTERNAL_UNKNOWN)


def test_filter_subset_identity_and_single_match():
    events = [ev("A", "10.0.0.1", "10.0.0.2"), ev("C", "10.0.0.3", "10.0.0.4")]
    assert filter_subset(events, subset_predicate()) == events
    kept = filter_subset(events, subset_predicate(["10.0.0.1/32"]))
    assert kept == events[:1]


def test_filter_subset_by_machine_id():
    events = [ev("A", "10.0.0.1", "10.0.0.2"), ev("C", "10.0.0.3", "10.0.0.4")]
    pred = subset_predicate(ids=["C"], ip_to_machine={"10.0.0.3": "C", "10.0.0.1": "A"})
    assert filter_subset(events, pred) == events[1:]


def test_filter_subset_matches_linear_scan():
    rng = random.Random(5)
    ips = [f"10.0.{k // 250}.{k % 250 + 1}" for k in range(400)]
    events = []
    for k in range(1000):
        s, d = rng.sample(ips, 2)
        events.append(ev("m", s, d, k))
    chosen = set(rng.sample(ips, 40))
    expected = []
    for e in events:
        if e.src_ip in chosen or e.dst_ip in chosen:
            expected.append(e)
    assert filter_subset(events, chosen.__contains__) == expected


def test_window_boundaries():
    spec = WindowSpec(BASE)
    at_start = ev("A", "10.0.0.1", "10.0.0.2", 0)
    at_end = ev("A", "10.0.0.1", "10.0.0.2", SECONDS_PER_DAY)
    assert window_events([at_start, at_end], spec) == [at_start]


def test_window_width_must_be_positive():
    with pytest.raises(ValueError):
        WindowSpec(BASE, 0)


def test_daily_buckets_match_brute_force():
    rng = random.Random(11)
    events = [ev("A", "10.0.0.1", "10.0.0.2", rng.randrange(3 * SECONDS_PER_DAY)) for _ in range(100)]
    buckets = {}
    for e in events:
        day = (e.timestamp - BASE) // SECONDS_PER_DAY
        buckets[day] = buckets.get(day, 0) + 1
    for k in range(3):
        spec = WindowSpec(BASE + k * SECONDS_PER_DAY)
        assert len(window_events(events, spec)) == buckets.get(k, 0)
    assert sum(len(window_events(events, w)) for w in windows_covering(events)) == 100


event_strategy = st.builds(
    lambda m, t, h, pid, s, d, path: NetConnEvent(m, BASE + t, md5_of(h), pid, f"10.0.0.{s}",
                                                  f"10.0.{1 + d // 250}.{d % 250}", path),
    st.sampled_from(["A", "B", "C"]),
    st.integers(0, 5 * SECONDS_PER_DAY),
    st.text(max_size=5),
    st.integers(0, 70000),
    st.integers(1, 254),
    st.integers(0, 999),
    st.one_of(st.none(), st.text(max_size=10)),
)


@given(st.lists(event_strategy, max_size=40))
def test_parse_serialize_round_trip(events):
    buf = io.StringIO()
    serialize_events(events, buf)
    result = parse_events(io.StringIO(buf.getvalue()))
    assert result.events == events and result.skipped == 0


@settings(max_examples=50)
@given(st.lists(event_strategy, max_size=40), st.integers(0, 4), st.frozensets(st.integers(1, 254), max_size=50))
def test_filter_commutes_with_window(events, day, members):
    spec = WindowSpec(BASE + day * SECONDS_PER_DAY)
    subset = {f"10.0.0.{k}" for k in members}.__contains__
    assert filter_subset(window_events(events, spec), subset) == window_events(filter_subset(events, subset), spec)


def test_resolve_machine_ips_prefers_own_address(small_window):
    owners = resolve_machine_ips(small_window)
    assert owners["10.1.0.1"] == "A"
    assert owners["10.1.0.2"] == "B"
    assert owners["10.1.0.3"] == "C"
    assert "10.0.0.1" not in owners
