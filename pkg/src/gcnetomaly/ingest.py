"""Connection-event parsing, internal/external labeling, subset filtering and windowing.

Events arrive as line-delimited JSON with the keys ``machine_id``,
``timestamp``, ``md5``, ``pid``, ``src_ip`` and ``dst_ip`` (plus an optional
``path`` holding the process image path).
"""

from __future__ import annotations

import enum
import ipaddress
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Iterable, Mapping, Sequence, TextIO

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86_400

_MD5_RE = re.compile(r"^[0-9a-f]{32}$")
_REQUIRED_KEYS = ("machine_id", "timestamp", "md5", "pid", "src_ip", "dst_ip")


class Locality(str, enum.Enum):
    INTERNAL = "Internal"
    EXTERNAL = "External"


class MachineType(str, enum.Enum):
    MOBILE = "M"
    SERVER = "S"
    WORKSTATION = "W"
    INTERNAL_UNKNOWN = "I"
    EXTERNAL = "E"


# Column order of the machine-type one-hot.
MACHINE_TYPES = (
    MachineType.MOBILE,
    MachineType.SERVER,
    MachineType.WORKSTATION,
    MachineType.INTERNAL_UNKNOWN,
    MachineType.EXTERNAL,
)


@dataclass(frozen=True, slots=True)
class NetConnEvent:
    machine_id: str
    timestamp: int
    md5: str
    pid: int
    src_ip: str
    dst_ip: str
    path: str | None = None

    def __post_init__(self) -> None:
        if not _MD5_RE.match(self.md5):
            raise ValueError(f"md5 must be 32 lowercase hex characters, got {self.md5!r}")
        if self.pid < 0:
            raise ValueError(f"pid must be non-negative, got {self.pid}")
        if self.src_ip == self.dst_ip:
            raise ValueError(f"src_ip equals dst_ip ({self.src_ip})")

    def to_record(self) -> dict:
        record = {
            "machine_id": self.machine_id,
            "timestamp": self.timestamp,
            "md5": self.md5,
            "pid": self.pid,
            "src_ip": self.src_ip,
            "dst_ip": self.dst_ip,
        }
        if self.path is not None:
            record["path"] = self.path
        return record


@dataclass(frozen=True, slots=True)
class MachineLabel:
    ip: str
    locality: Locality
    machine_type: MachineType


@dataclass(frozen=True, slots=True)
class WindowSpec:
    """Half-open time window ``[start, start + width)`` in epoch seconds."""

    start: int
    width: int = SECONDS_PER_DAY

    def __post_init__(self) -> None:
        if self.width <= 0:
            raise ValueError("window width must be positive")

    @property
    def end(self) -> int:
        return self.start + self.width

    def contains(self, timestamp: int) -> bool:
        return self.start <= timestamp < self.end

    @property
    def date(self) -> str:
        return datetime.fromtimestamp(self.start, tz=timezone.utc).strftime("%Y-%m-%d")


@dataclass
class ParseResult:
    events: list[NetConnEvent]
    skipped: int = 0


def parse_timestamp(value) -> int:
    """Epoch seconds from an int/float epoch or an ISO-8601 string (naive means UTC)."""
    if isinstance(value, bool):
        raise ValueError("boolean is not a timestamp")
    if isinstance(value, (int, float)):
        return int(value)
    if isinstance(value, str):
        text = value.strip()
        if re.fullmatch(r"-?\d+(\.\d+)?", text):
            return int(float(text))
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        parsed = datetime.fromisoformat(text)
        if parsed.tzinfo is None:
            parsed = parsed.replace(tzinfo=timezone.utc)
        return int(parsed.timestamp())
    raise ValueError(f"unsupported timestamp {value!r}")


def _validate_ipv4(text) -> str:
    if not isinstance(text, str):
        raise ValueError("ip must be a string")
    return str(ipaddress.IPv4Address(text))


def event_from_record(record: Mapping) -> NetConnEvent:
    missing = [k for k in _REQUIRED_KEYS if k not in record]
    if missing:
        raise ValueError(f"missing keys: {missing}")
    pid = record["pid"]
    if isinstance(pid, bool) or not isinstance(pid, int):
        raise ValueError(f"pid must be an integer, got {pid!r}")
    md5 = record["md5"]
    if not isinstance(md5, str):
        raise ValueError("md5 must be a string")
    path = record.get("path")
    return NetConnEvent(
        machine_id=str(record["machine_id"]),
        timestamp=parse_timestamp(record["timestamp"]),
        md5=md5,
        pid=pid,
        src_ip=_validate_ipv4(record["src_ip"]),
        dst_ip=_validate_ipv4(record["dst_ip"]),
        path=None if path is None else str(path),
    )


def parse_events(stream: Iterable[str]) -> ParseResult:
    """Parse line-delimited JSON events in input order.

    Malformed lines are skipped and counted; blank lines are ignored.
    """
    events: list[NetConnEvent] = []
    skipped = 0
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise ValueError("record is not a JSON object")
            events.append(event_from_record(record))
        except (ValueError, TypeError) as exc:
            skipped += 1
            logger.debug("skipping line %d: %s", lineno, exc)
    if skipped:
        logger.warning("skipped %d malformed event line(s)", skipped)
    return ParseResult(events, skipped)


def serialize_events(events: Iterable[NetConnEvent], stream: TextIO) -> None:
    for event in events:
        stream.write(json.dumps(event.to_record(), separators=(",", ":")))
        stream.write("\n")


def read_event_files(paths: Sequence) -> ParseResult:
    """Parse several shards and merge them ordered by (timestamp, shard, offset)."""
    keyed = []
    skipped = 0
    for shard, path in enumerate(paths):
        with open(path, encoding="utf-8") as fh:
            result = parse_events(fh)
        skipped += result.skipped
        keyed.extend(((e.timestamp, shard, k), e) for k, e in enumerate(result.events))
    keyed.sort(key=lambda item: item[0])
    return ParseResult([e for _, e in keyed], skipped)


def parse_networks(cidrs: Iterable[str]) -> list[ipaddress.IPv4Network]:
    return [ipaddress.IPv4Network(c, strict=False) for c in cidrs]


def _in_networks(ip: str, networks: Sequence[ipaddress.IPv4Network]) -> bool:
    addr = ipaddress.IPv4Address(ip)
    return any(addr in net for net in networks)


def label_machine(
    ip: str,
    internal_ranges: Sequence,
    type_inventory: Mapping[str, str] | None = None,
) -> MachineLabel:
    if not internal_ranges:
        raise ValueError("internal_ranges must not be empty")
    networks = [
        r if isinstance(r, ipaddress.IPv4Network) else ipaddress.IPv4Network(r, strict=False)
        for r in internal_ranges
    ]
    if not _in_networks(ip, networks):
        return MachineLabel(ip, Locality.EXTERNAL, MachineType.EXTERNAL)
    inventory = type_inventory or {}
    kind = inventory.get(ip)
    machine_type = MachineType.INTERNAL_UNKNOWN
    if kind is not None:
        machine_type = MachineType(kind)
        if machine_type is MachineType.EXTERNAL:
            # inventory cannot make an internal address external
            machine_type = MachineType.INTERNAL_UNKNOWN
    return MachineLabel(ip, Locality.INTERNAL, machine_type)


def subset_predicate(
    cidrs: Iterable[str] = (),
    ids: Iterable[str] = (),
    ip_to_machine: Mapping[str, str] | None = None,
) -> Callable[[str], bool]:
    """Membership test for the monitored subset, keyed by IP.

    An IP belongs to the subset if it falls in one of ``cidrs`` or if the
    monitored machine owning it (per ``ip_to_machine``) is listed in ``ids``.
    Both empty means every machine is in the subset.
    """
    networks = parse_networks(cidrs)
    id_set = set(ids)
    owners = ip_to_machine or {}
    if not networks and not id_set:
        return lambda ip: True

    def contains(ip: str) -> bool:
        if networks and _in_networks(ip, networks):
            return True
        return owners.get(ip) in id_set

    return contains


def filter_subset(
    events: Iterable[NetConnEvent], in_subset: Callable[[str], bool]
) -> list[NetConnEvent]:
    kept = [e for e in events if in_subset(e.src_ip) or in_subset(e.dst_ip)]
    if not kept:
        logger.warning("subset filter removed every event")
    return kept


def window_events(events: Iterable[NetConnEvent], spec: WindowSpec) -> list[NetConnEvent]:
    return [e for e in events if spec.start <= e.timestamp < spec.end]


def day_floor(timestamp: int, width: int = SECONDS_PER_DAY) -> int:
    return timestamp - timestamp % width


def windows_covering(events: Sequence[NetConnEvent], width: int = SECONDS_PER_DAY) -> list[WindowSpec]:
    """Consecutive windows from the first event's window to the last one's."""
    if not events:
        return []
    first = day_floor(min(e.timestamp for e in events), width)
    last = day_floor(max(e.timestamp for e in events), width)
    return [WindowSpec(start, width) for start in range(first, last + width, width)]


def resolve_machine_ips(events: Iterable[NetConnEvent]) -> dict[str, str]:
    """Infer each monitored machine's own IP; returns ``{ip: machine_id}``.

    The machine that logged an event is one of its two endpoints, so its own
    address is the IP occurring in the most of its events. Ties go to the
    address seen as source more often, then to the smaller address string.
    An IP claimed by several machines keeps the lexicographically first id.
    """
    seen: dict[str, Counter] = {}
    as_source: dict[str, Counter] = {}
    for e in events:
        seen.setdefault(e.machine_id, Counter()).update((e.src_ip, e.dst_ip))
        as_source.setdefault(e.machine_id, Counter())[e.src_ip] += 1
    owners: dict[str, str] = {}
    for machine_id in sorted(seen):
        counts = seen[machine_id]
        src = as_source[machine_id]
        ip = min(counts, key=lambda a: (-counts[a], -src[a], a))
        owners.setdefault(ip, machine_id)
    return owners
