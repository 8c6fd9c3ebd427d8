"""Synthetic EDR connection logs for homogeneous fleets, with attack injection.

The benign model: every monitored machine talks mostly to a few shared
internal servers plus a small stable set of external services, with a
stable per-machine process mix. Daily event counts are Poisson around a
configured mean with a gamma-distributed per-day rate jitter. This is a
stand-in for real telemetry and is labeled synthetic throughout.
"""

from __future__ import annotations

import hashlib
import ipaddress
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ingest import SECONDS_PER_DAY, NetConnEvent, WindowSpec, resolve_machine_ips, serialize_events

SYSTEM_PATHS = (
    r"C:\Windows\System32\svchost.exe",
    r"C:\Windows\System32\lsass.exe",
    r"C:\Windows\System32\services.exe",
    r"C:\Windows\explorer.exe",
)
APP_PATHS = (
    r"C:\Program Files\Vendor\Agent\agent.exe",
    r"C:\Program Files\Vendor\Xfs\xfsmgr.exe",
    r"C:\Program Files (x86)\Monitor\monitor.exe",
    r"C:\Program Files\Updater\update.exe",
)


def _md5(text: str) -> str:
    return hashlib.md5(text.encode("utf-8")).hexdigest()


def _date_epoch(date: str) -> int:
    return int(datetime.strptime(date, "%Y-%m-%d").replace(tzinfo=timezone.utc).timestamp())


@dataclass(frozen=True)
class PopulationConfig:
    n_machines: int = 200
    n_shared_servers: int = 4
    n_external_services: int = 6
    externals_per_machine: int = 2
    external_share: float = 0.2
    events_per_machine_per_day: float = 80.0
    n_processes: int = 10
    core_processes: int = 4
    optional_usage: tuple[float, ...] = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4)
    rare_process_rate: float = 0.005
    behavioral_noise: float = 0.2
    machine_types: tuple[tuple[str, float], ...] = (("W", 1.0),)
    machine_prefix: str = "ATM"
    machine_cidr: str = "10.1.0.0/16"
    server_cidr: str = "10.0.0.0/24"
    external_cidr: str = "198.51.100.0/24"
    n_days: int = 9
    start_date: str = "2021-10-21"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_machines", "n_shared_servers", "n_days", "n_processes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.events_per_machine_per_day < 1:
            raise ValueError("events_per_machine_per_day must be at least 1")
        if self.externals_per_machine > self.n_external_services:
            raise ValueError("externals_per_machine exceeds n_external_services")
        probs = (self.external_share, self.rare_process_rate) + tuple(self.optional_usage)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.behavioral_noise < 0:
            raise ValueError("behavioral_noise must be non-negative")


def ad_population_config(**overrides) -> PopulationConfig:
    """Workstations and mobiles talking to a handful of directory servers."""
    base = dict(
        n_shared_servers=6,
        n_external_services=2,
        externals_per_machine=1,
        external_share=0.05,
        events_per_machine_per_day=60.0,
        n_processes=14,
        core_processes=3,
        optional_usage=(0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.3, 0.2, 0.2, 0.1, 0.1),
        machine_types=(("W", 0.7), ("M", 0.3)),
        machine_prefix="WS",
        machine_cidr="10.2.0.0/16",
    )
    base.update(overrides)
    return PopulationConfig(**base)


@dataclass
class SyntheticFleet:
    config: PopulationConfig
    events: list[NetConnEvent]
    machine_ips: dict[str, str]
    servers: list[str]
    externals: list[str]
    inventory: dict[str, str]
    md5s: dict[str, str] = field(default_factory=dict)

    @property
    def start(self) -> int:
        return _date_epoch(self.config.start_date)

    def window(self, day: int) -> WindowSpec:
        return WindowSpec(self.start + day * SECONDS_PER_DAY)


def _hosts(cidr: str, n: int, skip: int = 10) -> list[str]:
    net = ipaddress.IPv4Network(cidr)
    if n + skip > net.num_addresses - 2:
        raise ValueError(f"{cidr} too small for {n} hosts")
    base = int(net.network_address) + skip
    return [str(ipaddress.IPv4Address(base + k)) for k in range(n)]


def generate_population(config: PopulationConfig | None = None) -> SyntheticFleet:
    """Multi-day benign log, sorted by timestamp; deterministic given ``config.seed``."""
    config = config or PopulationConfig()
    rng = np.random.default_rng(config.seed)
    machine_ips = {f"{config.machine_prefix}-{k:04d}": ip
                   for k, ip in enumerate(_hosts(config.machine_cidr, config.n_machines), start=1)}
    machines = sorted(machine_ips)
    servers = _hosts(config.server_cidr, config.n_shared_servers)
    externals = _hosts(config.external_cidr, config.n_external_services) if config.n_external_services else []

    type_names = [t for t, _ in config.machine_types]
    type_probs = np.array([w for _, w in config.machine_types], dtype=float)
    type_probs /= type_probs.sum()
    inventory = {ip: "S" for ip in servers}
    for m in machines:
        inventory[machine_ips[m]] = type_names[rng.choice(len(type_names), p=type_probs)]

    md5s = {_md5(f"population:{config.seed}:{j}"): "" for j in range(config.n_processes)}
    proc_ids = list(md5s)
    paths = []
    for j in range(config.n_processes):
        pool = SYSTEM_PATHS if j < config.core_processes else APP_PATHS
        paths.append(pool[j % len(pool)])
    for md5, path in zip(proc_ids, paths):
        md5s[md5] = path
    usage = [1.0] * config.core_processes + list(config.optional_usage)
    usage = (usage + [usage[-1]] * config.n_processes)[: config.n_processes]
    popularity = rng.uniform(0.5, 1.5, size=config.n_processes)
    server_pop = rng.uniform(0.5, 1.5, size=len(servers))

    profiles = {}
    for m in machines:
        used = [j for j in range(config.n_processes) if rng.random() < usage[j]] or [0]
        proc_w = popularity[used] * rng.uniform(0.8, 1.2, size=len(used))
        ext = list(rng.choice(len(externals), size=config.externals_per_machine, replace=False)) if externals else []
        profiles[m] = (np.array(used), proc_w / proc_w.sum(), ext)

    start = _date_epoch(config.start_date)
    events: list[NetConnEvent] = []
    mean = config.events_per_machine_per_day
    for day in range(config.n_days):
        day_start = start + day * SECONDS_PER_DAY
        for m in machines:
            ip = machine_ips[m]
            used, proc_w, ext = profiles[m]
            if config.behavioral_noise > 0:
                k = 1.0 / config.behavioral_noise ** 2
                n = int(rng.poisson(mean * rng.gamma(k, 1.0 / k)))
            else:
                n = int(round(mean))
            ts = np.sort(rng.integers(day_start, day_start + SECONDS_PER_DAY, size=n))
            n_ext = int(rng.binomial(n, config.external_share)) if ext else 0
            is_ext = np.zeros(n, dtype=bool)
            is_ext[rng.choice(n, size=n_ext, replace=False)] = True
            server_p = server_pop / server_pop.sum()
            peers = np.where(
                is_ext,
                rng.choice(len(ext), size=n) if ext else 0,
                rng.choice(len(servers), size=n, p=server_p),
            )
            outbound = rng.random(n) < np.where(is_ext, 0.9, 0.8)
            procs = used[rng.choice(len(used), size=n, p=proc_w)]
            pid_pool = {j: rng.integers(1000, 65000, size=1 + rng.poisson(0.3)) for j in used}
            pid_pick = rng.random(n)
            for t, e_flag, peer, out, j, u in zip(ts, is_ext, peers, outbound, procs, pid_pick):
                peer_ip = externals[ext[peer]] if e_flag else servers[peer]
                pids = pid_pool[j]
                src, dst = (ip, peer_ip) if out else (peer_ip, ip)
                events.append(NetConnEvent(m, int(t), proc_ids[j], int(pids[int(u * len(pids))]),
                                           src, dst, paths[j]))
            if config.rare_process_rate and rng.random() < config.rare_process_rate:
                rare_md5 = _md5(f"population:{config.seed}:rare:{day}:{m}")
                md5s[rare_md5] = r"C:\Program Files\Updater\patch.exe"
                pid = int(rng.integers(1000, 65000))
                for t in np.sort(rng.integers(day_start, day_start + SECONDS_PER_DAY, size=rng.integers(1, 6))):
                    events.append(NetConnEvent(m, int(t), rare_md5, pid, ip, servers[int(rng.integers(len(servers)))],
                                               md5s[rare_md5]))
    events.sort(key=lambda e: e.timestamp)
    return SyntheticFleet(config, events, machine_ips, servers, externals, inventory, md5s)


@dataclass(frozen=True)
class AttackSpec:
    n_targets: int = 2
    inbound_c2: int = 8
    outbound_c2: int = 7
    inbound_messenger: int = 8
    outbound_messenger: int = 7
    attacker_ips: tuple[str, ...] | None = None
    attack_md5: str | None = None
    attack_path: str = r"C:\Users\Public\Libraries\svcmgr.exe"
    seed: int = 0

    @property
    def events_per_target(self) -> int:
        return self.inbound_c2 + self.outbound_c2 + self.inbound_messenger + self.outbound_messenger


def _fresh_ips(events: Sequence[NetConnEvent], n: int, rng: np.random.Generator,
               cidr: str = "192.0.2.0/24") -> list[str]:
    seen = {e.src_ip for e in events} | {e.dst_ip for e in events}
    pool = [ip for ip in _hosts(cidr, 200, skip=1) if ip not in seen]
    return [pool[k] for k in rng.choice(len(pool), size=n, replace=False)]


def _fresh_md5(events: Sequence[NetConnEvent], tag: str) -> str:
    seen = {e.md5 for e in events}
    k = 0
    while (md5 := _md5(f"{tag}:{k}")) in seen:
        k += 1
    return md5


def _final_window(events: Sequence[NetConnEvent]) -> WindowSpec:
    last = max(e.timestamp for e in events)
    return WindowSpec(last - last % SECONDS_PER_DAY)


def inject_attack(
    events: Sequence[NetConnEvent],
    spec: AttackSpec | None = None,
    targets: Sequence[str] | None = None,
    window: WindowSpec | None = None,
    machine_ips: Mapping[str, str] | None = None,
) -> tuple[list[NetConnEvent], list[str]]:
    """Append the C2 and messenger channels to ``targets`` (random active machines by default).

    Returns ``(events, targets)``; the original events are kept as-is, in order,
    with the injected ones appended.
    """
    spec = spec or AttackSpec()
    if spec.n_targets == 0 and not targets:
        return list(events), []
    rng = np.random.default_rng(spec.seed)
    window = window or _final_window(events)
    active = sorted({e.machine_id for e in events if window.contains(e.timestamp)})
    if targets is None:
        if spec.n_targets > len(active):
            raise ValueError(f"only {len(active)} machines active in the target window")
        targets = [active[k] for k in sorted(rng.choice(len(active), size=spec.n_targets, replace=False))]
    missing = [t for t in targets if t not in active]
    if missing:
        raise ValueError(f"targets not active in window {window.date}: {missing}")
    owners = machine_ips or {m: ip for ip, m in resolve_machine_ips(events).items()}
    c2_ip, messenger_ip = spec.attacker_ips or _fresh_ips(events, 2, rng)
    md5 = spec.attack_md5 or _fresh_md5(events, f"attack:{spec.seed}")
    injected = []
    for target in targets:
        ip = owners[target]
        pid = int(rng.integers(1000, 65000))
        channels = (
            (c2_ip, spec.inbound_c2, False), (c2_ip, spec.outbound_c2, True),
            (messenger_ip, spec.inbound_messenger, False), (messenger_ip, spec.outbound_messenger, True),
        )
        for peer, count, outbound in channels:
            for t in rng.integers(window.start, window.end, size=count):
                src, dst = (ip, peer) if outbound else (peer, ip)
                injected.append(NetConnEvent(target, int(t), md5, pid, src, dst, spec.attack_path))
    return list(events) + injected, list(targets)


def inject_bruteforce(
    events: Sequence[NetConnEvent],
    target: str,
    servers: Sequence[str],
    n_events: int = 19,
    start_hour: int = 8,
    end_hour: int = 17,
    window: WindowSpec | None = None,
    machine_ips: Mapping[str, str] | None = None,
    seed: int = 0,
    md5: str | None = None,
    path: str = r"C:\Users\analyst\Downloads\enum.exe",
) -> list[NetConnEvent]:
    """Append ``n_events`` enumeration connections from ``target`` to directory servers."""
    if not servers:
        raise ValueError("brute-force injection needs at least one server")
    rng = np.random.default_rng(seed)
    window = window or _final_window(events)
    owners = machine_ips or {m: ip for ip, m in resolve_machine_ips(events).items()}
    if target not in owners or not any(e.machine_id == target for e in events):
        raise ValueError(f"target {target!r} does not appear in the log")
    ip = owners[target]
    md5 = md5 or _fresh_md5(events, f"bruteforce:{seed}")
    pid = int(rng.integers(1000, 65000))
    lo = window.start + start_hour * 3600
    hi = window.start + end_hour * 3600
    injected = [
        NetConnEvent(target, int(t), md5, pid, ip, servers[int(rng.integers(len(servers)))], path)
        for t in rng.integers(lo, hi, size=n_events)
    ]
    return list(events) + injected


def ground_truth(events: Sequence[NetConnEvent], injected_md5s: Sequence[str], **extra) -> dict:
    """Sidecar describing the injected events by their line index in the written log."""
    md5s = set(injected_md5s)
    ordered = sorted(range(len(events)), key=lambda k: events[k].timestamp)
    ids: dict[str, list[int]] = {}
    for line, k in enumerate(ordered):
        e = events[k]
        if e.md5 in md5s:
            ids.setdefault(e.machine_id, []).append(line)
    return {"targets": sorted(ids), "event_ids": ids, **extra}


def write_log(events: Sequence[NetConnEvent], path: Path | str) -> None:
    """Write events sorted by timestamp (stable) in the ingest line format."""
    ordered = sorted(events, key=lambda e: e.timestamp)
    with open(path, "w", encoding="utf-8") as fh:
        serialize_events(ordered, fh)


def write_inventory(inventory: Mapping[str, str], path: Path | str) -> None:
    Path(path).write_text(json.dumps(dict(sorted(inventory.items())), indent=1) + "\n", encoding="utf-8")
