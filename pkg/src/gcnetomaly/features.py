"""Per-node feature matrix: statistical, embedding, process and significant-process blocks.

Every block is min-max or one-hot normalized, so all entries lie in [0, 1].
Block layout is fixed: ``stat | embedding | process | significant``.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import CommGraph
from .ingest import MACHINE_TYPES, Locality, MachineLabel, NetConnEvent
from .node2vec import Node2VecConfig, node2vec_embed

logger = logging.getLogger(__name__)

STAT_NUMERIC = ("internal_communications", "uni_outgoing_machines", "uni_incoming_machines", "rare_processes")
STAT_NAMES = STAT_NUMERIC + tuple(f"machine_type_{t.value}" for t in MACHINE_TYPES)
SOURCE_DIRS = ("windows", "program files", "user", "none", "other")
SIG_NAMES = ("sig_n_pids", "sig_max_pid_duration", "sig_avg_pid_duration") + tuple(
    f"sig_dir_{d.replace(' ', '_')}" for d in SOURCE_DIRS
)
BLOCKS = ("stat", "embedding", "process", "significant")


@dataclass(frozen=True)
class FeatureConfig:
    process_blocks: bool = True
    process_block_source: str = "counts"
    decay: float = 0.9
    history_days: int = 7
    node2vec: Node2VecConfig = field(default_factory=Node2VecConfig)

    def __post_init__(self) -> None:
        if self.process_block_source not in ("counts", "tfidf"):
            raise ValueError("process_block_source must be 'counts' or 'tfidf'")


@dataclass
class ProcessProfile:
    process_index: list[str]
    counts: np.ndarray
    tfidf: np.ndarray
    day_history: np.ndarray


@dataclass
class FeatureMatrix:
    values: np.ndarray
    blocks: dict[str, slice]
    names: list[str]
    process_index: list[str] = field(default_factory=list)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(self.blocks[b].start for b in BLOCKS)

    def block(self, name: str) -> np.ndarray:
        return self.values[:, self.blocks[name]]


def _node_lookup(graph: CommGraph) -> dict[str, int]:
    lookup = {ip: i for i, ip in enumerate(graph.ips)}
    return lookup


def logger_node(event: NetConnEvent, graph: CommGraph, ip_lookup: Mapping[str, int]) -> int | None:
    """Node of the machine that logged the event."""
    node = graph.index.get(event.machine_id)
    if node is None:
        node = ip_lookup.get(event.src_ip)
    return node


def minmax_columns(x: np.ndarray) -> np.ndarray:
    """Min-max scale each column to [0, 1]; constant columns become zero."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x.reshape(x.shape).copy()
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.0)


def machine_type_onehot(labels: Sequence[MachineLabel]) -> np.ndarray:
    out = np.zeros((len(labels), len(MACHINE_TYPES)))
    pos = {t: k for k, t in enumerate(MACHINE_TYPES)}
    for i, label in enumerate(labels):
        out[i, pos[label.machine_type]] = 1.0
    return out


def process_counts(
    events: Iterable[NetConnEvent], graph: CommGraph
) -> tuple[list[str], np.ndarray]:
    """Machine x process usage counts; columns sorted by md5."""
    lookup = _node_lookup(graph)
    usage: Counter = Counter()
    for e in events:
        node = logger_node(e, graph, lookup)
        if node is not None:
            usage[(node, e.md5)] += 1
    process_index = sorted({md5 for _, md5 in usage})
    col = {m: j for j, m in enumerate(process_index)}
    counts = np.zeros((graph.n_nodes, len(process_index)), dtype=np.int64)
    for (node, md5), n in usage.items():
        counts[node, col[md5]] = n
    return process_index, counts


def stat_raw(
    events: Iterable[NetConnEvent], graph: CommGraph, labels: Sequence[MachineLabel]
) -> np.ndarray:
    """Unnormalized (internal_communications, uni_outgoing, uni_incoming, rare_processes)."""
    lookup = _node_lookup(graph)
    n = graph.n_nodes
    internal = np.array([lab.locality is Locality.INTERNAL for lab in labels], dtype=bool)
    internal_comms = np.zeros(n)
    outgoing: list[set[int]] = [set() for _ in range(n)]
    incoming: list[set[int]] = [set() for _ in range(n)]
    users: dict[str, set[int]] = defaultdict(set)
    for e in events:
        s, d = lookup[e.src_ip], lookup[e.dst_ip]
        if s == d:
            continue
        if internal[d]:
            internal_comms[s] += 1
        if internal[s]:
            internal_comms[d] += 1
        outgoing[s].add(d)
        incoming[d].add(s)
        node = logger_node(e, graph, lookup)
        if node is not None:
            users[e.md5].add(node)
    rare = np.zeros(n)
    for nodes in users.values():
        if len(nodes) == 1:
            rare[next(iter(nodes))] += 1
    return np.column_stack([
        internal_comms,
        [len(s) for s in outgoing],
        [len(s) for s in incoming],
        rare,
    ]) if n else np.zeros((0, 4))


def stat_features(
    events: Iterable[NetConnEvent], graph: CommGraph, labels: Sequence[MachineLabel]
) -> np.ndarray:
    events = list(events)
    return np.hstack([minmax_columns(stat_raw(events, graph, labels)), machine_type_onehot(labels)])


def tfidf_process(counts: np.ndarray, day_history: np.ndarray, decay: float = 0.9) -> np.ndarray:
    """Decayed TF-IDF of process usage.

    ``tf = counts / row total``, ``idf = ln(n / (1 + df))`` clipped at zero,
    then each cell is multiplied by ``decay ** d`` with ``d`` the prior-day
    count from ``day_history`` (shape ``(P,)`` or ``(n, P)``).
    """
    counts = np.asarray(counts, dtype=float)
    n = counts.shape[0]
    totals = counts.sum(axis=1, keepdims=True)
    tf = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    df = (counts > 0).sum(axis=0)
    idf = np.maximum(np.log(n / (1.0 + df)), 0.0) if n else np.zeros(counts.shape[1])
    return tf * idf * decay ** np.asarray(day_history, dtype=float)


def classify_source_dir(path: str | None) -> str:
    if path is None or not path.strip():
        return "none"
    p = path.strip().lower().replace("/", "\\")
    if len(p) >= 2 and p[1] == ":":
        p = p[2:]
    p = p.lstrip("\\")
    if p.startswith("windows"):
        return "windows"
    if p.startswith("program files"):
        return "program files"
    if p.startswith("users") or p.startswith("documents and settings"):
        return "user"
    return "other"


def significant_selection(counts: np.ndarray, tfidf: np.ndarray) -> np.ndarray:
    """Column of each node's highest-TF-IDF process among those it used, -1 if none.

    Columns are sorted by md5, so the first maximum is the smallest md5 on ties.
    """
    masked = np.where(counts > 0, tfidf, -np.inf)
    chosen = np.argmax(masked, axis=1) if masked.shape[1] else np.zeros(masked.shape[0], dtype=int)
    has_any = (counts > 0).any(axis=1) if counts.shape[1] else np.zeros(counts.shape[0], dtype=bool)
    return np.where(has_any, chosen, -1)


def significant_raw(
    events: Iterable[NetConnEvent],
    graph: CommGraph,
    process_index: Sequence[str],
    chosen: np.ndarray,
) -> tuple[np.ndarray, list[str]]:
    """Per node: (n_pids, max PID duration, mean PID duration) and the source-dir class."""
    lookup = _node_lookup(graph)
    target = {i: process_index[j] for i, j in enumerate(chosen) if j >= 0}
    spans: dict[int, dict[int, list[int]]] = defaultdict(dict)
    paths: dict[int, Counter] = defaultdict(Counter)
    for e in events:
        node = logger_node(e, graph, lookup)
        if node is None or target.get(node) != e.md5:
            continue
        span = spans[node].setdefault(e.pid, [e.timestamp, e.timestamp])
        span[0] = min(span[0], e.timestamp)
        span[1] = max(span[1], e.timestamp)
        if e.path:
            paths[node][e.path] += 1
    raw = np.zeros((graph.n_nodes, 3))
    dirs = ["none"] * graph.n_nodes
    for node, pids in spans.items():
        durations = [last - first for first, last in pids.values()]
        raw[node] = (len(durations), max(durations), sum(durations) / len(durations))
        if paths[node]:
            common = min(paths[node], key=lambda p: (-paths[node][p], p))
            dirs[node] = classify_source_dir(common)
    return raw, dirs


def significant_process(
    events: Iterable[NetConnEvent],
    graph: CommGraph,
    process_index: Sequence[str],
    counts: np.ndarray,
    tfidf: np.ndarray,
) -> np.ndarray:
    chosen = significant_selection(counts, tfidf)
    raw, dirs = significant_raw(events, graph, process_index, chosen)
    onehot = np.zeros((graph.n_nodes, len(SOURCE_DIRS)))
    for i, d in enumerate(dirs):
        onehot[i, SOURCE_DIRS.index(d)] = 1.0
    return np.hstack([minmax_columns(raw), onehot])


def assemble_features(
    stat: np.ndarray,
    embedding: np.ndarray,
    process_block: np.ndarray,
    significant: np.ndarray,
    process_index: Sequence[str] = (),
) -> FeatureMatrix:
    parts = [np.asarray(b, dtype=float) for b in (stat, embedding, process_block, significant)]
    n_rows = {p.shape[0] for p in parts}
    if len(n_rows) != 1:
        raise ValueError(f"feature blocks disagree on row count: {[p.shape[0] for p in parts]}")
    blocks, start = {}, 0
    for name, part in zip(BLOCKS, parts):
        blocks[name] = slice(start, start + part.shape[1])
        start += part.shape[1]
    process_index = list(process_index)
    if len(process_index) != parts[2].shape[1]:
        process_index = [f"col{j}" for j in range(parts[2].shape[1])]
    names = (
        list(STAT_NAMES[: parts[0].shape[1]])
        + [f"embedding_{k}" for k in range(parts[1].shape[1])]
        + [f"process:{m}" for m in process_index]
        + list(SIG_NAMES[: parts[3].shape[1]])
    )
    return FeatureMatrix(np.hstack(parts), blocks, names, process_index)


def process_day_history(
    prior_usage: Sequence[set[tuple[str, str]]],
    node_keys: Sequence[str],
    process_index: Sequence[str],
    per_machine: bool = True,
) -> np.ndarray:
    """Number of prior windows in which each process was seen.

    ``prior_usage`` holds one ``{(machine_id, md5)}`` set per prior window.
    Per machine gives an ``(n, P)`` matrix, otherwise a fleet-wide ``(P,)``
    vector.
    """
    col = {m: j for j, m in enumerate(process_index)}
    if not per_machine:
        out = np.zeros(len(process_index), dtype=np.int64)
        for day in prior_usage:
            for md5 in {m for _, m in day}:
                if md5 in col:
                    out[col[md5]] += 1
        return out
    row = {k: i for i, k in enumerate(node_keys)}
    out = np.zeros((len(node_keys), len(process_index)), dtype=np.int64)
    for day in prior_usage:
        for machine_id, md5 in day:
            i, j = row.get(machine_id), col.get(md5)
            if i is not None and j is not None:
                out[i, j] += 1
    return out


def window_usage(events: Iterable[NetConnEvent]) -> set[tuple[str, str]]:
    return {(e.machine_id, e.md5) for e in events}


def extract_features(
    events: Sequence[NetConnEvent],
    graph: CommGraph,
    labels: Sequence[MachineLabel],
    prior_usage: Sequence[set[tuple[str, str]]] = (),
    config: FeatureConfig | None = None,
    seed=0,
) -> tuple[FeatureMatrix, ProcessProfile]:
    config = config or FeatureConfig()
    stat = stat_features(events, graph, labels)
    embedding = node2vec_embed(graph, config.node2vec, seed=seed)
    process_index, counts = process_counts(events, graph)
    history = process_day_history(prior_usage[-config.history_days:] if config.history_days else [],
                                  graph.keys, process_index)
    tfidf = tfidf_process(counts, history, config.decay)
    profile = ProcessProfile(process_index, counts, tfidf, history)
    if not config.process_blocks:
        empty = np.zeros((graph.n_nodes, 0))
        return assemble_features(stat, embedding, empty, empty), profile
    if config.process_block_source == "counts":
        process_block = minmax_columns(counts)
    else:
        process_block = minmax_columns(tfidf)
    significant = significant_process(events, graph, process_index, counts, tfidf)
    return assemble_features(stat, embedding, process_block, significant, process_index), profile


def save_features(fm: FeatureMatrix, directory: Path | str, stem: str = "features") -> tuple[Path, Path]:
    """Header with block spans, one row of decimals per node, plus a column -> md5 sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = "# " + " ".join(f"{b}={fm.blocks[b].start}:{fm.blocks[b].stop}" for b in BLOCKS)
    lines = [header] + [" ".join(repr(float(v)) for v in row) for row in fm.values]
    matrix_path = directory / f"{stem}.txt"
    matrix_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    sidecar = directory / f"{stem}.processes"
    offset = fm.blocks["process"].start
    sidecar.write_text(
        "".join(f"{offset + j}\t{m}\n" for j, m in enumerate(fm.process_index)), encoding="utf-8"
    )
    return matrix_path, sidecar


def load_features(directory: Path | str, stem: str = "features") -> FeatureMatrix:
    directory = Path(directory)
    lines = (directory / f"{stem}.txt").read_text(encoding="utf-8").splitlines()
    spans = dict(tok.split("=") for tok in lines[0].lstrip("# ").split())
    blocks = {b: slice(*(int(x) for x in spans[b].split(":"))) for b in BLOCKS}
    width = blocks["significant"].stop
    rows = [[float(x) for x in line.split()] for line in lines[1:] if line.strip()]
    values = np.array(rows, dtype=float).reshape(len(rows), width)
    process_index = [
        line.split("\t")[1]
        for line in (directory / f"{stem}.processes").read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    names = (
        list(STAT_NAMES[: blocks["stat"].stop - blocks["stat"].start])
        + [f"embedding_{k}" for k in range(blocks["embedding"].stop - blocks["embedding"].start)]
        + [f"process:{m}" for m in process_index]
        + list(SIG_NAMES[: blocks["significant"].stop - blocks["significant"].start])
    )
    return FeatureMatrix(values, blocks, names, process_index)
