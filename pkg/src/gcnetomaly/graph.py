"""Per-window communication graphs and their min-max normalized adjacency."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import NetConnEvent

logger = logging.getLogger(__name__)


@dataclass
class CommGraph:
    """Undirected weighted graph stored as upper-triangle coordinate triples.

    ``rows[k] < cols[k]`` and ``counts[k]`` is the number of events between
    the two nodes in the window. ``ips[i]`` is the address behind node ``i``.
    """

    keys: list[str]
    rows: np.ndarray
    cols: np.ndarray
    counts: np.ndarray
    ips: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.index = {k: i for i, k in enumerate(self.keys)}

    @property
    def n_nodes(self) -> int:
        return len(self.keys)

    @property
    def n_edges(self) -> int:
        return len(self.counts)

    def adjacency(self) -> np.ndarray:
        """Dense symmetric count matrix C with zero diagonal."""
        c = np.zeros((self.n_nodes, self.n_nodes), dtype=np.int64)
        c[self.rows, self.cols] = self.counts
        c[self.cols, self.rows] = self.counts
        return c

    def normalized(self) -> np.ndarray:
        return minmax_normalize(self.adjacency())

    def degree(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        np.add.at(deg, self.rows, 1)
        np.add.at(deg, self.cols, 1)
        return deg

    def neighbors(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per node: (neighbor indices sorted ascending, matching edge weights)."""
        src = np.concatenate([self.rows, self.cols])
        dst = np.concatenate([self.cols, self.rows])
        w = np.concatenate([self.counts, self.counts]).astype(float)
        order = np.lexsort((dst, src))
        src, dst, w = src[order], dst[order], w[order]
        bounds = np.searchsorted(src, np.arange(self.n_nodes + 1))
        return [(dst[bounds[i]:bounds[i + 1]], w[bounds[i]:bounds[i + 1]]) for i in range(self.n_nodes)]


def build_adjacency(
    events: Iterable[NetConnEvent],
    key_of_ip: Mapping[str, str] | None = None,
) -> CommGraph:
    """Count events per unordered node pair.

    Nodes are keyed by ``key_of_ip[ip]`` when present (monitored machines map
    to their machine id), otherwise by the IP string. Node order is
    lexicographic by key.
    """
    key_of_ip = key_of_ip or {}
    pairs: Counter = Counter()
    ip_of_key: dict[str, str] = {}
    for e in events:
        a = key_of_ip.get(e.src_ip, e.src_ip)
        b = key_of_ip.get(e.dst_ip, e.dst_ip)
        ip_of_key.setdefault(a, e.src_ip)
        ip_of_key.setdefault(b, e.dst_ip)
        if a == b:
            continue
        pairs[(a, b) if a < b else (b, a)] += 1
    keys = sorted(ip_of_key)
    index = {k: i for i, k in enumerate(keys)}
    edges = sorted((index[a], index[b], n) for (a, b), n in pairs.items())
    if edges:
        rows, cols, counts = (np.array(x, dtype=np.int64) for x in zip(*edges))
    else:
        rows = cols = counts = np.zeros(0, dtype=np.int64)
    return CommGraph(keys, rows, cols, counts, [ip_of_key[k] for k in keys])


def minmax_normalize(c: np.ndarray) -> np.ndarray:
    """``(c - min(c)) / (max(c) - min(c))`` over all entries, zeros included."""
    c = np.asarray(c, dtype=float)
    if c.size == 0:
        return c.copy()
    lo, hi = c.min(), c.max()
    if hi <= lo:
        logger.warning("degenerate adjacency: all weights equal, normalized matrix is zero")
        return np.zeros_like(c)
    return (c - lo) / (hi - lo)


def partition_nodes(machines: Sequence[str], k: int, seed: int | None = None) -> list[list[str]]:
    """Randomly split ``machines`` into ``k`` groups whose sizes differ by at most one."""
    if k < 1:
        raise ValueError("k must be at least 1")
    items = sorted(machines)
    if k > len(items):
        raise ValueError(f"cannot split {len(items)} machines into {k} groups")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    return [sorted(items[i] for i in chunk) for chunk in np.array_split(order, k)]


def save_graph(graph: CommGraph, directory: Path | str, stem: str = "graph") -> tuple[Path, Path]:
    """Write ``<stem>.nodes`` (one key per line, row order) and ``<stem>.edges`` (i j count)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes_path = directory / f"{stem}.nodes"
    edges_path = directory / f"{stem}.edges"
    nodes_path.write_text(
        "".join(f"{k}\t{ip}\n" for k, ip in zip(graph.keys, graph.ips)), encoding="utf-8"
    )
    edges_path.write_text(
        "".join(f"{i} {j} {n}\n" for i, j, n in zip(graph.rows, graph.cols, graph.counts)),
        encoding="utf-8",
    )
    return nodes_path, edges_path


def load_graph(directory: Path | str, stem: str = "graph") -> CommGraph:
    directory = Path(directory)
    keys, ips = [], []
    for line in (directory / f"{stem}.nodes").read_text(encoding="utf-8").splitlines():
        key, _, ip = line.partition("\t")
        keys.append(key)
        ips.append(ip or key)
    triples = [
        tuple(int(x) for x in line.split())
        for line in (directory / f"{stem}.edges").read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if triples:
        rows, cols, counts = (np.array(x, dtype=np.int64) for x in zip(*triples))
    else:
        rows = cols = counts = np.zeros(0, dtype=np.int64)
    return CommGraph(keys, rows, cols, counts, ips)
