"""Node2vec structural embeddings: weighted random walks fed to a skip-gram model.

With ``p = q = 1`` the second-order walk bias vanishes and each transition is
proportional to the outgoing edge weight, so walks are sampled first-order.
The skip-gram model is trained with negative sampling by minibatch SGD.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .graph import CommGraph

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Node2VecConfig:
    dim: int = 10
    walk_length: int = 5
    walks_per_node: int = 10
    window: int = 2
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    min_learning_rate: float = 0.0001
    batch_size: int = 64


def _transition_tables(graph: CommGraph):
    src = np.concatenate([graph.rows, graph.cols])
    dst = np.concatenate([graph.cols, graph.rows])
    w = np.concatenate([graph.counts, graph.counts]).astype(float)
    order = np.lexsort((dst, src))
    src, dst, w = src[order], dst[order], w[order]
    starts = np.searchsorted(src, np.arange(graph.n_nodes + 1))
    cum = np.cumsum(w)
    before = np.concatenate([[0.0], cum])[starts[:-1]]
    totals = np.concatenate([[0.0], cum])[starts[1:]] - before
    return dst, cum, starts, before, totals


def random_walks(
    graph: CommGraph,
    walk_length: int = 5,
    walks_per_node: int = 10,
    rng: np.random.Generator | int | None = None,
) -> np.ndarray:
    """Weight-proportional walks, ``walks_per_node`` from every non-isolated node.

    Returns an int array of shape ``(n_walks, walk_length)``; rows are grouped
    by round, and within a round follow node index order.
    """
    rng = np.random.default_rng(rng)
    dst, cum, starts, before, totals = _transition_tables(graph)
    starters = np.flatnonzero(totals > 0)
    if starters.size == 0 or walk_length < 1:
        return np.zeros((0, max(walk_length, 0)), dtype=np.int64)
    current = np.tile(starters, walks_per_node)
    walks = np.empty((current.size, walk_length), dtype=np.int64)
    walks[:, 0] = current
    for step in range(1, walk_length):
        target = before[current] + rng.random(current.size) * totals[current]
        pick = np.searchsorted(cum, target, side="right")
        pick = np.clip(pick, starts[current], starts[current + 1] - 1)
        current = dst[pick]
        walks[:, step] = current
    return walks


def skipgram_pairs(walks: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    length = walks.shape[1] if walks.ndim == 2 else 0
    for offset in range(1, min(window, length - 1) + 1):
        left, right = walks[:, :-offset].ravel(), walks[:, offset:].ravel()
        centers.extend([left, right])
        contexts.extend([right, left])
    if not centers:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    return np.concatenate(centers), np.concatenate(contexts)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def train_skipgram(
    walks: np.ndarray,
    n_nodes: int,
    config: Node2VecConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Skip-gram with negative sampling; returns the input vectors (n_nodes x dim)."""
    w_in = (rng.random((n_nodes, config.dim)) - 0.5) / config.dim
    w_out = np.zeros((n_nodes, config.dim))
    centers, contexts = skipgram_pairs(walks, config.window)
    if centers.size == 0:
        return w_in
    freq = np.bincount(walks.ravel(), minlength=n_nodes).astype(float) ** 0.75
    noise = np.cumsum(freq / freq.sum())
    n_pairs = centers.size
    total_batches = config.epochs * -(-n_pairs // config.batch_size)
    done = 0
    for _ in range(config.epochs):
        order = rng.permutation(n_pairs)
        for lo in range(0, n_pairs, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            lr = config.learning_rate - (config.learning_rate - config.min_learning_rate) * done / total_batches
            done += 1
            c, o = centers[idx], contexts[idx]
            neg = np.minimum(np.searchsorted(noise, rng.random((idx.size, config.negatives))), n_nodes - 1)
            v = w_in[c]
            u_pos = w_out[o]
            u_neg = w_out[neg]
            g_pos = 1.0 - _sigmoid(np.einsum("bd,bd->b", v, u_pos))
            g_neg = -_sigmoid(np.einsum("bd,bkd->bk", v, u_neg))
            grad_v = g_pos[:, None] * u_pos + np.einsum("bk,bkd->bd", g_neg, u_neg)
            np.add.at(w_out, o, lr * g_pos[:, None] * v)
            np.add.at(w_out, neg.ravel(), (lr * g_neg[:, :, None] * v[:, None, :]).reshape(-1, config.dim))
            np.add.at(w_in, c, lr * grad_v)
    return w_in


def node2vec_embed(
    graph: CommGraph,
    config: Node2VecConfig | None = None,
    seed: int | np.random.SeedSequence | None = 0,
    normalize: bool = True,
) -> np.ndarray:
    """Embed every node; rows follow ``graph.keys``.

    With ``normalize`` each dimension is min-max scaled to [0, 1] over the
    non-isolated nodes. Isolated nodes get an all-zero row either way.
    """
    config = config or Node2VecConfig()
    rng = np.random.default_rng(seed)
    walks = random_walks(graph, config.walk_length, config.walks_per_node, rng)
    vectors = train_skipgram(walks, graph.n_nodes, config, rng)
    isolated = graph.degree() == 0
    if isolated.any():
        logger.warning("%d isolated node(s) get a zero embedding", int(isolated.sum()))
    vectors[isolated] = 0.0
    if not normalize:
        return vectors
    out = np.zeros_like(vectors)
    live = ~isolated
    if live.any():
        lo = vectors[live].min(axis=0)
        span = vectors[live].max(axis=0) - lo
        safe = np.where(span > 0, span, 1.0)
        out[live] = np.where(span > 0, (vectors[live] - lo) / safe, 0.0)
    return out
