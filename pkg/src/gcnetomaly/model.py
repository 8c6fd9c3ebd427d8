"""GCN-based variational autoencoder reconstructing both adjacency and features.

Architecture, for a window with ``n`` nodes and ``F`` feature columns::

    Z_mean    = dropout(relu(A_hat @ FM @ W_mean))            n x filters
    Z_std_raw = dropout(A_hat @ FM @ W_std)                   n x filters
    Z         = Z_mean + eps * softplus(Z_std_raw)            (Z = Z_mean for the AE)
    Z_act     = sigmoid(Z @ W_bottleneck + b)                 n x latent
    S         = sigmoid(Z_act @ Z_act.T)                      n x n
    FM_hat    = sigmoid(sigmoid(S @ W_f1 + b) @ W_f2 + b)     F/2 -> F
    CM_hat    = sigmoid(sigmoid(S @ W_a1 + b) @ W_a2 + b)     n/2 -> n

with ``A_hat = D^-1/2 (CM + I) D^-1/2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, DiffMatrix

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ("AM", "SF", "EMB", "PO", "PF")
ABLATIONS = ("vae", "ae", "no-embedding")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray] | None, epoch: int):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


@dataclass(frozen=True)
class ModelConfig:
    gcn_filters: int = 32
    latent_dim: int = 16
    dropout_rate: float = 0.5
    epochs: int = 200
    learning_rate: float = 0.01
    batch_size: int = 256  # accepted for parity; training is full-graph
    variational: bool = True
    use_embedding_block: bool = True
    kl_weight: float = 0.0
    loss_weights: tuple[float, float, float, float] = (0.3, 0.3, 0.2, 0.2)
    alpha_binds: str = "SF"
    process_zero_weight: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        w = tuple(float(x) for x in self.loss_weights)
        if len(w) != 4 or any(x < 0 for x in w):
            raise ValueError(f"loss weights must be four non-negative numbers, got {self.loss_weights}")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got sum {sum(w)!r}")
        object.__setattr__(self, "loss_weights", w)
        if self.gcn_filters < 1 or self.latent_dim < 1:
            raise ValueError("gcn_filters and latent_dim must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")
        if self.alpha_binds not in ("SF", "PF"):
            raise ValueError("alpha_binds must be 'SF' or 'PF'")

    def with_ablation(self, name: str) -> "ModelConfig":
        if name == "vae":
            return replace(self, variational=True, use_embedding_block=True)
        if name == "ae":
            return replace(self, variational=False, kl_weight=0.0)
        if name == "no-embedding":
            return replace(self, use_embedding_block=False)
        raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")


@dataclass
class LossBreakdown:
    AM: np.ndarray
    SF: np.ndarray
    EMB: np.ndarray
    PO: np.ndarray
    PF: np.ndarray
    RE: np.ndarray
    total: float
    kl: float = 0.0

    def component_means(self) -> dict[str, float]:
        return {c: float(getattr(self, c).mean()) if getattr(self, c).size else 0.0 for c in LOSS_COMPONENTS}


def propagation_matrix(cm_norm: np.ndarray) -> np.ndarray:
    """Symmetric normalized adjacency with self-loops, ``D^-1/2 (CM + I) D^-1/2``."""
    a = np.asarray(cm_norm, dtype=float) + np.eye(len(cm_norm))
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def gcn_layer(
    cm_norm,
    x,
    w,
    *,
    activation: str = "relu",
    dropout_rate: float = 0.0,
    rng=None,
    training: bool = False,
    a_hat: np.ndarray | None = None,
) -> DiffMatrix:
    """``activation(A_hat @ X @ W)`` followed by dropout in training mode."""
    if a_hat is None:
        a_hat = propagation_matrix(cm_norm)
    out = ad.matmul(ad.matmul(a_hat, x), w)
    if activation == "relu":
        out = ad.relu(out)
    elif activation != "linear":
        raise ValueError(f"unknown activation {activation!r}")
    return ad.dropout(out, dropout_rate, rng, training)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(n_nodes: int, n_features: int, config: ModelConfig, rng=None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed if rng is None else rng)
    f_half = max(1, n_features // 2)
    n_half = max(1, n_nodes // 2)
    h, z = config.gcn_filters, config.latent_dim
    return {
        "W_gcn_mean": _glorot(rng, n_features, h),
        "W_gcn_std": _glorot(rng, n_features, h),
        "W_bottleneck": _glorot(rng, h, z),
        "b_bottleneck": np.zeros((1, z)),
        "W_feat_head_1": _glorot(rng, n_nodes, f_half),
        "b_feat_head_1": np.zeros((1, f_half)),
        "W_feat_head_2": _glorot(rng, f_half, n_features),
        "b_feat_head_2": np.zeros((1, n_features)),
        "W_adj_head_1": _glorot(rng, n_nodes, n_half),
        "b_adj_head_1": np.zeros((1, n_half)),
        "W_adj_head_2": _glorot(rng, n_half, n_nodes),
        "b_adj_head_2": np.zeros((1, n_nodes)),
    }


def check_shapes(params: Mapping[str, np.ndarray], n_nodes: int, n_features: int) -> None:
    expect = {
        "W_gcn_mean": (n_features, None),
        "W_feat_head_1": (n_nodes, None),
        "W_feat_head_2": (None, n_features),
        "W_adj_head_1": (n_nodes, None),
        "W_adj_head_2": (None, n_nodes),
    }
    for name, (rows, cols) in expect.items():
        shape = params[name].shape
        if (rows is not None and shape[0] != rows) or (cols is not None and shape[1] != cols):
            raise ValueError(
                f"parameters were built for a different window: {name} has shape {shape}, "
                f"window has {n_nodes} nodes and {n_features} features"
            )


def _as_params(params: Mapping) -> dict[str, DiffMatrix]:
    return {k: v if isinstance(v, DiffMatrix) else ad.as_diff(v) for k, v in params.items()}


def prepare_features(fm: np.ndarray, blocks: Mapping[str, slice], config: ModelConfig) -> np.ndarray:
    """Zero the embedding block for the no-embedding ablation."""
    fm = np.asarray(fm, dtype=float)
    if config.use_embedding_block:
        return fm
    fm = fm.copy()
    fm[:, blocks["embedding"]] = 0.0
    return fm


def encode(cm_norm, fm, params: Mapping, config: ModelConfig, rng=None, training: bool = False,
           a_hat: np.ndarray | None = None, sample: bool | None = None):
    """Returns ``(Z_mean, Z_std_raw, Z, Z_act)``.

    ``sample`` defaults to ``training``: scoring uses ``Z = Z_mean``.
    """
    p = _as_params(params)
    if a_hat is None:
        a_hat = propagation_matrix(cm_norm)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    rate = config.dropout_rate
    z_mean = gcn_layer(None, fm, p["W_gcn_mean"], dropout_rate=rate, rng=rng, training=training, a_hat=a_hat)
    z_std_raw = gcn_layer(None, fm, p["W_gcn_std"], activation="linear", dropout_rate=rate, rng=rng,
                          training=training, a_hat=a_hat)
    if sample is None:
        sample = training
    if config.variational and sample:
        z = ad.sample_reparam(z_mean, z_std_raw, rng)
    else:
        z = z_mean
    z_act = ad.sigmoid(ad.add(ad.matmul(z, p["W_bottleneck"]), p["b_bottleneck"]))
    for name, node in (("Z_mean", z_mean), ("Z_act", z_act)):
        if not np.all(np.isfinite(node.value)):
            rows = np.flatnonzero(~np.isfinite(node.value).all(axis=1))
            raise FloatingPointError(f"non-finite {name} activations at node rows {rows[:10].tolist()}")
    return z_mean, z_std_raw, z, z_act


def decode(z_act, params: Mapping) -> tuple[DiffMatrix, DiffMatrix]:
    """Inner-product similarity followed by the two dense reconstruction heads."""
    p = _as_params(params)
    z_act = ad.as_diff(z_act)
    s = ad.sigmoid(ad.matmul(z_act, ad.transpose(z_act)))
    feat = ad.sigmoid(ad.add(ad.matmul(s, p["W_feat_head_1"]), p["b_feat_head_1"]))
    fm_hat = ad.sigmoid(ad.add(ad.matmul(feat, p["W_feat_head_2"]), p["b_feat_head_2"]))
    adj = ad.sigmoid(ad.add(ad.matmul(s, p["W_adj_head_1"]), p["b_adj_head_1"]))
    cm_hat = ad.sigmoid(ad.add(ad.matmul(adj, p["W_adj_head_2"]), p["b_adj_head_2"]))
    return cm_hat, fm_hat


def loss_terms(cm, fm, blocks: Mapping[str, slice], cm_hat, fm_hat, config: ModelConfig):
    """Differentiable per-node components and RE, each an ``(n, 1)`` DiffMatrix."""
    fm = np.asarray(fm, dtype=float)
    fm_hat = ad.as_diff(fm_hat)

    def part(name):
        sl = blocks[name]
        return fm[:, sl], ad.take_columns(fm_hat, sl.start, sl.stop)

    terms = {"AM": ad.mae_loss(np.asarray(cm, dtype=float), cm_hat)}
    terms["SF"] = ad.mae_loss(*part("stat"))
    terms["EMB"] = ad.mae_loss(*part("embedding"))
    po_true, po_hat = part("process")
    weights = np.where(po_true == 0.0, config.process_zero_weight, 1.0)
    terms["PO"] = ad.mse_loss(po_true, po_hat, weights)
    terms["PF"] = ad.mse_loss(*part("significant"))
    alpha, beta, gamma, delta = config.loss_weights
    first = terms["SF"] if config.alpha_binds == "SF" else terms["PF"]
    re = terms["AM"] + alpha * first + beta * terms["EMB"] + gamma * terms["PO"] + delta * terms["PF"]
    return terms, re


def _breakdown(terms, re, total: float, kl: float = 0.0) -> LossBreakdown:
    col = {k: v.value[:, 0].copy() for k, v in terms.items()}
    return LossBreakdown(RE=re.value[:, 0].copy(), total=total, kl=kl, **col)


def compute_loss(cm, fm, blocks: Mapping[str, slice], cm_hat, fm_hat, config: ModelConfig,
                 z_mean=None, z_std_raw=None) -> LossBreakdown:
    """Per-node reconstruction components; total adds the weighted KL term when latents are given."""
    terms, re = loss_terms(cm, fm, blocks, ad.as_diff(cm_hat).value, ad.as_diff(fm_hat).value, config)
    total = float(re.value.mean()) if re.value.size else 0.0
    kl = 0.0
    if config.kl_weight > 0 and z_mean is not None and z_std_raw is not None:
        kl = float(ad.gaussian_kl(ad.as_diff(z_mean).value, ad.as_diff(z_std_raw).value).value[0, 0])
        total += config.kl_weight * kl
    return _breakdown(terms, re, total, kl)


def objective(params: Mapping, cm_norm, fm, blocks, config: ModelConfig, rng=None, training: bool = True,
              a_hat=None):
    """Scalar training loss and its per-node terms, as DiffMatrix nodes."""
    z_mean, z_std_raw, _, z_act = encode(cm_norm, fm, params, config, rng, training, a_hat)
    cm_hat, fm_hat = decode(z_act, params)
    terms, re = loss_terms(cm_norm, fm, blocks, cm_hat, fm_hat, config)
    loss = ad.mean(re)
    kl_value = 0.0
    if config.kl_weight > 0 and config.variational:
        kl = ad.gaussian_kl(z_mean, z_std_raw)
        kl_value = float(kl.value[0, 0])
        loss = loss + config.kl_weight * kl
    return loss, terms, re, kl_value


def train(cm_norm, fm, blocks: Mapping[str, slice], config: ModelConfig | None = None,
          rng=None) -> tuple[dict[str, np.ndarray], list[dict[str, float]]]:
    """Full-graph Adam training; returns final parameters and the per-epoch curve."""
    config = config or ModelConfig()
    cm_norm = np.asarray(cm_norm, dtype=float)
    if cm_norm.shape[0] == 0:
        raise ValueError("cannot train on an empty graph")
    fm = prepare_features(fm, blocks, config)
    rng = np.random.default_rng(config.seed if rng is None else rng)
    params = init_params(cm_norm.shape[0], fm.shape[1], config, rng)
    a_hat = propagation_matrix(cm_norm)
    state = AdamState(learning_rate=config.learning_rate)
    curve: list[dict[str, float]] = []
    last_good = {k: v.copy() for k, v in params.items()}
    for epoch in range(1, config.epochs + 1):
        nodes = {k: ad.parameter(v) for k, v in params.items()}
        loss, terms, _, kl = objective(nodes, cm_norm, fm, blocks, config, rng, True, a_hat)
        value = float(loss.value[0, 0])
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at epoch {epoch}", last_good, epoch)
        ad.backward(loss)
        row = {"epoch": epoch, "total": value}
        row.update({k: float(t.value.mean()) if t.value.size else 0.0 for k, t in terms.items()})
        curve.append(row)
        last_good = {k: v.copy() for k, v in params.items()}
        try:
            ad.adam_step(params, {k: n.grad for k, n in nodes.items()}, state)
        except FloatingPointError as exc:
            raise TrainingDiverged(str(exc), last_good, epoch) from exc
    return params, curve


def reconstruct(params: Mapping[str, np.ndarray], cm_norm, fm, blocks: Mapping[str, slice],
                config: ModelConfig | None = None) -> tuple[np.ndarray, np.ndarray, LossBreakdown]:
    """Inference pass (no dropout, ``Z = Z_mean``) with the per-node loss breakdown."""
    config = config or ModelConfig()
    cm_norm = np.asarray(cm_norm, dtype=float)
    fm = prepare_features(fm, blocks, config)
    check_shapes(params, cm_norm.shape[0], fm.shape[1])
    z_mean, z_std_raw, _, z_act = encode(cm_norm, fm, params, config, None, training=False)
    cm_hat, fm_hat = decode(z_act, params)
    breakdown = compute_loss(cm_norm, fm, blocks, cm_hat, fm_hat, config,
                             z_mean if config.variational else None, z_std_raw)
    return cm_hat.value, fm_hat.value, breakdown


def write_curve(curve, path) -> None:
    cols = ("epoch", "total") + LOSS_COMPONENTS
    lines = [",".join(cols)]
    for row in curve:
        lines.append(",".join(str(row["epoch"]) if c == "epoch" else repr(row[c]) for c in cols))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
