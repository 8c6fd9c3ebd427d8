"""Minimal reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D array wrapped in :class:`DiffMatrix`. Operations record
their inputs and a closure mapping the output gradient to input gradients;
:func:`backward` walks the recorded graph once in reverse topological order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"GCNETOMALY-PARAMS v1\n"


class DiffMatrix:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(
        self,
        value,
        parents: Sequence["DiffMatrix"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool | None = None,
        op: str = "leaf",
    ) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim != 2:
            raise ValueError(f"DiffMatrix holds 2-D values, got shape {value.shape}")
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(value) if requires_grad else None
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"DiffMatrix(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def parameter(value) -> DiffMatrix:
    return DiffMatrix(np.array(value, dtype=np.float64), requires_grad=True)


def as_diff(x) -> DiffMatrix:
    if isinstance(x, DiffMatrix):
        return x
    return DiffMatrix(x, requires_grad=False, op="const")


def _node(value, parents, backward_fn, op) -> DiffMatrix:
    return DiffMatrix(value, parents, backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def matmul(a, b) -> DiffMatrix:
    a, b = as_diff(a), as_diff(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _node(a.value @ b.value, (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def add(a, b) -> DiffMatrix:
    """Elementwise sum; a (1, n) or (m, 1) operand broadcasts."""
    a, b = as_diff(a), as_diff(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ValueError(f"add shape mismatch {a.shape} + {b.shape}") from exc
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> DiffMatrix:
    a, b = as_diff(a), as_diff(b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise ValueError(f"mul shape mismatch {a.shape} * {b.shape}") from exc
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def scale(a, c: float) -> DiffMatrix:
    a = as_diff(a)
    return _node(a.value * c, (a,), lambda g: (g * c,), "scale")


def transpose(a) -> DiffMatrix:
    a = as_diff(a)
    return _node(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def take_columns(a, start: int, stop: int) -> DiffMatrix:
    a = as_diff(a)
    width = a.shape[1]

    def back(g):
        full = np.zeros((a.shape[0], width))
        full[:, start:stop] = g
        return (full,)

    return _node(a.value[:, start:stop].copy(), (a,), back, "take_columns")


def sigmoid(a) -> DiffMatrix:
    a = as_diff(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> DiffMatrix:
    a = as_diff(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> DiffMatrix:
    a = as_diff(a)
    x = a.value
    out = np.logaddexp(0.0, x)
    slope = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out, (a,), lambda g: (g * slope,), "softplus")


def dropout(a, rate: float, seed=None, training: bool = True) -> DiffMatrix:
    """Inverted dropout: zero with probability ``rate``, scale survivors by ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    a = as_diff(a)
    if not training or rate == 0.0:
        return a
    keep = (_rng(seed).random(a.shape) >= rate) / (1.0 - rate)
    return _node(a.value * keep, (a,), lambda g: (g * keep,), "dropout")


def sample_reparam(mean, std_raw, seed=None) -> DiffMatrix:
    """``mean + eps * softplus(std_raw)`` with ``eps ~ N(0, 1)``."""
    mean, std_raw = as_diff(mean), as_diff(std_raw)
    if mean.shape != std_raw.shape:
        raise ValueError(f"sample_reparam shape mismatch {mean.shape} vs {std_raw.shape}")
    eps = _rng(seed).standard_normal(mean.shape)
    return add(mean, mul(softplus(std_raw), eps))


def _row_loss(x, x_hat, weights, kind: str) -> DiffMatrix:
    x, x_hat = as_diff(x), as_diff(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"{kind} shape mismatch {x.shape} vs {x_hat.shape}")
    n_cols = x.shape[1]
    w = np.ones(x.shape) if weights is None else np.broadcast_to(np.asarray(weights, dtype=float), x.shape)
    r = x.value - x_hat.value
    if n_cols == 0:
        return _node(np.zeros((x.shape[0], 1)), (x, x_hat),
                     lambda g: (np.zeros(x.shape), np.zeros(x.shape)), kind)
    if kind == "mae":
        rows = (w * np.abs(r)).sum(axis=1, keepdims=True) / n_cols
        local = w * np.sign(r) / n_cols
    else:
        rows = (w * r * r).sum(axis=1, keepdims=True) / n_cols
        local = 2.0 * w * r / n_cols
    return _node(rows, (x, x_hat), lambda g: (g * local, -g * local), kind)


def mae_loss(x, x_hat, weights=None) -> DiffMatrix:
    """Row-wise weighted mean absolute error, shape ``(rows, 1)``.

    At ``x == x_hat`` the subgradient 0 is used.
    """
    return _row_loss(x, x_hat, weights, "mae")


def mse_loss(x, x_hat, weights=None) -> DiffMatrix:
    """Row-wise weighted mean squared error, shape ``(rows, 1)``."""
    return _row_loss(x, x_hat, weights, "mse")


def mean(a) -> DiffMatrix:
    a = as_diff(a)
    n = a.value.size
    return _node(np.array([[a.value.mean() if n else 0.0]]), (a,),
                 lambda g: (np.full(a.shape, g[0, 0] / max(n, 1)),), "mean")


def total(a) -> DiffMatrix:
    a = as_diff(a)
    return _node(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),), "sum")


def gaussian_kl(mu, std_raw) -> DiffMatrix:
    """Mean over rows of KL(N(mu, s^2) || N(0, 1)) summed over columns, s = softplus(std_raw)."""
    mu, std_raw = as_diff(mu), as_diff(std_raw)
    s = np.logaddexp(0.0, std_raw.value)
    s = np.maximum(s, 1e-300)
    n = max(mu.shape[0], 1)
    kl = 0.5 * (mu.value ** 2 + s ** 2 - 1.0) - np.log(s)
    slope = 0.5 * (1.0 + np.tanh(0.5 * std_raw.value))

    def back(g):
        c = g[0, 0] / n
        return (c * mu.value, c * (s - 1.0 / s) * slope)

    return _node(np.array([[kl.sum() / n]]), (mu, std_raw), back, "gaussian_kl")


def _topological(root: DiffMatrix) -> list[DiffMatrix]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: DiffMatrix) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every reachable ``x`` requiring grad.

    Leaf gradients accumulate across calls (use :meth:`DiffMatrix.zero_grad`);
    intermediate gradients are reset on each call.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a 1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    for node in order:
        if node.backward_fn is not None:
            node.grad = np.zeros_like(node.value)
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node.backward_fn is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if parent.requires_grad and g is not None:
                parent.grad = parent.grad + g


@dataclass
class AdamState:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Mapping[str, np.ndarray]:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient at step {state.step_count + 1} for {bad}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params


def save_checkpoint(params: Mapping[str, np.ndarray], path: Path | str) -> None:
    """Named tensors: magic line, then per tensor a JSON header line and row-major float64 bytes."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            header = json.dumps({"name": name, "shape": list(arr.shape)}, separators=(",", ":"))
            fh.write(header.encode("utf-8") + b"\n")
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path: Path | str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a parameter checkpoint")
        while True:
            line = fh.readline()
            if not line:
                break
            header = json.loads(line)
            shape = tuple(header["shape"])
            n = int(np.prod(shape)) if shape else 1
            data = fh.read(8 * n)
            if len(data) != 8 * n:
                raise ValueError(f"truncated tensor {header['name']!r} in {path}")
            out[header["name"]] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return out


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        plus = f()
        x[idx] = orig - h
        minus = f()
        x[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
