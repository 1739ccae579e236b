"""Dense tensors, a reverse-mode gradient tape, batch normalization and a
finite-difference oracle.

Every differentiable operation in the package is a coarse primitive that
records one node on the active :class:`GradTape`.  Nodes hold a closure that
maps the output gradient to input gradients; replaying the tape in reverse
order gives exact reverse-mode derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's preconditions."""


class DegenerateBatchError(ValueError):
    """Raised when batch statistics are requested for fewer than two samples."""


class OracleError(ArithmeticError):
    """Raised when the finite-difference oracle sees a non-finite value."""


class Tensor:
    """A dense array that may take part in gradient recording.

    ``data`` is a plain numpy array.  Leaf tensors created with
    ``requires_grad=True`` are the learnable parameters reported by
    :func:`reverse_accumulate`.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar for tests and small graphs
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""


class GradTape:
    """Ordered record of primitive operations.

    Use as a context manager; operations executed inside the block are
    recorded when at least one input is a parameter or a recorded output.
    A tape is single-writer.
    """

    _active: list["GradTape"] = []

    def __init__(self):
        self.nodes: list[Node] = []
        self._tracked: set[int] = set()

    def __enter__(self):
        GradTape._active.append(self)
        return self

    def __exit__(self, *exc):
        GradTape._active.pop()
        return False

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, inputs, backward, op: str = ""):
        self.nodes.append(Node(out, tuple(inputs), backward, op))
        self._tracked.add(id(out))
        # keep a reference so ids stay unique while the tape lives
        return out


def active_tape() -> GradTape | None:
    return GradTape._active[-1] if GradTape._active else None


def _record(out_data, inputs: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        inputs = tuple(inputs)
        if any(tape.tracks(t) for t in inputs):
            tape.record(out, inputs, backward, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Product of ``a[..., K]`` with a matrix ``b[K, P]``.

    Leading axes of ``a`` are folded into rows, so one BLAS call covers every
    timestep and token.  Identical inputs give bit-identical outputs.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1:
        raise DimensionError(f"matmul expects a[...,K] x b[K,P], got {a.shape} x {b.shape}")
    k = a.shape[-1]
    if b.shape[0] != k:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(*lead, b.shape[1])

    def backward(g):
        g2 = g.reshape(-1, b.shape[1])
        return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

    return _record(out, (a, b), backward, "matmul")


def bmm(a, b, transpose_b: bool = False) -> Tensor:
    """Batched matrix product over matching leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.shape[:-2] != bd.shape[:-2] or a.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if transpose_b:
            gb = np.swapaxes(gb, -1, -2)
        return ga, gb

    return _record(out, (a, b), backward, "bmm")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.sin(a.data), (a,), lambda g: (np.cos(a.data) * g,), "sin")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.data.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    count = math.prod(a.shape[i] for i in axes)
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(out, (a,), backward, "mean")


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, C]`` against integer labels."""
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    b = logits.shape[0]
    idx = np.arange(b)
    loss = -np.mean(z[idx, labels] - np.log(ez.sum(axis=1)))

    def backward(g):
        d = p.copy()
        d[idx, labels] -= 1.0
        return (d * (g / b),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32, name: str = "bn", momentum=0.1, eps=1e-5):
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x, state: BatchNormState, mode: str = "train", update_stats: bool = True) -> Tensor:
    """Normalize ``x[..., C]`` per channel.

    In ``train`` mode statistics come from every leading axis (batch plus any
    folded time/token axes) with the population variance, and the running
    statistics move by ``momentum``.  ``infer`` mode uses the running
    statistics only.
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if c != state.channels:
        raise DimensionError(f"batchnorm expects {state.channels} channels, got {c}")
    x2 = x.data.reshape(-1, c)
    gamma, beta = state.gamma.data, state.beta.data
    dt = x.data.dtype.type
    eps = dt(state.eps)

    if mode == "infer":
        inv = dt(1.0) / np.sqrt(state.running_var + eps)
        xhat = (x2 - state.running_mean) * inv
        out = (xhat * gamma + beta).reshape(x.shape)

        def backward(g):
            g2 = g.reshape(-1, c)
            return (g2 * (gamma * inv)).reshape(x.shape), (g2 * xhat).sum(0), g2.sum(0)

        return _record(out, (x, state.gamma, state.beta), backward, "batchnorm_infer")

    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    m = x2.shape[0]
    if x.data.ndim < 2 or m < 2:
        raise DegenerateBatchError("train-mode batchnorm needs at least 2 rows per channel")
    mean = x2.mean(0)
    xc = x2 - mean
    var = (xc * xc).mean(0)
    inv = dt(1.0) / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma + beta).reshape(x.shape)
    if update_stats:
        mom = dt(state.momentum)
        state.running_mean = (dt(1.0) - mom) * state.running_mean + mom * mean
        state.running_var = (dt(1.0) - mom) * state.running_var + mom * var

    def backward(g):
        g2 = g.reshape(-1, c)
        dgamma = (g2 * xhat).sum(0)
        dbeta = g2.sum(0)
        gx = g2 * gamma
        dx = inv * (gx - gx.sum(0) / m - xhat * (gx * xhat).sum(0) / m)
        return dx.reshape(x.shape), dgamma, dbeta

    return _record(out, (x, state.gamma, state.beta), backward, "batchnorm_train")


# ---------------------------------------------------------------------------
# reverse accumulation and the finite-difference oracle
# ---------------------------------------------------------------------------


def reverse_accumulate(
    tape: GradTape,
    loss: Tensor,
    seed_loss_grad=None,
    params: Iterable[Tensor] | None = None,
) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` backward from a scalar ``loss``.

    Returns a map from every parameter (``requires_grad`` leaf) touched by
    the tape to its gradient.  Tensors listed in ``params`` but absent from
    the tape receive exact zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    seed = np.ones_like(loss.data) if seed_loss_grad is None else np.asarray(
        seed_loss_grad.data if isinstance(seed_loss_grad, Tensor) else seed_loss_grad,
        dtype=loss.data.dtype,
    ).reshape(loss.shape)

    grads: dict[int, np.ndarray] = {id(loss): seed}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not tape.tracks(t):
                continue
            if t.requires_grad:
                leaves[id(t)] = t
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi

    result = {t: np.asarray(grads[k], dtype=t.data.dtype).reshape(t.shape) for k, t in leaves.items()}
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    return result


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den))
