"""BPTT training with joint weight and membrane-time-constant learning."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import record_denoise_masks
from .data import Dataset, batch_iter
from .model import DISTA, parameter_kind
from .neuron import NeuronParams, TauParams, clamp_tau, lif_sequence, spike_mode
from .numerics import (
    ContractError,
    GradTape,
    Tensor,
    cross_entropy,
    finite_diff_grad,
    relative_error,
    reverse_accumulate,
    tsum,
    mul,
)


class TrainingError(RuntimeError):
    pass


class ScheduleError(ValueError):
    pass


@dataclass
class TrainHyper:
    lr: float = 0.003
    lr_floor_ratio: float = 0.125
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.lr_floor_ratio <= 1:
            raise ValueError("lr_floor_ratio must lie in [0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalization")


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float = float("nan")
    test_acc: float = float("nan")
    lr: float = 0.0
    tau_mean: float = 0.0
    tau_min: float = 0.0
    tau_max: float = 0.0
    wall_seconds: float = 0.0

    FIELDS = ("epoch", "train_loss", "train_acc", "test_loss", "test_acc", "lr",
              "tau_mean", "tau_min", "tau_max", "wall_seconds")


def cosine_lr(step: int, total_steps: int, hyper: TrainHyper) -> float:
    """Cosine decay from ``hyper.lr`` to ``hyper.lr * hyper.lr_floor_ratio``."""
    if total_steps <= 0:
        raise ScheduleError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ScheduleError(f"step {step} outside [0, {total_steps}]")
    floor = hyper.lr * hyper.lr_floor_ratio
    return floor + (hyper.lr - floor) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def bptt_backward(tape: GradTape | None, loss, params=None) -> dict:
    """Gradients of ``loss`` for every parameter on ``tape``."""
    if tape is None or not tape.nodes:
        raise ContractError("bptt_backward needs a recorded forward tape")
    return reverse_accumulate(tape, loss, params=params)


def adamw_step(params, grads, state: OptimState, hyper: TrainHyper, lr_t: float, taus=()):
    """One decoupled-weight-decay Adam update, in place.

    ``params`` is a list of ``(name, Tensor)``; ``grads`` maps names to
    arrays.  Weight decay applies to weight matrices only (not BN affine
    terms, biases or time constants).  ``taus`` are projected back into
    their bounds afterwards.
    """
    for name, _ in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")

    if hyper.grad_clip is not None:
        total = math.sqrt(sum(float(np.sum(np.square(grads[n], dtype=np.float64))) for n, _ in params if n in grads))
        if total > hyper.grad_clip:
            factor = hyper.grad_clip / (total + 1e-12)
            grads = {n: g * factor for n, g in grads.items()}

    state.step += 1
    b1, b2 = hyper.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params:
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        if hyper.weight_decay and parameter_kind(name) in ("linear", "taw", "head") and not name.endswith(".b"):
            p.data *= dt(1.0 - lr_t * hyper.weight_decay)
        update = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(hyper.eps))
        p.data -= dt(lr_t) * update
    for tau in taus:
        clamp_tau(tau)
    return params, state


def _tau_stats(model: DISTA):
    vals = np.concatenate([t.values.data.ravel() for t in model.tau_params()])
    return float(vals.mean()), float(vals.min()), float(vals.max())


def train_epoch(model: DISTA, dataset: Dataset, hyper: TrainHyper, state: OptimState, epoch: int) -> MetricsRow:
    """One shuffled pass of forward, BPTT and AdamW over ``dataset``."""
    if len(dataset) == 0:
        raise TrainingError("empty training set")
    t0 = time.perf_counter()
    lr_t = cosine_lr(epoch, hyper.epochs, hyper)
    params = model.named_parameters()
    taus = model.tau_params()
    tensors = [p for _, p in params]
    loss_sum, correct, seen = 0.0, 0, 0
    for idx in batch_iter(len(dataset), hyper.batch_size, hyper.seed, epoch):
        x, y = dataset.batch(idx)
        with GradTape() as tape:
            logits = model(x, mode="train")
            loss = cross_entropy(logits, y)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        g = bptt_backward(tape, loss, params=tensors)
        adamw_step(params, {n: g[p] for n, p in params}, state, hyper, lr_t, taus)
        loss_sum += loss_val * len(y)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
        seen += len(y)
    tm, tmin, tmax = _tau_stats(model)
    return MetricsRow(epoch=epoch, train_loss=loss_sum / max(seen, 1), train_acc=correct / max(seen, 1),
                      lr=lr_t, tau_mean=tm, tau_min=tmin, tau_max=tmax,
                      wall_seconds=time.perf_counter() - t0)


def evaluate(model, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy with BN in inference mode.

    ``model`` may be any callable ``f(x, mode=...) -> logits``.  Ties in the
    argmax resolve to the lowest class index.
    """
    n = len(dataset)
    if n == 0:
        raise TrainingError("empty evaluation set")
    loss_sum, correct = 0.0, 0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        x, y = dataset.batch(idx)
        logits = model(x, mode="infer")
        logits = logits if isinstance(logits, np.ndarray) else logits.data
        loss_sum += float(cross_entropy(logits, y).data) * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return correct / n, loss_sum / n


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def gradcheck_model(model: DISTA, x, y, h: float = 1e-5, names=None) -> dict[str, float]:
    """Smooth-mode BPTT gradients against central differences.

    Returns the max relative error per parameter name.  The model should be
    float64; running statistics are left untouched.  With denoising active,
    coordinates whose +-h perturbation changes any keep-mask are excluded,
    since the loss is discontinuous there.
    """
    params = model.named_parameters()
    if names is not None:
        params = [(n, p) for n, p in params if n in names]

    def loss_and_masks():
        with record_denoise_masks() as masks:
            val = cross_entropy(model(x, mode="train", update_stats=False), y)
        return val, masks

    errors = {}
    with spike_mode("smooth"):
        with GradTape() as tape:
            loss, base_masks = loss_and_masks()
        grads = reverse_accumulate(tape, loss, params=[p for _, p in params])
        for name, p in params:
            crossed = np.zeros(p.data.size, dtype=bool)
            flat = p.data.reshape(-1)

            def f(v, p=p):
                old = p.data.copy()
                p.data[...] = v
                try:
                    val, masks = loss_and_masks()
                finally:
                    p.data[...] = old
                if any(not np.array_equal(a, b) for a, b in zip(masks, base_masks)):
                    moved = np.flatnonzero(v.reshape(-1) != flat)
                    crossed[moved] = True
                return float(val.data)

            fd = finite_diff_grad(f, p.data, h)
            keep = ~crossed
            errors[name] = relative_error(grads[p].reshape(-1)[keep], fd.reshape(-1)[keep])
    return errors


def group_errors(errors: dict[str, float]) -> dict[str, float]:
    out: dict[str, float] = {}
    for name, e in errors.items():
        k = parameter_kind(name)
        out[k] = max(out.get(k, 0.0), e)
    return out


def tau_closed_form_check(tau: float = 2.0, dtype=np.float64) -> tuple[float, float]:
    """BPTT derivative of the final membrane potential w.r.t. tau.

    Two spike-free steps with inputs (0.2, 0) give
    ``V[2] = (1 - 1/tau) * 0.2`` and ``dV[2]/dtau = 0.2 / tau**2``.
    Returns ``(bptt_value, closed_form)``.
    """
    params = NeuronParams(TauParams.create((1,), tau, dtype, True, name="tau"), theta=1e6)
    x = Tensor(np.array([[0.2], [0.0]], dtype=dtype))
    with GradTape() as tape:
        _, pot = lif_sequence(x, params, return_potentials=True)
        last = np.zeros_like(x.data)
        last[-1] = 1.0
        v_final = tsum(mul(pot, last))
    grads = reverse_accumulate(tape, v_final)
    return float(grads[params.tau.values][0]), 0.2 / tau ** 2


def fit(model: DISTA, train: Dataset, test: Dataset | None, hyper: TrainHyper,
        state: OptimState | None = None, start_epoch: int = 0, stop_epoch: int | None = None,
        callback=None) -> list[MetricsRow]:
    """Train from ``start_epoch`` up to ``stop_epoch`` (default ``hyper.epochs``)."""
    state = state or OptimState()
    rows = []
    for epoch in range(start_epoch, hyper.epochs if stop_epoch is None else stop_epoch):
        row = train_epoch(model, train, hyper, state, epoch)
        if test is not None:
            row.test_acc, row.test_loss = evaluate(model, test)
        rows.append(row)
        if callback is not None:
            callback(row, state)
    return rows
