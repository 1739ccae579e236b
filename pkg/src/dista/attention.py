"""Spiking self-attention with temporal attention windows and denoising.

Per timestep ``t`` the query/key/value neuron arrays receive

    I[t] = sum_{m < taw_size, m <= t} s[t - m] @ W[m]

so offset ``m = 0`` is the present step and the window is strictly causal.
Binary Q/K/V spikes give an integer attention map ``A = Q[t] K[t]^T``;
entries below the threshold ``u`` are zeroed before ``A @ V``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .neuron import NeuronParams, TauParams, current_spike_mode, lif_sequence
from .numerics import (
    BatchNormState,
    ContractError,
    DimensionError,
    Tensor,
    _record,
    as_tensor,
    batchnorm,
    bmm,
    matmul,
    reshape,
    scale,
    transpose,
)


class AttentionConfigError(ValueError):
    pass


@dataclass
class AttentionConfig:
    taw_size: int = 1
    denoise_threshold: float = 3.0
    adn_enabled: bool = True
    heads: int = 1
    attn_scale: float = 0.125

    def head_dim(self, dim: int) -> int:
        if self.heads < 1 or dim % self.heads:
            raise AttentionConfigError(f"dim {dim} is not divisible by {self.heads} heads")
        return dim // self.heads

    def validate(self, dim: int, timesteps: int | None = None):
        self.head_dim(dim)
        if self.taw_size < 1:
            raise AttentionConfigError("taw_size must be >= 1")
        if timesteps is not None and self.taw_size > timesteps:
            raise AttentionConfigError(f"taw_size {self.taw_size} exceeds timesteps {timesteps}")
        if self.denoise_threshold < 0:
            raise AttentionConfigError("denoise threshold must be nonnegative")


@dataclass
class TawWeights:
    """One ``D x D`` matrix per time offset for each of the q/k/v paths.

    Stored stacked as ``(taw_size, D, D)`` parameters.
    """

    q: Tensor
    k: Tensor
    v: Tensor

    @property
    def taw_size(self) -> int:
        return self.q.shape[0]

    def per_offset(self, path: str) -> list[np.ndarray]:
        return list(getattr(self, path.lower()).data)

    @classmethod
    def init(cls, dim: int, taw_size: int, rng: np.random.Generator, dtype=np.float32, name="taw"):
        std = np.sqrt(2.0 / (dim * taw_size))

        def mk(p):
            w = rng.normal(0.0, std, size=(taw_size, dim, dim)).astype(dtype)
            return Tensor(w, requires_grad=True, name=f"{name}.{p}")

        return cls(mk("q"), mk("k"), mk("v"))


@dataclass
class AttentionParams:
    taw: TawWeights
    q_neuron: NeuronParams
    k_neuron: NeuronParams
    v_neuron: NeuronParams
    out_w: Tensor
    out_bn: BatchNormState
    out_neuron: NeuronParams

    @classmethod
    def init(cls, dim, tokens, cfg: AttentionConfig, rng, dtype=np.float32, name="attn",
             tau_init=2.0, learn_tau=True, theta=1.0, surrogate_width=1.0):
        def neuron(tag):
            tau = TauParams.create((tokens, dim), tau_init, dtype, learn_tau, name=f"{name}.{tag}.tau")
            return NeuronParams(tau, theta, surrogate_width)

        out_w = rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, dim)).astype(dtype)
        return cls(
            taw=TawWeights.init(dim, cfg.taw_size, rng, dtype, name=f"{name}.taw"),
            q_neuron=neuron("q"),
            k_neuron=neuron("k"),
            v_neuron=neuron("v"),
            out_w=Tensor(out_w, requires_grad=True, name=f"{name}.out.w"),
            out_bn=BatchNormState.create(dim, dtype, name=f"{name}.out.bn"),
            out_neuron=neuron("out"),
        )


# ---------------------------------------------------------------------------
# temporal attention window
# ---------------------------------------------------------------------------


def taw_input(prev_spikes, weights: TawWeights, t: int, path: str) -> np.ndarray:
    """Input current for one path at a single timestep ``t``.

    ``prev_spikes`` is time-major (``T x ... x D``); only steps ``t, t-1, ...``
    inside the window contribute.
    """
    s = np.asarray(prev_spikes.data if hasattr(prev_spikes, "data") else prev_spikes)
    w = getattr(weights, path.lower()).data
    size = w.shape[0]
    if size < 1:
        raise AttentionConfigError("taw_size must be >= 1")
    if not 0 <= t < s.shape[0]:
        raise IndexError(f"timestep {t} outside [0, {s.shape[0]})")
    out = s[t] @ w[0]
    for m in range(1, min(size, t + 1)):
        out = out + s[t - m] @ w[m]
    return out


def taw_unfold(x, taw_size: int) -> Tensor:
    """Stack causally shifted copies of ``x[T, ..., D]`` along the feature axis.

    Block ``m`` of the result at step ``t`` is ``x[t - m]`` (zeros before the
    sequence start), so ``taw_unfold(x, M) @ W.reshape(M * D, D)`` evaluates
    the windowed input for every step at once.
    """
    x = as_tensor(x)
    if taw_size < 1:
        raise AttentionConfigError("taw_size must be >= 1")
    T, d = x.shape[0], x.shape[-1]
    if taw_size == 1:
        return x
    out = np.zeros(x.shape[:-1] + (taw_size * d,), dtype=x.data.dtype)
    for m in range(taw_size):
        if m < T:
            out[m:, ..., m * d:(m + 1) * d] = x.data[: T - m]

    def backward(g):
        gx = np.zeros_like(x.data)
        for m in range(taw_size):
            if m < T:
                gx[: T - m] += g[m:, ..., m * d:(m + 1) * d]
        return (gx,)

    return _record(out, (x,), backward, "taw_unfold")


def taw_inputs(x, w: Tensor) -> Tensor:
    """Windowed input currents for every timestep; ``w`` is ``(M, D, D)``."""
    m, d, p = w.shape
    stacked = reshape(w, (m * d, p)) if m > 1 else reshape(w, (d, p))
    return matmul(taw_unfold(x, m), stacked)


# ---------------------------------------------------------------------------
# attention map and denoising
# ---------------------------------------------------------------------------


class ComparatorCounter:
    def __init__(self):
        self.count = 0


_COUNTERS: list[ComparatorCounter] = []


@contextlib.contextmanager
def count_comparisons():
    """Collect the number of threshold comparisons made by :func:`denoise`."""
    counter = ComparatorCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


_MASK_LOGS: list[list] = []


@contextlib.contextmanager
def record_denoise_masks():
    """Collect the keep-masks produced by :func:`denoise` inside the block."""
    log: list = []
    _MASK_LOGS.append(log)
    try:
        yield log
    finally:
        _MASK_LOGS.remove(log)


def _is_binary(a: np.ndarray) -> bool:
    return bool(np.all((a == 0) | (a == 1)))


def attention_map(q_spikes, k_spikes) -> np.ndarray:
    """``Q @ K^T`` for one timestep and head; entries count co-active features."""
    q = np.asarray(q_spikes.data if isinstance(q_spikes, Tensor) else q_spikes)
    k = np.asarray(k_spikes.data if isinstance(k_spikes, Tensor) else k_spikes)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"feature widths differ: {q.shape} vs {k.shape}")
    if not (_is_binary(q) and _is_binary(k)):
        raise ContractError("attention_map expects binary spike inputs")
    return q @ np.swapaxes(k, -1, -2)


def denoise(a, u: float):
    """Zero every entry of the attention map below ``u``.

    Exactly one comparison per entry.  Accepts arrays or tape tensors; the
    gradient passes through kept entries and is zero elsewhere.
    """
    if u < 0:
        raise AttentionConfigError("denoise threshold must be nonnegative")
    for c in _COUNTERS:
        c.count += int(np.size(a.data if isinstance(a, Tensor) else a))
    if not isinstance(a, Tensor):
        a = np.asarray(a)
        return np.where(a >= u, a, 0).astype(a.dtype)
    keep = a.data >= u
    for log in _MASK_LOGS:
        log.append(keep)
    out = np.where(keep, a.data, 0).astype(a.data.dtype)
    return _record(out, (a,), lambda g: (g * keep,), "denoise")


# ---------------------------------------------------------------------------
# DSSA / MDSSA
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    T, B, N, D = x.shape
    return transpose(reshape(x, (T, B, N, heads, D // heads)), (0, 1, 3, 2, 4))


def _merge_heads(x: Tensor) -> Tensor:
    T, B, H, N, d = x.shape
    return reshape(transpose(x, (0, 1, 3, 2, 4)), (T, B, N, H * d))


def mdssa_forward(x, params: AttentionParams, cfg: AttentionConfig, mode: str = "train",
                  update_stats: bool = True, maps: list | None = None) -> Tensor:
    """Multi-head spiking self-attention over a ``(T, B, N, D)`` input.

    Q/K/V spikes come from windowed inputs and LIF arrays; heads split the
    feature axis.  The concatenated ``scale * denoise(Q K^T) V`` goes
    through Linear, BatchNorm and a LIF array.  When ``maps`` is a list the
    (pre-scale, post-denoise) attention maps are appended to it.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"expected (T, B, N, D) input, got {x.shape}")
    T, B, N, D = x.shape
    if params.taw.q.shape[1:] != (D, D):
        raise DimensionError(f"TAW weights {params.taw.q.shape} do not match feature width {D}")
    cfg.validate(D, T)
    if params.taw.taw_size != cfg.taw_size:
        raise AttentionConfigError("TAW weights and config disagree on taw_size")

    q = lif_sequence(taw_inputs(x, params.taw.q), params.q_neuron)
    k = lif_sequence(taw_inputs(x, params.taw.k), params.k_neuron)
    v = lif_sequence(taw_inputs(x, params.taw.v), params.v_neuron)

    qh, kh, vh = (_split_heads(t, cfg.heads) for t in (q, k, v))
    if current_spike_mode() == "hard" and not (_is_binary(qh.data) and _is_binary(kh.data)):
        raise ContractError("query/key spikes must be binary")
    a = bmm(qh, kh, transpose_b=True)
    if cfg.adn_enabled:
        a = denoise(a, cfg.denoise_threshold)
    if maps is not None:
        maps.append(a.data)
    av = scale(bmm(a, vh), cfg.attn_scale)
    pre = matmul(_merge_heads(av), params.out_w)
    pre = batchnorm(pre, params.out_bn, mode, update_stats)
    return lif_sequence(pre, params.out_neuron)


def dssa_forward(x, params: AttentionParams, cfg: AttentionConfig, mode: str = "train",
                 update_stats: bool = True, maps: list | None = None) -> Tensor:
    """Single-head attention layer (``heads`` forced to 1)."""
    single = AttentionConfig(cfg.taw_size, cfg.denoise_threshold, cfg.adn_enabled, 1, cfg.attn_scale)
    return mdssa_forward(x, params, single, mode, update_stats, maps)
