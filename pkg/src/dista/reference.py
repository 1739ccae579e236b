"""Spatial-only spiking transformer written with explicit per-step loops.

This is the plain baseline the windowed model must collapse to when the
window holds only the present step, every time constant is fixed at 2 and
denoising is off: Q/K/V see only the current layer input, each neuron
leaks by exactly one half per step, and the attention map is used as is.

It shares no code with the tape-based model.  Weights come in as a flat
``{name: array}`` mapping using the same names as the parameter registry,
so the two can be compared on identical parameters.
"""

from __future__ import annotations

import numpy as np

DECAY = 0.5
THETA = 1.0
BN_EPS = 1e-5


def lif_loop(currents: np.ndarray, theta: float = THETA) -> np.ndarray:
    """Leak by ``DECAY`` per step, fire at ``theta``, hard reset to zero."""
    dt = currents.dtype.type
    v = np.zeros(currents.shape[1:], dtype=currents.dtype)
    s = np.zeros_like(v)
    out = np.empty_like(currents)
    for t in range(currents.shape[0]):
        v = dt(DECAY) * v * (dt(1.0) - s) + currents[t]
        s = (v >= theta).astype(currents.dtype)
        out[t] = s
    return out


def linear_loop(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply ``w`` to every timestep separately."""
    out = np.empty(x.shape[:-1] + (w.shape[1],), dtype=x.dtype)
    for t in range(x.shape[0]):
        rows = x[t].reshape(-1, x.shape[-1])
        out[t] = (rows @ w).reshape(x.shape[1:-1] + (w.shape[1],))
    return out


def batch_norm(x: np.ndarray, gamma, beta, stats=None) -> np.ndarray:
    """Per-channel normalization over every leading axis.

    ``stats`` is ``(running_mean, running_var)`` for inference; otherwise
    the batch statistics with population variance are used.
    """
    dt = x.dtype.type
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    if stats is None:
        mean = flat.mean(0)
        centred = flat - mean
        var = (centred * centred).mean(0)
        normed = centred * (dt(1.0) / np.sqrt(var + dt(BN_EPS)))
    else:
        mean, var = stats
        normed = (flat - mean) * (dt(1.0) / np.sqrt(var + dt(BN_EPS)))
    return (normed * gamma + beta).reshape(x.shape)


def spatial_attention(x: np.ndarray, w: dict, prefix: str, heads: int, scale: float = 0.125,
                      stats: dict | None = None) -> np.ndarray:
    """Spiking self-attention that only looks at the current timestep."""
    T, B, N, D = x.shape
    d = D // heads
    q = lif_loop(linear_loop(x, w[f"{prefix}.taw.q"][0]))
    k = lif_loop(linear_loop(x, w[f"{prefix}.taw.k"][0]))
    v = lif_loop(linear_loop(x, w[f"{prefix}.taw.v"][0]))
    mixed = np.zeros_like(x)
    for t in range(T):
        for b in range(B):
            for h in range(heads):
                cols = slice(h * d, (h + 1) * d)
                a = q[t, b, :, cols] @ k[t, b, :, cols].T
                mixed[t, b, :, cols] = (a @ v[t, b, :, cols]) * x.dtype.type(scale)
    pre = linear_loop(mixed, w[f"{prefix}.out.w"])
    st = None if stats is None else stats[f"{prefix}.out.bn"]
    return lif_loop(batch_norm(pre, w[f"{prefix}.out.bn.gamma"], w[f"{prefix}.out.bn.beta"], st))


def _spiking_linear(x, w, prefix, stats):
    st = None if stats is None else stats[f"{prefix}.bn"]
    pre = linear_loop(x, w[f"{prefix}.w"])
    return lif_loop(batch_norm(pre, w[f"{prefix}.bn.gamma"], w[f"{prefix}.bn.beta"], st))


def to_patches(images: np.ndarray, p: int) -> np.ndarray:
    """``(B, C, H, W)`` to ``(B, N, C*p*p)`` with row-major patch order."""
    B, C, H, W = images.shape
    rows, cols = H // p, W // p
    out = np.empty((B, rows * cols, C * p * p), dtype=images.dtype)
    for i in range(rows):
        for j in range(cols):
            out[:, i * cols + j] = images[:, :, i * p:(i + 1) * p, j * p:(j + 1) * p].reshape(B, -1)
    return out


def reference_forward(x: np.ndarray, w: dict, blocks: int, heads: int, timesteps: int | None = None,
                      patch_size: int | None = None, stats: dict | None = None) -> np.ndarray:
    """Logits for sequences ``(T, B, N, F)``, or for images ``(B, C, H, W)``
    when ``patch_size`` and ``timesteps`` are given."""
    if patch_size is not None:
        tokens = to_patches(x, patch_size)
        x = np.stack([tokens] * timesteps)
    h = _spiking_linear(x, w, "embed", stats)
    for i in range(blocks):
        h = h + spatial_attention(h, w, f"block{i}.attn", heads, stats=stats)
        h = h + _spiking_linear(_spiking_linear(h, w, f"block{i}.mlp.fc1", stats),
                                w, f"block{i}.mlp.fc2", stats)
    pooled = h.mean(axis=(0, 2))
    return pooled @ w["head.w"] + w["head.b"]
