"""Temporal attention windows and attention-map denoising.

Run: python3 demos/02_attention_window_and_denoising.py
"""
import numpy as np

from dista.attention import (
    AttentionConfig,
    AttentionParams,
    TawWeights,
    attention_map,
    count_comparisons,
    denoise,
    mdssa_forward,
    taw_input,
)
from dista.numerics import Tensor

# %% The windowed input sums the present and past spikes, each through its
# own matrix.  Offset 0 is the current step.
s = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])  # s[t-1], s[t]
w = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]], [[10.0, 20.0], [30.0, 40.0]]]))
print("I[t] =", taw_input(s, TawWeights(w, w, w), t=1, path="q"))  # [[31, 42]]

# %% Binary queries and keys give an integer attention map: each entry counts
# the features two tokens share.  Denoising zeroes weak correlations.
rng = np.random.default_rng(0)
q = (rng.random((5, 8)) < 0.5).astype(float)
k = (rng.random((5, 8)) < 0.5).astype(float)
a = attention_map(q, k)
print("attention map:\n", a.astype(int))
print("after denoising with u=3:\n", denoise(a, 3).astype(int))

# %% One comparison per map entry: T * H * N^2 for a single sample.
T, H, N, D = 4, 2, 6, 8
cfg = AttentionConfig(taw_size=2, heads=H, denoise_threshold=3)
params = AttentionParams.init(D, N, cfg, rng)
x = (rng.random((T, 1, N, D)) < 0.5).astype(np.float32)
with count_comparisons() as counter:
    out = mdssa_forward(x, params, cfg)
print(f"comparisons: {counter.count} (T*H*N^2 = {T * H * N * N})")
print("output spikes per step:", out.data.sum(axis=(1, 2, 3)))
