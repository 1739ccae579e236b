"""Checking backpropagation through time against finite differences.

The tiny model here is smaller than the one in configs/gradcheck.cfg so the
script finishes in a few seconds.

Run: python3 demos/03_gradient_check.py
"""
import numpy as np

from dista.attention import AttentionConfig
from dista.model import DISTA, ModelConfig
from dista.training import gradcheck_model, group_errors

cfg = ModelConfig.for_sequences(tokens=4, in_features=4, blocks=1, dim=8, timesteps=3, num_classes=3,
                                attention=AttentionConfig(taw_size=2, heads=2, adn_enabled=False))
model = DISTA(cfg, seed=0, dtype=np.float64)
x = np.random.default_rng(0).normal(size=(3, 3, 4, 4))
y = np.array([0, 1, 2])

# Every weight, batch-norm parameter and membrane time constant is compared.
errors = gradcheck_model(model, x, y)
for group, err in sorted(group_errors(errors).items()):
    print(f"{group:7s} max relative error {err:.2e}")
