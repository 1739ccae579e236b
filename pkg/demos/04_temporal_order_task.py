"""A task that is impossible without looking across time.

Every class shows the same four frames; only their cyclic order differs,
and each sample starts at a random point of its cycle.  Averaging over time
throws the label away.

Run: python3 demos/04_temporal_order_task.py   (about a minute)
"""
import numpy as np
from sklearn.linear_model import LogisticRegression

from dista import cli
from dista.config import RunConfig
from dista.data import gen_temporal_synthetic
from dista.training import OptimState, evaluate, train_epoch

cfg = RunConfig(syn_train=2000, syn_test=500)
train, test = gen_temporal_synthetic(cfg.synthetic_spec())
print("inputs:", train.inputs.shape, "labels:", np.bincount(train.labels))

# %% An order-blind baseline: logistic regression on time-averaged frames.
pooled = lambda d: d.inputs.mean(axis=1).reshape(len(d), -1)
probe = LogisticRegression(max_iter=2000).fit(pooled(train), train.labels)
print(f"time-pooled probe accuracy: {probe.score(pooled(test), test.labels):.3f}")


# %% The spiking transformer, with neurons that forget everything between
# steps (tau pinned near 1), with and without a temporal window.
def fit(taw_size, epochs=3):
    run = cfg.replace(taw_size=taw_size, tau_init=1.01, learn_tau=False, adn=False, epochs=epochs)
    model, optim = cli.build_model(run), OptimState()
    for epoch in range(epochs):
        train_epoch(model, train, run.train_hyper(), optim, epoch)
    return evaluate(model, test)[0]


for taw in (1, 8):
    print(f"window {taw}: test accuracy {fit(taw):.3f}")
