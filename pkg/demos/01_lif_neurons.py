"""Leaky integrate-and-fire neurons and their learnable time constants.

Run: python3 demos/01_lif_neurons.py
"""
import numpy as np

from dista.neuron import NeuronParams, TauParams, lif_sequence, spike_mode
from dista.training import tau_closed_form_check

# %% A single neuron driven by a constant current of 0.6.
# With tau = 2 the membrane keeps half of its potential each step, so it
# climbs 0.6 -> 0.9 -> 1.05 and fires on the third step, then resets.
params = NeuronParams(TauParams.create((1,), 2.0, np.float64), theta=1.0)
current = np.full((6, 1), 0.6)
spikes, potential = lif_sequence(current, params, return_potentials=True)
print("potential:", potential.data.ravel().round(3))
print("spikes:   ", spikes.data.ravel())

# %% Larger time constants remember more.  Same input, three neurons.
params = NeuronParams(TauParams.create((3,), 2.0, np.float64))
params.tau.values.data[...] = [1.5, 2.0, 8.0]
spikes, potential = lif_sequence(np.full((6, 3), 0.3), params, return_potentials=True)
for tau, s in zip(params.tau.values.data, spikes.data.T):
    print(f"tau={tau:4.1f} fires at steps {np.flatnonzero(s).tolist()}")

# %% The hard threshold has no derivative, so training uses a rectangular
# surrogate.  For gradient checking the whole network can switch to a smooth
# sigmoid in both passes.
with spike_mode("smooth"):
    soft = lif_sequence(np.full((4, 1), 0.6), NeuronParams(TauParams.create((1,), 2.0, np.float64)))
print("smooth spikes:", soft.data.ravel().round(3))

# %% Gradient with respect to tau, against its closed form.
# Two quiet steps with inputs (0.2, 0): V[2] = (1 - 1/tau) * 0.2, so
# dV[2]/dtau = 0.2 / tau^2.
bptt, closed = tau_closed_form_check(2.0)
print(f"BPTT dV/dtau = {bptt:.6f}, closed form = {closed:.6f}")
