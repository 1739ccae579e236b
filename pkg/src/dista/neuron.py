"""Discrete-time leaky integrate-and-fire neurons with learnable membrane
time constants.

    V[t] = (1 - 1/tau) * V[t-1] * (1 - s[t-1]) + I[t]
    s[t] = H(V[t] - theta)

The backward pass of the step function uses a rectangular surrogate window.
Inside :func:`spike_mode` ``"smooth"`` the step is replaced by
``sigmoid((v - theta) / a)`` in both passes, which makes whole networks
genuinely differentiable for finite-difference checks.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor, _record, _unbroadcast, as_tensor

TAU_MIN = 1.01
TAU_MAX = 100.0
TAU_INIT = 2.0


class ParameterDomainError(ValueError):
    """Raised when a membrane time constant leaves (1, inf)."""


_MODE = ["hard"]


@contextlib.contextmanager
def spike_mode(mode: str):
    """Temporarily switch the spike nonlinearity (``"hard"`` or ``"smooth"``)."""
    if mode not in ("hard", "smooth"):
        raise ValueError(f"unknown spike mode {mode!r}")
    _MODE.append(mode)
    try:
        yield
    finally:
        _MODE.pop()


def current_spike_mode() -> str:
    return _MODE[-1]


@dataclass
class TauParams:
    values: Tensor
    learnable: bool = True

    @classmethod
    def create(cls, shape, init: float = TAU_INIT, dtype=np.float32, learnable: bool = True, name: str = "tau"):
        data = np.full(shape, init, dtype=dtype)
        return cls(Tensor(data, requires_grad=learnable, name=name), learnable)


@dataclass
class NeuronParams:
    tau: TauParams
    theta: float = 1.0
    surrogate_width: float = 1.0

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.surrogate_width <= 0:
            raise ValueError("surrogate_width must be positive")


@dataclass
class MembraneState:
    v: np.ndarray
    s_prev: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float32):
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


@dataclass
class SpikeSequence:
    """Time-major binary activations; ``data`` has shape ``(T, B, N, D)``."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not np.all((self.data == 0) | (self.data == 1)):
            raise ValueError("spike sequence entries must be 0 or 1")

    @property
    def steps(self) -> list[np.ndarray]:
        return list(self.data)

    @property
    def T(self) -> int:
        return self.data.shape[0]


def heaviside(x):
    """Step function with H(0) = 1."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    return (x >= 0).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32)


def surrogate_pseudo_derivative(v, theta: float, a: float):
    """Rectangular window of width ``a`` and height ``1/a`` centred on theta."""
    if a <= 0:
        raise ValueError("surrogate width must be positive")
    v = np.asarray(v)
    dt = v.dtype if np.issubdtype(v.dtype, np.floating) else np.float64
    return np.where(np.abs(v - theta) < a / 2, 1.0 / a, 0.0).astype(dt)


def _smooth_spike(v, theta, a):
    return 1.0 / (1.0 + np.exp(-(v - theta) / a))


def _spike_forward(v, theta, a, mode):
    if mode == "smooth":
        return _smooth_spike(v, theta, a).astype(v.dtype)
    return (v >= theta).astype(v.dtype)


def _spike_backward(v, s, theta, a, mode):
    if mode == "smooth":
        return s * (1.0 - s) / a
    return surrogate_pseudo_derivative(v, theta, a)


def _check_tau(tau: np.ndarray):
    if np.any(tau <= 1.0):
        raise ParameterDomainError("membrane time constant must exceed 1")


def lif_step(state: MembraneState, input_current, params: NeuronParams):
    """Advance one timestep.  Returns ``(new_state, spikes)``."""
    tau = params.tau.values.data
    _check_tau(tau)
    i = np.asarray(input_current.data if isinstance(input_current, Tensor) else input_current)
    decay = 1.0 - 1.0 / tau
    v = decay * state.v * (1.0 - state.s_prev) + i
    s = _spike_forward(v, params.theta, params.surrogate_width, current_spike_mode())
    return MembraneState(v, s), s


def lif_sequence(inputs, params: NeuronParams, return_potentials: bool = False):
    """Run LIF dynamics over the leading (time) axis of ``inputs``.

    The whole recursion is one tape node, so BPTT flows through the decay
    factor into ``params.tau`` and through the reset term.  Returns the
    spike tensor, plus the membrane trace when ``return_potentials``.
    """
    x = as_tensor(inputs)
    tau_t = params.tau.values
    tau = tau_t.data
    _check_tau(tau)
    theta, a = params.theta, params.surrogate_width
    mode = current_spike_mode()
    dt = x.data.dtype.type
    decay = (dt(1.0) - dt(1.0) / tau).astype(x.data.dtype)

    T = x.shape[0]
    vs = np.empty_like(x.data)
    ss = np.empty_like(x.data)
    v = np.zeros(x.shape[1:], dtype=x.data.dtype)
    s = np.zeros_like(v)
    for t in range(T):
        v = decay * v * (dt(1.0) - s) + x.data[t]
        s = _spike_forward(v, theta, a, mode)
        vs[t] = v
        ss[t] = s

    def bptt(g_spikes, g_potentials):
        g = g_spikes if g_spikes is not None else np.zeros_like(g_potentials)
        gi = np.empty_like(g)
        gdecay = np.zeros(x.shape[1:], dtype=g.dtype)
        gv_next = np.zeros(x.shape[1:], dtype=g.dtype)
        for t in range(T - 1, -1, -1):
            v_t, s_t = vs[t], ss[t]
            gs = g[t]
            if t < T - 1:
                gs = gs - gv_next * decay * v_t
                keep = 1.0 - s_t
                gdecay += gv_next * v_t * keep
                carry = gv_next * decay * keep
            else:
                carry = 0.0
            gv = gs * _spike_backward(v_t, s_t, theta, a, mode) + carry
            if g_potentials is not None:
                gv = gv + g_potentials[t]
            gi[t] = gv
            gv_next = gv
        gtau = _unbroadcast(gdecay / (tau * tau), tau.shape)
        return gi, gtau

    out = _record(ss, (x, tau_t), lambda g: bptt(g, None), "lif")
    if return_potentials:
        # second output: gradients from both nodes add by linearity
        pot = _record(vs, (x, tau_t), lambda g: bptt(None, g), "lif_potential")
        return out, pot
    return out


def clamp_tau(tau: TauParams) -> TauParams:
    """Project every time constant into ``[TAU_MIN, TAU_MAX]`` in place."""
    np.clip(tau.values.data, TAU_MIN, TAU_MAX, out=tau.values.data)
    return tau
